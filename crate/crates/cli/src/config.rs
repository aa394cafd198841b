use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxshield_core::networks::{VictimArch, VictimSpec};
use voxshield_core::protector::{EmConfig, ProtectorConfig};
use voxshield_core::synth::SynthSpec;
use voxshield_core::victim::{VictimTraining, DEFAULT_LR};

use crate::error::{CliError, CliResult};

/// Overrides `output_dir` from the config file when set.
pub const OUTPUT_ENV: &str = "VOXSHIELD_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimEntry {
    pub arch: VictimArch,
    #[serde(default = "default_victim_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
}

fn default_victim_epochs() -> usize {
    VictimTraining::default().epochs
}

fn default_lr() -> f32 {
    DEFAULT_LR
}

fn default_victims() -> Vec<VictimEntry> {
    VictimArch::ALL
        .into_iter()
        .map(|arch| VictimEntry {
            arch,
            epochs: default_victim_epochs(),
            lr: DEFAULT_LR,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsOptions {
    /// Also compute slice-wise SSIM between clean and protected volumes.
    pub ssim: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self { ssim: true }
    }
}

/// One experiment. The top-level `seed` is the only seed: component seeds
/// are set from it during resolution and may only repeat its value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub synth: SynthSpec,
    #[serde(default)]
    pub protector: ProtectorConfig,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default = "default_victims")]
    pub victims: Vec<VictimEntry>,
    #[serde(default)]
    pub metrics: MetricsOptions,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for section in ["synth", "protector", "em"] {
            let explicit = raw
                .get(section)
                .and_then(|s| s.get("seed"))
                .and_then(|v| v.as_integer());
            if let Some(v) = explicit {
                if v != cfg.seed as i64 {
                    return Err(CliError::Config(format!(
                        "{section}.seed = {v} conflicts with the top-level seed {}; set only `seed`",
                        cfg.seed
                    )));
                }
            }
        }
        cfg.synth.seed = cfg.seed;
        cfg.protector.seed = cfg.seed;
        cfg.em.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn validate(&self) -> CliResult<()> {
        self.synth.validate()?;
        self.protector.validate()?;
        self.em.validate()?;
        if self.victims.is_empty() {
            return Err(CliError::Config("at least one victim is required".into()));
        }
        for (i, v) in self.victims.iter().enumerate() {
            if self.victims[..i].iter().any(|o| o.arch == v.arch) {
                return Err(CliError::Config(format!("victim {} listed twice", v.arch.tag())));
            }
            if v.lr.is_nan() || v.lr <= 0.0 {
                return Err(CliError::Config(format!("victim {} needs a positive lr", v.arch.tag())));
            }
        }
        Ok(())
    }

    /// Fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => self.output_dir.clone(),
        }
    }

    pub fn victim(&self, arch: VictimArch) -> CliResult<(VictimSpec, VictimTraining)> {
        let entry = self
            .victims
            .iter()
            .find(|v| v.arch == arch)
            .ok_or_else(|| CliError::Config(format!("victim {} is not listed in the config", arch.tag())))?;
        Ok((
            victim_spec(arch, self.seed),
            VictimTraining {
                epochs: entry.epochs,
                lr: entry.lr,
            },
        ))
    }
}

/// Victim initialization depends on the seed and architecture only, so
/// clean and protected runs of one architecture start from the same weights.
pub fn victim_spec(arch: VictimArch, seed: u64) -> VictimSpec {
    let idx = VictimArch::ALL.iter().position(|a| *a == arch).unwrap_or(0) as u64;
    VictimSpec::preset(arch, seed.wrapping_mul(1009).wrapping_add(100 + idx))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_resolves_defaults() {
        let c = ExperimentConfig::parse("seed = 3\noutput_dir = \"out\"\n").unwrap();
        assert_eq!(c.synth.seed, 3);
        assert_eq!(c.protector.seed, 3);
        assert_eq!(c.victims.len(), 3);
        let again = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_and_conflicting_seeds_are_rejected() {
        assert!(ExperimentConfig::parse("seed = 1\noutput_dir = \"o\"\ncolour = 1\n").is_err());
        assert!(ExperimentConfig::parse("seed = 1\noutput_dir = \"o\"\n[protector]\nepsiloon = 0.1\n").is_err());
        assert!(ExperimentConfig::parse("seed = 1\noutput_dir = \"o\"\n[synth]\nseed = 2\n").is_err());
        assert!(ExperimentConfig::parse("seed = 1\noutput_dir = \"o\"\n[protector]\nepochs = 0\n").is_err());
    }
}
