//! Pipeline steps behind the subcommands. Every step writes into a hidden
//! staging directory next to its output and renames it into place when done.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxshield_core::io::{self, Dataset, MANIFEST};
use voxshield_core::metrics;
use voxshield_core::networks::VictimArch;
use voxshield_core::protector::{self, MaskMode};
use voxshield_core::synth::{generate_dataset, Split};
use voxshield_core::victim::{self, VictimRunReport};
use voxshield_core::volume::{LabelMap, ProtectedVolume, Volume};
use voxshield_core::Error as CoreError;

use crate::config::{hex, ExperimentConfig};
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const PROTECTION_FILE: &str = "protection.json";
pub const TRAINING_LOG_FILE: &str = "training_log.json";

pub const CLEAN_DIR: &str = "clean";
pub const VAL_DIR: &str = "val";
pub const TEST_DIR: &str = "test";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Voxshield,
    Em,
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_spd: bool,
    pub no_isc: bool,
    pub mask_all_ones: bool,
}

/// Content hash in the style of a git blob id, with SHA-256.
pub fn git_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub config_hash: String,
    pub inputs: Vec<InputHash>,
}

fn input_hash(path: &Path) -> CliResult<InputHash> {
    let bytes = fs::read(path).map_err(|e| missing(path, e))?;
    Ok(InputHash {
        path: path.display().to_string(),
        hash: git_hash(&bytes),
    })
}

fn missing(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::MissingInput {
            path: path.to_path_buf(),
            reason: "not found".into(),
        }
    } else {
        CliError::io(path, e)
    }
}

fn load_input(dir: &Path) -> CliResult<Dataset> {
    if !dir.join(MANIFEST).is_file() {
        return Err(CliError::MissingInput {
            path: dir.to_path_buf(),
            reason: "no dataset manifest (run the earlier pipeline step first)".into(),
        });
    }
    Ok(io::load_dataset(dir)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s.into_bytes()
}

/// An output directory under construction.
struct Staged {
    target: PathBuf,
    staging: PathBuf,
    done: bool,
}

impl Staged {
    /// `Ok(None)` means the output exists and `skip_existing` was given.
    fn begin(target: PathBuf, skip_existing: bool) -> CliResult<Option<Self>> {
        if target.exists() {
            if skip_existing {
                log::info!("{} exists, skipping", target.display());
                return Ok(None);
            }
            return Err(CliError::Exists(target));
        }
        let name = target.file_name().expect("output paths have a final component").to_string_lossy();
        let parent = target.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        let staging = parent.join(format!(".{name}.staging"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
        }
        Ok(Some(Self {
            target,
            staging,
            done: false,
        }))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        fs::create_dir_all(&self.staging).map_err(|e| CliError::io(&self.staging, e))?;
        write_atomic(&self.path(name), bytes)
    }

    fn commit(mut self, cfg: &ExperimentConfig, command: &str, inputs: Vec<InputHash>) -> CliResult<PathBuf> {
        self.write(CONFIG_FILE, cfg.to_toml().as_bytes())?;
        let run = RunManifest {
            tool: format!("voxshield {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            config_hash: cfg.hash(),
            inputs,
        };
        self.write(RUN_FILE, &to_json(&run))?;
        fs::rename(&self.staging, &self.target).map_err(|e| CliError::io(&self.target, e))?;
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Writes `clean/` (training split, the data an owner would release),
/// `val/` and `test/` (held out, never protected).
pub fn generate_data(cfg: &ExperimentConfig, skip_existing: bool) -> CliResult<Vec<PathBuf>> {
    let root = cfg.output_root();
    let names = [CLEAN_DIR, VAL_DIR, TEST_DIR];
    if !skip_existing {
        if let Some(existing) = names.iter().map(|n| root.join(n)).find(|p| p.exists()) {
            return Err(CliError::Exists(existing));
        }
    }
    let data = generate_dataset(&cfg.synth)?;
    let split = Split::by_index(data.len());
    let mut written = Vec::new();
    for (name, idx) in names.iter().zip([&split.train, &split.val, &split.test]) {
        let Some(stage) = Staged::begin(root.join(name), skip_existing)? else {
            continue;
        };
        let pairs: Vec<(Volume, LabelMap)> = idx.iter().map(|&i| data[i].clone()).collect();
        io::save_clean(&stage.staging, &pairs, &cfg.hash())?;
        written.push(stage.commit(cfg, &format!("generate-data {name}"), Vec::new())?);
    }
    Ok(written)
}

pub fn protected_name(method: Method, ab: Ablation) -> CliResult<String> {
    let flags = ab.no_spd || ab.no_isc || ab.mask_all_ones;
    match method {
        Method::None | Method::Em if flags => Err(CliError::Config(
            "ablation flags apply only to --method voxshield".into(),
        )),
        Method::None => Ok("none".into()),
        Method::Em => Ok("em".into()),
        Method::Voxshield => {
            let mut name = String::from("voxshield");
            for (on, suffix) in [(ab.no_spd, "_no_spd"), (ab.no_isc, "_no_isc"), (ab.mask_all_ones, "_mask_all_ones")] {
                if on {
                    name.push_str(suffix);
                }
            }
            Ok(name)
        }
    }
}

/// Distortion of a release relative to its clean source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionSummary {
    pub method: String,
    pub volumes: usize,
    pub epsilon: f32,
    pub max_abs_deviation: f32,
    pub mean_psnr: f64,
    pub min_psnr: f64,
    pub mean_ssim: Option<f64>,
}

pub fn summarize(
    method: &str,
    epsilon: f32,
    clean: &[(Volume, LabelMap)],
    released: &[(ProtectedVolume, LabelMap)],
    with_ssim: bool,
) -> CliResult<ProtectionSummary> {
    let mut psnr = Vec::with_capacity(clean.len());
    let mut ssim = Vec::new();
    let mut dev = 0.0f32;
    for ((x, _), (p, _)) in clean.iter().zip(released) {
        let pv = p.to_volume();
        psnr.push(metrics::psnr(x, &pv)?);
        if with_ssim {
            ssim.push(metrics::ssim(x, &pv)?);
        }
        dev = dev.max(p.max_deviation(x)?);
    }
    let n = psnr.len().max(1) as f64;
    Ok(ProtectionSummary {
        method: method.to_string(),
        volumes: psnr.len(),
        epsilon,
        max_abs_deviation: dev,
        mean_psnr: psnr.iter().sum::<f64>() / n,
        min_psnr: psnr.iter().cloned().fold(f64::INFINITY, f64::min),
        mean_ssim: with_ssim.then(|| ssim.iter().sum::<f64>() / n),
    })
}

#[derive(Serialize)]
struct GeneratorLog<'a> {
    pretrain_curve: &'a [f64],
    epochs: &'a [protector::EpochLog],
}

pub fn protect(cfg: &ExperimentConfig, method: Method, ab: Ablation, skip_existing: bool) -> CliResult<Option<PathBuf>> {
    let name = protected_name(method, ab)?;
    let root = cfg.output_root();
    let input_dir = root.join(CLEAN_DIR);
    let Some(stage) = Staged::begin(root.join("protected").join(&name), skip_existing)? else {
        return Ok(None);
    };
    let clean = load_input(&input_dir)?;
    let inputs = vec![input_hash(&input_dir.join(MANIFEST))?];
    let pairs = clean.pairs();
    let command = format!("protect {name}");
    let (released, epsilon) = match method {
        Method::None => {
            copy_dataset(&input_dir, &stage.staging, &clean)?;
            let released = protector::passthrough_dataset(&pairs)?;
            let summary = summarize(&name, 0.0, &pairs, &released, cfg.metrics.ssim)?;
            stage.write(PROTECTION_FILE, &to_json(&summary))?;
            return stage.commit(cfg, &command, inputs).map(Some);
        }
        Method::Em => (protector::em_baseline(&pairs, &cfg.em)?, cfg.em.epsilon),
        Method::Voxshield => {
            let mut pcfg = cfg.protector;
            if ab.no_spd {
                pcfg.weights.lambda_spd = 0.0;
            }
            if ab.no_isc {
                pcfg.weights.lambda_isc = 0.0;
            }
            if ab.mask_all_ones {
                pcfg.mask_mode = MaskMode::AllOnes;
            }
            let ckpt = stage.target.with_extension("last-good.ckpt");
            let run = match protector::train_protector(&pairs, &pcfg, Some(&ckpt)) {
                Ok(run) => run,
                Err(e @ CoreError::Divergence { .. }) => {
                    log::error!("training diverged; last good generator kept at {}", ckpt.display());
                    return Err(e.into());
                }
                Err(e) => return Err(e.into()),
            };
            let released = protector::protect_dataset(&pairs, &run.generator, &pcfg)?;
            io::save_protected(&stage.staging, &released, &cfg.hash())?;
            fs::rename(&ckpt, stage.path("generator.ckpt")).map_err(|e| CliError::io(&ckpt, e))?;
            let log = GeneratorLog {
                pretrain_curve: &run.pretrain_curve,
                epochs: &run.log,
            };
            stage.write(TRAINING_LOG_FILE, &to_json(&log))?;
            let summary = summarize(&name, pcfg.epsilon, &pairs, &released, cfg.metrics.ssim)?;
            stage.write(PROTECTION_FILE, &to_json(&summary))?;
            return stage.commit(cfg, &command, inputs).map(Some);
        }
    };
    io::save_protected(&stage.staging, &released, &cfg.hash())?;
    let summary = summarize(&name, epsilon, &pairs, &released, cfg.metrics.ssim)?;
    stage.write(PROTECTION_FILE, &to_json(&summary))?;
    stage.commit(cfg, &command, inputs).map(Some)
}

/// Byte-for-byte copy of a dataset's manifest and array files.
fn copy_dataset(from: &Path, to: &Path, ds: &Dataset) -> CliResult<()> {
    let mut files = vec![MANIFEST.to_string()];
    for v in &ds.manifest.volumes {
        files.push(v.data_path.clone());
        files.push(v.label_path.clone());
    }
    for f in files {
        let dst = to.join(&f);
        if let Some(p) = dst.parent() {
            fs::create_dir_all(p).map_err(|e| CliError::io(p, e))?;
        }
        fs::copy(from.join(&f), &dst).map_err(|e| CliError::io(from.join(&f), e))?;
    }
    Ok(())
}

fn dataset_name(dir: &Path) -> CliResult<String> {
    let canonical = dir.canonicalize().map_err(|e| missing(dir, e))?;
    Ok(canonical
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into()))
}

pub fn train_victim(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    arch: VictimArch,
    skip_existing: bool,
) -> CliResult<Option<PathBuf>> {
    let root = cfg.output_root();
    let name = dataset_name(dataset_dir)?;
    let (spec, training) = cfg.victim(arch)?;
    let Some(stage) = Staged::begin(root.join("victims").join(&name).join(arch.tag()), skip_existing)? else {
        return Ok(None);
    };
    let test_dir = root.join(TEST_DIR);
    let train = load_input(dataset_dir)?;
    let test = load_input(&test_dir)?;
    let inputs = vec![
        input_hash(&dataset_dir.join(MANIFEST))?,
        input_hash(&test_dir.join(MANIFEST))?,
    ];
    let trained = victim::train_victim(&train.pairs(), &spec, &training)?;
    let report = victim::evaluate_victim(&trained, &name, train.ids(), &test.pairs())?;
    fs::create_dir_all(&stage.staging).map_err(|e| CliError::io(&stage.staging, e))?;
    trained
        .net
        .save_checkpoint(&stage.path("model.ckpt"), (training.epochs * train.entries.len()) as u64)?;
    stage.write(REPORT_FILE, &to_json(&report))?;
    stage.commit(cfg, &format!("train-victim {name} {}", arch.tag()), inputs).map(Some)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub victim: String,
    pub dsc: f64,
    pub hd95: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| missing(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// All `victims/<dataset>/<arch>/report.json` under the output root, sorted.
pub fn discover_reports(root: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let victims = root.join("victims");
    let Ok(datasets) = fs::read_dir(&victims) else {
        return Ok(out);
    };
    for ds in datasets {
        let ds = ds.map_err(|e| CliError::io(&victims, e))?.path();
        let Ok(archs) = fs::read_dir(&ds) else { continue };
        for a in archs {
            let p = a.map_err(|e| CliError::io(&ds, e))?.path().join(REPORT_FILE);
            if p.is_file() {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn collect_rows(cfg: &ExperimentConfig, reports: &[PathBuf]) -> CliResult<Vec<TableRow>> {
    let root = cfg.output_root();
    let paths = if reports.is_empty() {
        discover_reports(&root)?
    } else {
        reports.to_vec()
    };
    if paths.is_empty() {
        return Err(CliError::MissingInput {
            path: root.join("victims"),
            reason: "no victim reports found".into(),
        });
    }
    paths
        .iter()
        .map(|p| {
            let r: VictimRunReport = read_json(p)?;
            let prot = root.join("protected").join(&r.dataset).join(PROTECTION_FILE);
            let summary: Option<ProtectionSummary> = if prot.is_file() { Some(read_json(&prot)?) } else { None };
            Ok(TableRow {
                method: r.dataset,
                victim: r.victim,
                dsc: r.mean_dsc,
                hd95: r.mean_hd95,
                psnr: summary.as_ref().map(|s| s.mean_psnr),
                ssim: summary.and_then(|s| s.mean_ssim),
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

pub fn render_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("method,victim,dsc,hd95,psnr,ssim\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{:.4},{},{}\n",
            r.method,
            r.victim,
            r.dsc,
            r.hd95,
            opt(r.psnr),
            opt(r.ssim)
        ));
    }
    s
}

pub fn render_text(rows: &[TableRow]) -> String {
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            let dash = |v: Option<f64>, p: usize| v.map(|v| format!("{v:.p$}")).unwrap_or_else(|| "-".into());
            [
                r.method.clone(),
                r.victim.clone(),
                format!("{:.2}", 100.0 * r.dsc),
                format!("{:.2}", r.hd95),
                dash(r.psnr, 2),
                dash(r.ssim, 4),
            ]
        })
        .collect();
    let header = ["method", "victim", "DSC(%)", "HD95", "PSNR", "SSIM"];
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |row: &[&str]| {
        let mut s = String::new();
        for (i, (c, w)) in row.iter().zip(&width).enumerate() {
            if i < 2 {
                s.push_str(&format!("{c:<w$}  "));
            } else {
                s.push_str(&format!("{c:>w$}  "));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    out.push_str(&line(&width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>()));
    for row in &cells {
        out.push_str(&line(&row.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    out
}

/// Prints the comparison table; writes the CSV only when `csv` is given.
pub fn evaluate(cfg: &ExperimentConfig, reports: &[PathBuf], csv: Option<&Path>) -> CliResult<String> {
    let rows = collect_rows(cfg, reports)?;
    if let Some(path) = csv {
        if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(p).map_err(|e| CliError::io(p, e))?;
        }
        write_atomic(path, render_csv(&rows).as_bytes())?;
    }
    Ok(render_text(&rows))
}
