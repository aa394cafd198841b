use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use voxshield_cli::config::victim_spec;
use voxshield_core::metrics::psnr;
use voxshield_core::networks::VictimArch;
use voxshield_core::protector::{
    em_baseline, pretrain_surrogate, protect_dataset, train_generator, EmConfig, ProtectorConfig, DEFAULT_EPSILON,
};
use voxshield_core::synth::{generate_dataset, SynthSpec, Split};
use voxshield_core::victim::{score, train_victim, VictimTraining};
use voxshield_core::volume::{LabelMap, ProtectedVolume, Volume};

use crate::Outcome;

const SEEDS: [u64; 3] = [1, 2, 3];
const PSNR_FLOOR_DB: f64 = 36.08;
const PSNR_TOL_DB: f64 = 0.01;
const BUDGET_TOL: f64 = 1e-7;
const CLEAN_DSC_MIN: f64 = 0.85;
const EFFICACY_RATIO: f64 = 0.5;
const ABLATION_GAP: f64 = 0.03;
const TRANSFER_DROP: f64 = 0.20;
const SEED_MINUTES: f64 = 30.0;

/// Mean foreground DSC on the clean test split, one entry per victim arch.
#[derive(Debug, Default, Clone, Copy)]
struct ArchDsc([f64; 3]);

struct SeedResult {
    seed: u64,
    clean: ArchDsc,
    full: ArchDsc,
    no_spd: f64,
    no_isc: f64,
    em: f64,
    /// Wall time of the clean-vs-protected comparison alone.
    core_minutes: f64,
    min_psnr: f64,
    max_deviation: f64,
}

type Pairs = Vec<(Volume, LabelMap)>;

fn pick(data: &[(Volume, LabelMap)], idx: &[usize]) -> Pairs {
    idx.iter().map(|&i| data[i].clone()).collect()
}

fn as_training(released: &[(ProtectedVolume, LabelMap)]) -> Pairs {
    released.iter().map(|(p, y)| (p.to_volume(), y.clone())).collect()
}

fn victim_dsc(train: &[(Volume, LabelMap)], test: &[(Volume, LabelMap)], arch: VictimArch, seed: u64) -> f64 {
    let trained = train_victim(train, &victim_spec(arch, seed), &VictimTraining::default()).expect("victim trains");
    let (dsc, _) = score(&trained.net, test).expect("victim scores");
    dsc[1..].iter().sum::<f64>() / (dsc.len() - 1) as f64
}

fn budget_stats(clean: &[(Volume, LabelMap)], released: &[(ProtectedVolume, LabelMap)]) -> (f64, f64) {
    let mut min_psnr = f64::INFINITY;
    let mut max_dev = 0.0f64;
    for ((x, _), (p, _)) in clean.iter().zip(released) {
        min_psnr = min_psnr.min(psnr(x, &p.to_volume()).expect("same shape"));
        for (a, b) in x.data().iter().zip(p.data()) {
            max_dev = max_dev.max((*a as f64 - *b as f64).abs());
        }
    }
    (min_psnr, max_dev)
}

fn arch_index(arch: VictimArch) -> usize {
    VictimArch::ALL.iter().position(|a| *a == arch).expect("known arch")
}

fn run_seed(seed: u64) -> SeedResult {
    let stage = |what: &str| eprintln!("  seed {seed}: {what}");
    let data = generate_dataset(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })
    .expect("synthetic data");
    let split = Split::by_index(data.len());
    let train = pick(&data, &split.train);
    let test = pick(&data, &split.test);
    let small = VictimArch::UnetSmall;

    let started = Instant::now();
    let cfg = ProtectorConfig {
        seed,
        ..ProtectorConfig::default()
    };
    stage("surrogate pretraining");
    let (surrogate, _) = pretrain_surrogate(&train, &cfg).expect("surrogate pretrains");
    stage("generator (full objective)");
    let full_gen = train_generator(&train, surrogate.clone(), &cfg, None).expect("generator trains");
    let full = protect_dataset(&train, &full_gen.generator, &cfg).expect("protection");
    let full_train = as_training(&full);
    let mut clean = ArchDsc::default();
    let mut prot = ArchDsc::default();
    stage("clean and protected unet_small victims");
    clean.0[0] = victim_dsc(&train, &test, small, seed);
    prot.0[0] = victim_dsc(&full_train, &test, small, seed);
    let core_minutes = started.elapsed().as_secs_f64() / 60.0;

    for arch in [VictimArch::UnetWide, VictimArch::UnetDeep] {
        stage(&format!("{} victims", arch.tag()));
        let i = arch_index(arch);
        clean.0[i] = victim_dsc(&train, &test, arch, seed);
        prot.0[i] = victim_dsc(&full_train, &test, arch, seed);
    }

    let mut released = vec![full];
    let mut ablation = |lambda_spd: Option<f64>, lambda_isc: Option<f64>, name: &str| -> f64 {
        stage(&format!("generator ({name})"));
        let mut c = cfg;
        c.weights.lambda_spd = lambda_spd.unwrap_or(c.weights.lambda_spd);
        c.weights.lambda_isc = lambda_isc.unwrap_or(c.weights.lambda_isc);
        let run = train_generator(&train, surrogate.clone(), &c, None).expect("ablated generator trains");
        let out = protect_dataset(&train, &run.generator, &c).expect("protection");
        let dsc = victim_dsc(&as_training(&out), &test, small, seed);
        released.push(out);
        dsc
    };
    let no_spd = ablation(Some(0.0), None, "without spd");
    let no_isc = ablation(None, Some(0.0), "without isc");

    stage("error-minimizing baseline");
    let em_out = em_baseline(
        &train,
        &EmConfig {
            seed,
            ..EmConfig::default()
        },
    )
    .expect("EM baseline");
    let em = victim_dsc(&as_training(&em_out), &test, small, seed);
    released.push(em_out);

    let (mut min_psnr, mut max_deviation) = (f64::INFINITY, 0.0f64);
    for r in &released {
        let (p, d) = budget_stats(&train, r);
        min_psnr = min_psnr.min(p);
        max_deviation = max_deviation.max(d);
    }
    let result = SeedResult {
        seed,
        clean,
        full: prot,
        no_spd,
        no_isc,
        em,
        core_minutes,
        min_psnr,
        max_deviation,
    };
    eprintln!(
        "  seed {seed}: clean {:?} protected {:?} no_spd {:.4} no_isc {:.4} em {:.4} ({:.1} min core, {:.1} min total)",
        result.clean.0,
        result.full.0,
        no_spd,
        no_isc,
        em,
        core_minutes,
        started.elapsed().as_secs_f64() / 60.0
    );
    result
}

fn fmt_seeds(results: &[SeedResult], f: impl Fn(&SeedResult) -> String) -> String {
    results
        .iter()
        .map(|r| format!("seed {}: {}", r.seed, f(r)))
        .collect::<Vec<_>>()
        .join("; ")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const TINY: &str = r#"
seed = 5
output_dir = "OUT"

[synth]
num_volumes = 5
shape = [16, 16, 16]

[protector]
epochs = 2
pretrain_epochs = 1

[protector.generator]
base_width = 4
depth = 2

[[victims]]
arch = "unet_small"
epochs = 2
"#;

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_voxshield"))
        .args(args)
        .env_remove("VOXSHIELD_OUTPUT_DIR")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs the whole CLI pipeline in a fresh directory; returns the released
/// dataset files and the evaluation CSV.
fn cli_pipeline(root: &Path) -> (Vec<(PathBuf, Vec<u8>)>, String) {
    let out = root.join("out");
    let cfg = root.join("exp.toml");
    fs::write(&cfg, TINY.replace("OUT", s(&out))).unwrap();
    let c = s(&cfg);
    cli(&["generate-data", "--config", c]);
    cli(&["protect", "--config", c, "--method", "voxshield"]);
    for ds in ["clean", "protected/voxshield"] {
        cli(&["train-victim", "--config", c, "--dataset", s(&out.join(ds)), "--victim", "unet_small"]);
    }
    let csv = out.join("results.csv");
    cli(&["evaluate", "--config", c, "--csv", s(&csv)]);
    let released = files_under(&out.join("protected/voxshield"))
        .into_iter()
        .filter(|(p, _)| p.starts_with("data") || p == Path::new("manifest.json"))
        .collect();
    (released, fs::read_to_string(csv).unwrap())
}

/// Whether two CLI runs of one config agree byte for byte, and how many
/// released files were compared.
fn repeat_cli_pipeline() -> (bool, usize) {
    let root = tempfile::tempdir().unwrap();
    let (data_a, csv_a) = cli_pipeline(root.path());
    fs::remove_dir_all(root.path().join("out")).unwrap();
    let (data_b, csv_b) = cli_pipeline(root.path());
    (data_a == data_b && csv_a == csv_b && !data_a.is_empty(), data_a.len())
}

fn determinism(results: &[SeedResult], (identical, files): (bool, usize)) -> Outcome {
    let max_dev = results.iter().map(|r| r.max_deviation).fold(0.0, f64::max);
    let bound = DEFAULT_EPSILON as f64 + BUDGET_TOL;
    Outcome::new(
        identical && max_dev <= bound,
        format!(
            "max |x_p - x| {max_dev:.9} (bound {bound:.9}); repeated CLI pipeline bit-identical: {identical} \
             ({files} released files)"
        ),
    )
}

pub fn run_all() -> Vec<(u32, &'static str, Outcome)> {
    eprintln!("repeated CLI pipeline");
    let repeat = repeat_cli_pipeline();
    let results: Vec<SeedResult> = SEEDS
        .iter()
        .map(|&seed| {
            eprintln!("end-to-end run for seed {seed}");
            run_seed(seed)
        })
        .collect();

    let min_psnr = results.iter().map(|r| r.min_psnr).fold(f64::INFINITY, f64::min);
    let c1 = Outcome::new(
        min_psnr >= PSNR_FLOOR_DB - PSNR_TOL_DB,
        format!("lowest PSNR over every released volume {min_psnr:.3} dB (floor {PSNR_FLOOR_DB} dB)"),
    );

    let c2 = Outcome::new(
        results.iter().all(|r| {
            r.clean.0[0] >= CLEAN_DSC_MIN && r.full.0[0] <= EFFICACY_RATIO * r.clean.0[0] && r.core_minutes <= SEED_MINUTES
        }),
        fmt_seeds(&results, |r| {
            format!("clean {:.4}, protected {:.4}, {:.1} min", r.clean.0[0], r.full.0[0], r.core_minutes)
        }),
    );

    let c3 = Outcome::new(
        results
            .iter()
            .all(|r| r.no_spd - r.full.0[0] >= ABLATION_GAP && r.no_isc - r.full.0[0] >= ABLATION_GAP),
        fmt_seeds(&results, |r| {
            format!("full {:.4}, w/o spd {:.4}, w/o isc {:.4}", r.full.0[0], r.no_spd, r.no_isc)
        }),
    );

    let c4 = Outcome::new(
        results.iter().all(|r| r.full.0[0] < r.em && r.em < r.clean.0[0]),
        fmt_seeds(&results, |r| {
            format!("voxshield {:.4}, em {:.4}, clean {:.4}", r.full.0[0], r.em, r.clean.0[0])
        }),
    );

    let c5 = Outcome::new(
        results
            .iter()
            .all(|r| (0..3).all(|i| r.clean.0[i] - r.full.0[i] >= TRANSFER_DROP)),
        fmt_seeds(&results, |r| {
            let drops: Vec<String> = VictimArch::ALL
                .iter()
                .enumerate()
                .map(|(i, a)| format!("{} {:+.4}", a.tag(), r.full.0[i] - r.clean.0[i]))
                .collect();
            drops.join(", ")
        }),
    );

    let c9 = determinism(&results, repeat);
    vec![
        (1, "PSNR floor", c1),
        (2, "protection efficacy", c2),
        (3, "ablation ordering", c3),
        (4, "baseline ordering", c4),
        (5, "transferability", c5),
        (9, "budget and determinism", c9),
    ]
}
