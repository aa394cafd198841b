//! Ad-hoc protection experiment: `protect_trial key=value ...`.
use std::collections::HashMap;
use std::time::Instant;

use voxshield_core::metrics;
use voxshield_core::networks::{VictimArch, VictimSpec};
use voxshield_core::protector::{derive_roi_mask, protect_dataset, train_protector, MaskMode, ProtectorConfig};
use voxshield_core::synth::{generate_dataset, Split, SynthSpec};
use voxshield_core::victim::{evaluate_victim, train_victim, VictimTraining};

fn main() {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map(|v| v.parse::<f64>().unwrap()).unwrap_or(d);
    let seed = get("seed", 0.0) as u64;
    let data = generate_dataset(&SynthSpec { seed, ..Default::default() }).unwrap();
    let split = Split::by_index(data.len());
    let train: Vec<_> = split.train.iter().map(|&i| data[i].clone()).collect();
    let test: Vec<_> = split.test.iter().map(|&i| data[i].clone()).collect();
    let mut cfg = ProtectorConfig {
        epochs: get("epochs", 10.0) as usize,
        pretrain_epochs: get("pretrain", 10.0) as usize,
        alternate_every: get("alt", 1.0) as usize,
        generator_lr: get("glr", 1e-4) as f32,
        surrogate_lr: get("slr", 1e-4) as f32,
        seed,
        ..Default::default()
    };
    if get("allones", 0.0) > 0.0 {
        cfg.mask_mode = MaskMode::AllOnes;
    }
    cfg.generator.head_init_scale = get("head", 1.0) as f32;
    cfg.weights.lambda_spd = get("lspd", 0.05);
    cfg.weights.lambda_isc = get("lisc", 0.2);
    cfg.weights.spd_mean_reduction = get("mean", 0.0) > 0.0;
    let t = Instant::now();
    let run = train_protector(&train, &cfg, None).unwrap();
    println!("protector {:.1}s pretrain last {:?}", t.elapsed().as_secs_f64(), run.pretrain_curve.last());
    for e in &run.log {
        println!("  ep {} seg {:.4} spd {:.4} isc {:.4} total {:.4} sur {:?}", e.epoch, e.seg, e.spd, e.isc, e.total, e.surrogate_seg);
    }
    let prot = protect_dataset(&train, &run.generator, &cfg).unwrap();
    let (mut psnr_min, mut sat, mut masked, mut fg_sum, mut fg_n, mut band_sum, mut band_n) = (f64::MAX, 0usize, 0usize, 0.0, 0usize, 0.0, 0usize);
    for ((p, y), (x, _)) in prot.iter().zip(&train) {
        psnr_min = psnr_min.min(metrics::psnr(x, &p.to_volume()).unwrap());
        let m = derive_roi_mask(y, cfg.mask_dilation_radius, cfg.mask_mode);
        for i in 0..x.data().len() {
            let d = p.data()[i] - x.data()[i];
            if m.values()[i] == 1 {
                masked += 1;
                if d.abs() >= cfg.epsilon * 0.99 {
                    sat += 1;
                }
                if y.classes()[i] > 0 {
                    fg_sum += d as f64;
                    fg_n += 1;
                } else {
                    band_sum += d as f64;
                    band_n += 1;
                }
            }
        }
    }
    let total: usize = train.iter().map(|(x, _)| x.data().len()).sum();
    println!(
        "psnr min {psnr_min:.2} mask frac {:.3} saturated {:.3} mean delta fg {:.5} band {:.5}",
        masked as f64 / total as f64,
        sat as f64 / masked.max(1) as f64,
        fg_sum / fg_n.max(1) as f64,
        band_sum / band_n.max(1) as f64
    );
    let ptrain: Vec<_> = prot.iter().map(|(p, y)| (p.to_volume(), y.clone())).collect();
    let ids: Vec<String> = train.iter().map(|(v, _)| v.id().to_string()).collect();
    let vt = VictimTraining { epochs: get("vepochs", 60.0) as usize, lr: 1e-4 };
    let spec = VictimSpec::preset(VictimArch::UnetSmall, 5 + seed);
    let t = Instant::now();
    if get("clean", 1.0) > 0.0 {
        let c = evaluate_victim(&train_victim(&train, &spec, &vt).unwrap(), "clean", ids.clone(), &test).unwrap();
        println!("clean victim dsc {:.3} final loss {:.4}", c.mean_dsc, c.loss_curve.last().unwrap());
    }
    let p = evaluate_victim(&train_victim(&ptrain, &spec, &vt).unwrap(), "voxshield", ids, &test).unwrap();
    println!("protected victim dsc {:.3} final loss {:.4} ({:.1}s)", p.mean_dsc, p.loss_curve.last().unwrap(), t.elapsed().as_secs_f64());
}
