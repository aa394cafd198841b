use std::time::Instant;

use voxshield_core::networks::{VictimArch, VictimSpec};
use voxshield_core::synth::{generate_dataset, Split, SynthSpec};
use voxshield_core::victim::{evaluate_victim, train_victim, VictimTraining};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr: f32 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let data = generate_dataset(&SynthSpec::default()).unwrap();
    let split = Split::by_index(data.len());
    let train: Vec<_> = split.train.iter().map(|&i| data[i].clone()).collect();
    let test: Vec<_> = split.test.iter().map(|&i| data[i].clone()).collect();
    for arch in VictimArch::ALL {
        let t = Instant::now();
        let v = train_victim(&train, &VictimSpec::preset(arch, 0), &VictimTraining { epochs, lr }).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let ids = train.iter().map(|(v, _)| v.id().to_string()).collect();
        let r = evaluate_victim(&v, "clean", ids, &test).unwrap();
        println!("{} {secs:.1}s dsc {:.3} hd95 {:.2} loss {:?}", arch.tag(), r.mean_dsc, r.mean_hd95, r.loss_curve);
    }
}
