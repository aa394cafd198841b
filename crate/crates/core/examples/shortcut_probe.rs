//! Trains a unet_small victim on training data carrying a fixed, hand-built
//! perturbation inside the 4/255 budget: `contrast` lowers foreground and
//! raises background, `checker` adds a class-keyed checkerboard.
use voxshield_core::networks::{VictimArch, VictimSpec};
use voxshield_core::protector::DEFAULT_EPSILON;
use voxshield_core::synth::{generate_dataset, Split, SynthSpec};
use voxshield_core::victim::{evaluate_victim, train_victim, VictimTraining};
use voxshield_core::volume::Volume;

fn main() {
    let mode = std::env::args().nth(1).unwrap();
    let data = generate_dataset(&SynthSpec { seed: 0, ..Default::default() }).unwrap();
    let split = Split::by_index(data.len());
    let train: Vec<_> = split.train.iter().map(|&i| data[i].clone()).collect();
    let test: Vec<_> = split.test.iter().map(|&i| data[i].clone()).collect();
    let e = DEFAULT_EPSILON;
    let pert: Vec<_> = train
        .iter()
        .map(|(x, y)| {
            let s = x.shape();
            let d: Vec<f32> = (0..x.data().len())
                .map(|i| {
                    let (z, r) = (i / (s.height * s.width), i % (s.height * s.width));
                    let (yy, xx) = (r / s.width, r % s.width);
                    let fg = y.classes()[i] > 0;
                    let checker = if (z + yy + xx) % 2 == 0 { 1.0 } else { -1.0 };
                    let v = match mode.as_str() {
                        "contrast" => if fg { -e } else { e },
                        "checker" => if fg { e * checker } else { -e * checker },
                        _ => 0.0,
                    };
                    (x.data()[i] + v).clamp(0.0, 1.0)
                })
                .collect();
            (Volume::with_spacing(x.id(), s, x.spacing(), d).unwrap(), y.clone())
        })
        .collect();
    let ids: Vec<String> = train.iter().map(|(v, _)| v.id().to_string()).collect();
    let spec = VictimSpec::preset(VictimArch::UnetSmall, 5);
    let r = evaluate_victim(&train_victim(&pert, &spec, &VictimTraining::default()).unwrap(), &mode, ids, &test).unwrap();
    println!("{mode}: dsc {:.4} final loss {:.4}", r.mean_dsc, r.loss_curve.last().unwrap());
}
