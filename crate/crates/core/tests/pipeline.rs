use voxshield_core::io::{load_dataset, save_clean, save_protected, StoredVolume};
use voxshield_core::metrics::{psnr, PSNR_CAP_DB};
use voxshield_core::networks::{GeneratorSpec, VictimArch, VictimSpec};
use voxshield_core::protector::{
    derive_roi_mask, em_baseline, passthrough_dataset, protect_dataset, train_protector, EmConfig, ProtectorConfig,
};
use voxshield_core::synth::{generate_dataset, Split, SynthSpec};
use voxshield_core::victim::{evaluate_victim, train_victim, VictimTraining};
use voxshield_core::volume::{LabelMap, Volume};

fn tiny_data(seed: u64) -> Vec<(Volume, LabelMap)> {
    generate_dataset(&SynthSpec {
        num_volumes: 5,
        shape: [16, 16, 16],
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn tiny_protector(seed: u64) -> ProtectorConfig {
    ProtectorConfig {
        epochs: 2,
        pretrain_epochs: 1,
        generator: GeneratorSpec {
            base_width: 4,
            depth: 2,
            ..GeneratorSpec::default()
        },
        seed,
        ..ProtectorConfig::default()
    }
}

fn budget_holds(clean: &[(Volume, LabelMap)], released: &[(voxshield_core::volume::ProtectedVolume, LabelMap)], eps: f32) {
    for ((x, _), (p, _)) in clean.iter().zip(released) {
        for (a, b) in x.data().iter().zip(p.data()) {
            assert!((a - b).abs() <= eps + 1e-7);
            assert!((0.0..=1.0).contains(b));
        }
        assert!(psnr(x, &p.to_volume()).unwrap() >= 36.08);
    }
}

#[test]
fn protection_stays_in_budget_inside_the_roi_and_round_trips_through_disk() {
    let data = tiny_data(4);
    let split = Split::by_index(data.len());
    let train: Vec<_> = split.train.iter().map(|&i| data[i].clone()).collect();
    let cfg = tiny_protector(4);
    let run = train_protector(&train, &cfg, None).unwrap();
    assert_eq!(run.log.len(), cfg.epochs);
    assert_eq!(run.pretrain_curve.len(), cfg.pretrain_epochs);
    let released = protect_dataset(&train, &run.generator, &cfg).unwrap();
    budget_holds(&train, &released, cfg.epsilon);

    for ((x, y), (p, _)) in train.iter().zip(&released) {
        let mask = derive_roi_mask(y, cfg.mask_dilation_radius, cfg.mask_mode);
        for ((a, b), m) in x.data().iter().zip(p.data()).zip(mask.values()) {
            if *m == 0 {
                assert_eq!(a, b, "voxel outside the ROI was changed");
            }
        }
    }

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("protected");
    save_protected(&dir, &released, "cfg").unwrap();
    let loaded = load_dataset(&dir).unwrap();
    assert_eq!(loaded.ids(), train.iter().map(|(v, _)| v.id().to_string()).collect::<Vec<_>>());
    for ((stored, y), (p, y0)) in loaded.entries.iter().zip(&released) {
        let StoredVolume::Protected(q) = stored else {
            panic!("expected a protected entry")
        };
        assert_eq!(q.data(), p.data());
        assert_eq!(q.generator_fingerprint(), Some(run.generator.fingerprint().as_str()));
        assert_eq!(y, y0);
    }
}

#[test]
fn identical_seeds_release_identical_bytes() {
    let data = tiny_data(8);
    let release = || {
        let cfg = tiny_protector(8);
        let run = train_protector(&data, &cfg, None).unwrap();
        protect_dataset(&data, &run.generator, &cfg).unwrap()
    };
    let a = release();
    let b = release();
    for ((p, _), (q, _)) in a.iter().zip(&b) {
        assert_eq!(p.data(), q.data());
    }
}

#[test]
fn em_baseline_and_passthrough_respect_the_budget() {
    let data = tiny_data(2);
    let em = em_baseline(
        &data,
        &EmConfig {
            rounds: 1,
            steps: 2,
            seed: 2,
            ..EmConfig::default()
        },
    )
    .unwrap();
    budget_holds(&data, &em, EmConfig::default().epsilon);
    assert!(em.iter().zip(&data).any(|((p, _), (x, _))| p.data() != x.data()));

    let same = passthrough_dataset(&data).unwrap();
    for ((p, _), (x, _)) in same.iter().zip(&data) {
        assert_eq!(psnr(x, &p.to_volume()).unwrap(), PSNR_CAP_DB);
    }
}

#[test]
fn victim_reports_are_scored_on_unseen_clean_volumes() {
    let data = tiny_data(6);
    let split = Split::by_index(data.len());
    let train: Vec<_> = split.train.iter().map(|&i| data[i].clone()).collect();
    let test: Vec<_> = split.test.iter().map(|&i| data[i].clone()).collect();
    let spec = VictimSpec::preset(VictimArch::UnetSmall, 1);
    let victim = train_victim(&train, &spec, &VictimTraining { epochs: 2, ..Default::default() }).unwrap();
    let ids: Vec<String> = train.iter().map(|(v, _)| v.id().to_string()).collect();
    let report = evaluate_victim(&victim, "clean", ids.clone(), &test).unwrap();
    assert_eq!(report.loss_curve.len(), 2);
    assert!((0.0..=1.0).contains(&report.mean_dsc));
    assert_eq!(report.per_class_dsc.len(), 2);

    let leaked = evaluate_victim(&victim, "clean", ids, &train);
    assert!(leaked.is_err(), "training volumes must not be accepted as test data");

    let tmp = tempfile::tempdir().unwrap();
    save_clean(&tmp.path().join("clean"), &train, "cfg").unwrap();
    assert_eq!(load_dataset(&tmp.path().join("clean")).unwrap().pairs(), train);
}
