use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxshield_core::losses::{seg_loss, seg_loss_with_grad, spd_loss, spd_loss_with_grad, LossWeights};
use voxshield_core::metrics::{dsc, hd95, psnr};
use voxshield_core::spectral::{amplitude_spectrum, isc_loss_raw, isc_loss_with_grad};
use voxshield_core::volume::{Dims3, LabelMap, LogitVolume, Volume, VolumeShape};

use crate::Outcome;

const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-3;
const FD_CASES: usize = 20;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn spectral_invariants() -> Outcome {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut worst_shift = 0.0f64;
    let mut worst_scale = 0.0f64;
    let mut identical_ok = true;
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let slice: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (dy, dx) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let mut shifted = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                shifted[((y + dy) % h) * w + (x + dx) % w] = slice[y * w + x];
            }
        }
        let a = amplitude_spectrum(&slice, h, w).unwrap().amplitude;
        let b = amplitude_spectrum(&shifted, h, w).unwrap().amplitude;
        let num = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let den = a.iter().map(|p| p * p).sum::<f64>().sqrt();
        worst_shift = worst_shift.max(num / den);

        let d = rng.gen_range(2..6);
        let shape = VolumeShape::new(1, d, h, w);
        let delta: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let c: f64 = rng.gen_range(-5.0..5.0);
        let base = isc_loss_raw(&delta, shape).unwrap();
        let scaled: Vec<f64> = delta.iter().map(|v| c * v).collect();
        worst_scale = worst_scale.max(rel(isc_loss_raw(&scaled, shape).unwrap(), c.abs() * base));

        let same: Vec<f64> = (0..d).flat_map(|_| slice.iter().copied()).collect();
        identical_ok &= isc_loss_raw(&same, shape).unwrap() == 0.0;
    }
    let mut impulse = vec![0.0; 8];
    impulse[4] = 0.01;
    let impulse_loss = isc_loss_raw(&impulse, VolumeShape::new(1, 2, 2, 2)).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let pass = worst_shift <= 1e-6
        && identical_ok
        && (impulse_loss + 0.02).abs() <= 1e-9
        && worst_scale <= 1e-9
        && elapsed < 1.0;
    Outcome::new(
        pass,
        format!(
            "shift rel {worst_shift:.2e}, identical slices zero: {identical_ok}, impulse {impulse_loss:.12}, \
             scaling rel {worst_scale:.2e}, {elapsed:.3}s"
        ),
    )
}

/// Worst-case norm-wise relative error between an analytic gradient and
/// central differences of `f`.
fn fd_error(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect();
    let diff = numeric.iter().zip(grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = numeric
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(grad.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// The modulus is not differentiable at zero; a spectral bin within a few
/// steps of zero would make the finite-difference oracle itself wrong.
fn away_from_zero_amplitude(delta: &[f64], shape: VolumeShape) -> bool {
    let plane = shape.height * shape.width;
    delta.chunks(plane).all(|s| {
        amplitude_spectrum(s, shape.height, shape.width)
            .unwrap()
            .amplitude
            .iter()
            .all(|a| *a > 100.0 * FD_STEP)
    })
}

fn random_dims(rng: &mut ChaCha8Rng) -> Dims3 {
    Dims3::new(rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(2..5))
}

pub fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut isc_worst, mut spd_worst, mut seg_worst) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..FD_CASES {
        let dims = random_dims(&mut rng);
        let shape = VolumeShape::new(rng.gen_range(1..3), dims.d, dims.h, dims.w);
        let delta = loop {
            let d: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-0.05..0.05)).collect();
            if away_from_zero_amplitude(&d, shape) {
                break d;
            }
        };
        let (_, g) = isc_loss_with_grad(&delta, shape).unwrap();
        isc_worst = isc_worst.max(fd_error(&delta, &g, |d| isc_loss_raw(d, shape).unwrap()));
    }
    for _ in 0..FD_CASES {
        let dims = random_dims(&mut rng);
        let k = rng.gen_range(2..4);
        let n = dims.voxels() * k;
        let clean: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // Keep every entry well away from the kink of |.| relative to the step.
        let pert: Vec<f64> = clean
            .iter()
            .map(|c| {
                let m: f64 = rng.gen_range(0.01..0.5);
                if rng.gen_bool(0.5) {
                    c + m
                } else {
                    c - m
                }
            })
            .collect();
        let mean = rng.gen_bool(0.5);
        let cl = LogitVolume::new(dims, k, clean).unwrap();
        let pv = LogitVolume::new(dims, k, pert.clone()).unwrap();
        let (_, g) = spd_loss_with_grad(&cl, &pv, mean).unwrap();
        spd_worst = spd_worst.max(fd_error(&pert, &g, |p| {
            spd_loss(&cl, &LogitVolume::new(dims, k, p.to_vec()).unwrap(), mean).unwrap()
        }));
    }
    for _ in 0..FD_CASES {
        let dims = random_dims(&mut rng);
        let k = rng.gen_range(2..4);
        let labels: Vec<u8> = (0..dims.voxels()).map(|_| rng.gen_range(0..k as u8)).collect();
        let label = LabelMap::new(dims, k, labels).unwrap();
        let logits: Vec<f64> = (0..dims.voxels() * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w = LossWeights {
            dice_weight: rng.gen_range(0.2..2.0),
            ce_weight: rng.gen_range(0.2..2.0),
            ..LossWeights::default()
        };
        let lv = LogitVolume::new(dims, k, logits.clone()).unwrap();
        let (_, g) = seg_loss_with_grad(&lv, &label, &w).unwrap();
        seg_worst = seg_worst.max(fd_error(&logits, &g, |l| {
            seg_loss(&LogitVolume::new(dims, k, l.to_vec()).unwrap(), &label, &w).unwrap()
        }));
    }
    Outcome::new(
        isc_worst <= FD_REL_TOL && spd_worst <= FD_REL_TOL && seg_worst <= FD_REL_TOL,
        format!("worst relative error isc {isc_worst:.2e}, spd {spd_worst:.2e}, seg {seg_worst:.2e} over {FD_CASES} inputs each"),
    )
}

fn brute_dsc(p: &[bool], g: &[bool]) -> f64 {
    let inter = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
    let total = p.iter().filter(|a| **a).count() + g.iter().filter(|a| **a).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn coords(i: usize) -> [f64; 3] {
    [(i / 4) as f64, ((i / 2) % 2) as f64, (i % 2) as f64]
}

/// Linear-interpolated percentile over sorted values.
fn brute_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// On a 2x2x2 grid every foreground voxel touches the grid border, so the
/// boundary of a mask is the mask itself.
fn brute_hd95(p: &[bool], g: &[bool], spacing: [f32; 3]) -> f64 {
    let pts = |m: &[bool]| -> Vec<[f64; 3]> {
        (0..8)
            .filter(|&i| m[i])
            .map(|i| {
                let c = coords(i);
                [c[0] * spacing[0] as f64, c[1] * spacing[1] as f64, c[2] * spacing[2] as f64]
            })
            .collect()
    };
    let (a, b) = (pts(p), pts(g));
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => {
            return spacing.iter().map(|s| (*s as f64).powi(2)).sum::<f64>().sqrt();
        }
        _ => {}
    }
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> Vec<f64> {
        from.iter()
            .map(|u| {
                to.iter()
                    .map(|v| (0..3).map(|k| (u[k] - v[k]).powi(2)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    brute_percentile(directed(&a, &b), 0.95).max(brute_percentile(directed(&b, &a), 0.95))
}

pub fn metric_oracles() -> Outcome {
    let dims = Dims3::new(2, 2, 2);
    let mask = |bits: u32| -> Vec<bool> { (0..8).map(|i| bits >> i & 1 == 1).collect() };
    let mut mismatches = 0usize;
    let mut pairs = 0usize;
    for spacing in [[1.0f32, 1.0, 1.0], [1.5, 1.0, 0.5]] {
        for pb in 0..256u32 {
            let p = mask(pb);
            for gb in 0..256u32 {
                let g = mask(gb);
                pairs += 1;
                if dsc(&p, &g).unwrap() != brute_dsc(&p, &g) || hd95(&p, &g, dims, spacing).unwrap() != brute_hd95(&p, &g, spacing)
                {
                    mismatches += 1;
                }
            }
        }
    }

    let shape = VolumeShape::new(1, 4, 4, 4);
    let base = Volume::new("base", shape, vec![0.5; shape.len()]).unwrap();
    let mut worst_db = 0.0f64;
    for offset in [4.0f64 / 255.0, 0.1, 0.25] {
        let moved = Volume::new("moved", shape, vec![0.5 + offset as f32; shape.len()]).unwrap();
        let expected = -20.0 * offset.log10();
        worst_db = worst_db.max((psnr(&base, &moved).unwrap() - expected).abs());
    }
    Outcome::new(
        mismatches == 0 && worst_db <= 1e-3,
        format!("{mismatches} of {pairs} mask pairs disagree with brute force; worst PSNR offset error {worst_db:.2e} dB"),
    )
}
