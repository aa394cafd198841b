//! Noise generator training against a segmentation surrogate, the
//! error-minimizing baseline, and export of protected datasets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxshield_tensor::{Adam, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{build_generator, build_segmenter, GeneratorSpec, UNet, VictimArch, VictimSpec};
use crate::objective;
use crate::victim::{self, DEFAULT_LR};
use crate::volume::{LabelMap, LogitVolume, PerturbationField, ProtectedVolume, RoiMask, Volume};

pub const DEFAULT_EPSILON: f32 = 4.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    ForegroundDilated,
    AllOnes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtectorConfig {
    pub epsilon: f32,
    pub epochs: usize,
    pub generator_lr: f32,
    pub surrogate_lr: f32,
    pub weights: LossWeights,
    pub mask_dilation_radius: usize,
    pub mask_mode: MaskMode,
    pub pretrain_epochs: usize,
    /// Run one surrogate epoch on perturbed data after every this many
    /// generator epochs; 0 keeps the surrogate frozen after pretraining.
    pub alternate_every: usize,
    /// Number of volumes whose generator gradients are averaged per step.
    pub accumulate: usize,
    pub surrogate: VictimArch,
    pub generator: GeneratorSpec,
    pub seed: u64,
}

impl Default for ProtectorConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            epochs: 40,
            generator_lr: DEFAULT_LR,
            surrogate_lr: DEFAULT_LR,
            weights: LossWeights::default(),
            mask_dilation_radius: 2,
            mask_mode: MaskMode::ForegroundDilated,
            pretrain_epochs: 20,
            alternate_every: 1,
            accumulate: 1,
            surrogate: VictimArch::UnetSmall,
            generator: GeneratorSpec::default(),
            seed: 0,
        }
    }
}

impl ProtectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("protector epochs must be at least 1".into()));
        }
        if self.accumulate == 0 {
            return Err(Error::Config("accumulate must be at least 1".into()));
        }
        if !(self.generator_lr > 0.0 && self.surrogate_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.weights.validate()
    }

    /// Surrogate network spec; its seed is derived from the protector seed.
    pub fn surrogate_spec(&self) -> VictimSpec {
        VictimSpec::preset(self.surrogate, self.seed.wrapping_mul(2).wrapping_add(0x51))
    }

    pub fn generator_spec(&self, channels: usize) -> GeneratorSpec {
        GeneratorSpec {
            channels,
            seed: self.generator.seed ^ self.seed.wrapping_mul(0x9e37_79b9),
            ..self.generator
        }
    }
}

/// Foreground union dilated by a Euclidean ball of radius `r` voxels, or the
/// full grid for [`MaskMode::AllOnes`].
pub fn derive_roi_mask(label: &LabelMap, r: usize, mode: MaskMode) -> RoiMask {
    let dims = label.dims();
    if mode == MaskMode::AllOnes {
        return RoiMask::ones(dims);
    }
    let (d, h, w) = (dims.d, dims.h, dims.w);
    let ri = r as isize;
    let mut ball = Vec::new();
    for dz in -ri..=ri {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if dz * dz + dy * dy + dx * dx <= ri * ri {
                    ball.push((dz, dy, dx));
                }
            }
        }
    }
    let mut out = vec![0u8; dims.voxels()];
    let classes = label.classes();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if classes[(z * h + y) * w + x] == 0 {
                    continue;
                }
                for &(dz, dy, dx) in &ball {
                    let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if zz >= 0 && yy >= 0 && xx >= 0 && (zz as usize) < d && (yy as usize) < h && (xx as usize) < w {
                        out[(zz as usize * h + yy as usize) * w + xx as usize] = 1;
                    }
                }
            }
        }
    }
    RoiMask::new(dims, out).expect("mask built on the label grid")
}

fn mask_tensor(mask: &RoiMask) -> Tensor {
    let d = mask.dims();
    Tensor::new(&[d.d, d.h, d.w], mask.as_f32())
}

fn check_mask(x: &Volume, mask: &RoiMask) -> Result<()> {
    if mask.dims() != x.shape().dims() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs volume {:?}",
            mask.dims(),
            x.shape().as_array()
        )));
    }
    Ok(())
}

/// `clamp(G(x) * M, -eps, eps)` with the mask broadcast over channels.
pub fn synthesize_delta(generator: &UNet, x: &Volume, mask: &RoiMask, epsilon: f32) -> Result<PerturbationField> {
    check_mask(x, mask)?;
    let raw = generator.infer(x.shape(), x.data())?;
    delta_from_raw(raw.data(), x, mask, epsilon)
}

/// Applies the mask and budget to an arbitrary raw generator output.
pub fn delta_from_raw(raw: &[f32], x: &Volume, mask: &RoiMask, epsilon: f32) -> Result<PerturbationField> {
    check_mask(x, mask)?;
    if raw.len() != x.shape().len() {
        return Err(Error::ShapeMismatch("raw generator output vs volume".into()));
    }
    let m = mask.values();
    let n = m.len();
    let delta = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| (v * m[i % n] as f32).clamp(-epsilon, epsilon))
        .collect();
    PerturbationField::new(x.shape(), epsilon, delta)
}

/// Per-epoch means of the generator objective terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub seg: f64,
    pub spd: f64,
    pub isc: f64,
    pub total: f64,
    /// Mean surrogate loss of the alternating epoch, if one ran.
    pub surrogate_seg: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ProtectorRun {
    pub generator: UNet,
    pub surrogate: UNet,
    pub pretrain_curve: Vec<f64>,
    pub log: Vec<EpochLog>,
}

fn divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NotANumber(what) => Error::Divergence {
            epoch,
            what: what.into(),
        },
        other => other,
    }
}

/// Phase A: surrogate trained on clean data. Returns the network and its loss curve.
pub fn pretrain_surrogate(data: &[(Volume, LabelMap)], cfg: &ProtectorConfig) -> Result<(UNet, Vec<f64>)> {
    cfg.validate()?;
    let (first, label) = data
        .first()
        .ok_or_else(|| Error::Precondition("protector dataset is empty".into()))?;
    let spec = cfg.surrogate_spec();
    let mut net = build_segmenter(&spec.segmenter(first.shape().channels, label.num_classes()))?;
    net.spec().check_input(first.shape())?;
    let mut adam = Adam::new(cfg.surrogate_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa11c_e5ed);
    let w = LossWeights {
        lambda_spd: 0.0,
        lambda_isc: 0.0,
        ..cfg.weights
    };
    let mut curve = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let loss = victim::train_epoch(&mut net, &mut adam, data, &mut rng, &w).map_err(divergence(epoch))?;
        log::debug!("surrogate pretrain epoch {epoch}: {loss:.5}");
        curve.push(loss);
    }
    Ok((net, curve))
}

struct StepTerms {
    seg: f64,
    spd: f64,
    isc: f64,
    total: f64,
    grads: Vec<Option<Tensor>>,
}

fn generator_step(
    generator: &UNet,
    surrogate: &UNet,
    x: &Volume,
    y: &LabelMap,
    mask: &Tensor,
    clean: &LogitVolume,
    cfg: &ProtectorConfig,
) -> Result<StepTerms> {
    let w = &cfg.weights;
    let mut g = Graph::new();
    let input = g.constant(Tensor::new(&x.shape().as_array(), x.data().to_vec()));
    let gen = generator.forward(&mut g, input, true);
    let masked = g.mul_spatial_const(gen.output, mask);
    let delta = g.clamp(masked, -cfg.epsilon, cfg.epsilon);
    let shifted = g.add(input, delta);
    let xp = g.clamp(shifted, 0.0, 1.0);
    let sur = surrogate.forward(&mut g, xp, false);
    let (seg_v, seg) = objective::seg_node(&mut g, sur.output, y, w)?;
    let mut terms: Vec<(Var, f32)> = vec![(seg_v, 1.0)];
    let mut spd = 0.0;
    let mut isc = 0.0;
    if w.lambda_spd != 0.0 {
        let (v, value) = objective::spd_node(&mut g, sur.output, clean, y, w.spd_mean_reduction)?;
        terms.push((v, w.lambda_spd as f32));
        spd = value;
    }
    if w.lambda_isc != 0.0 {
        let (v, value) = objective::isc_node(&mut g, delta)?;
        terms.push((v, w.lambda_isc as f32));
        isc = value;
    }
    let total = seg + w.lambda_spd * spd + w.lambda_isc * isc;
    if !total.is_finite() {
        return Err(Error::NotANumber("generator objective"));
    }
    let loss = g.weighted_sum(&terms);
    let mut grads = g.backward(loss);
    let grads = gen.params.iter().map(|&p| grads.take(p)).collect();
    Ok(StepTerms {
        seg,
        spd,
        isc,
        total,
        grads,
    })
}

fn accumulate_into(acc: &mut Vec<Option<Tensor>>, grads: Vec<Option<Tensor>>) {
    if acc.is_empty() {
        *acc = grads;
        return;
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

fn perturbed_copy(generator: &UNet, x: &Volume, mask: &RoiMask, epsilon: f32) -> Result<Volume> {
    let delta = synthesize_delta(generator, x, mask, epsilon)?;
    Ok(ProtectedVolume::protect(x, &delta, None)?.to_volume())
}

fn clean_logits(surrogate: &UNet, data: &[(Volume, LabelMap)]) -> Result<Vec<LogitVolume>> {
    data.iter().map(|(x, _)| surrogate.predict(x)).collect()
}

pub fn masks_for(data: &[(Volume, LabelMap)], cfg: &ProtectorConfig) -> Vec<RoiMask> {
    data.iter()
        .map(|(_, y)| derive_roi_mask(y, cfg.mask_dilation_radius, cfg.mask_mode))
        .collect()
}

/// Phase B: generator updates against a surrogate that is frozen within each
/// generator epoch. The generator checkpoint at `checkpoint` (if given) is
/// rewritten after every completed epoch, so a divergence leaves the
/// last good parameters on disk.
pub fn train_generator(
    data: &[(Volume, LabelMap)],
    mut surrogate: UNet,
    cfg: &ProtectorConfig,
    checkpoint: Option<&Path>,
) -> Result<ProtectorRun> {
    cfg.validate()?;
    let (first, _) = data
        .first()
        .ok_or_else(|| Error::Precondition("protector dataset is empty".into()))?;
    let mut generator = build_generator(&cfg.generator_spec(first.shape().channels))?;
    generator.spec().check_input(first.shape())?;
    let masks = masks_for(data, cfg);
    let mask_tensors: Vec<Tensor> = masks.iter().map(mask_tensor).collect();
    let mut gen_adam = Adam::new(cfg.generator_lr);
    let mut sur_adam = Adam::new(cfg.surrogate_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e7e_4a70);
    let sur_weights = LossWeights {
        lambda_spd: 0.0,
        lambda_isc: 0.0,
        ..cfg.weights
    };
    let mut clean = clean_logits(&surrogate, data)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut seg, mut spd, mut isc, mut total) = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.accumulate) {
            let mut acc = Vec::new();
            for &i in batch {
                let t = generator_step(&generator, &surrogate, &data[i].0, &data[i].1, &mask_tensors[i], &clean[i], cfg)
                    .map_err(divergence(epoch))?;
                seg += t.seg;
                spd += t.spd;
                isc += t.isc;
                total += t.total;
                accumulate_into(&mut acc, t.grads);
            }
            if batch.len() > 1 {
                let s = 1.0 / batch.len() as f32;
                acc.iter_mut().flatten().for_each(|g| *g = g.scale(s));
            }
            gen_adam.step(generator.params_mut(), &acc);
        }
        if generator.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::Divergence {
                epoch,
                what: "generator parameters".into(),
            });
        }
        let n = data.len() as f64;
        let mut entry = EpochLog {
            epoch,
            seg: seg / n,
            spd: spd / n,
            isc: isc / n,
            total: total / n,
            surrogate_seg: None,
        };
        if cfg.alternate_every > 0 && (epoch + 1) % cfg.alternate_every == 0 {
            let perturbed: Vec<(Volume, LabelMap)> = data
                .iter()
                .zip(&masks)
                .map(|((x, y), m)| Ok((perturbed_copy(&generator, x, m, cfg.epsilon)?, y.clone())))
                .collect::<Result<_>>()?;
            let loss = victim::train_epoch(&mut surrogate, &mut sur_adam, &perturbed, &mut rng, &sur_weights)
                .map_err(divergence(epoch))?;
            entry.surrogate_seg = Some(loss);
            clean = clean_logits(&surrogate, data)?;
        }
        log::debug!(
            "generator epoch {epoch}: total {:.5} seg {:.5} spd {:.3} isc {:.5}",
            entry.total,
            entry.seg,
            entry.spd,
            entry.isc
        );
        log.push(entry);
        if let Some(path) = checkpoint {
            generator.save_checkpoint(path, gen_adam.steps_taken())?;
        }
    }
    Ok(ProtectorRun {
        generator,
        surrogate,
        pretrain_curve: Vec::new(),
        log,
    })
}

/// Both phases: clean surrogate pretraining, then generator training.
pub fn train_protector(
    data: &[(Volume, LabelMap)],
    cfg: &ProtectorConfig,
    checkpoint: Option<&Path>,
) -> Result<ProtectorRun> {
    let (surrogate, curve) = pretrain_surrogate(data, cfg)?;
    let mut run = train_generator(data, surrogate, cfg, checkpoint)?;
    run.pretrain_curve = curve;
    Ok(run)
}

/// Masked, budget-clamped release of every volume; labels are passed through.
pub fn protect_dataset(
    data: &[(Volume, LabelMap)],
    generator: &UNet,
    cfg: &ProtectorConfig,
) -> Result<Vec<(ProtectedVolume, LabelMap)>> {
    let fingerprint = generator.fingerprint();
    data.iter()
        .map(|(x, y)| {
            let mask = derive_roi_mask(y, cfg.mask_dilation_radius, cfg.mask_mode);
            let delta = synthesize_delta(generator, x, &mask, cfg.epsilon)?;
            Ok((ProtectedVolume::protect(x, &delta, Some(fingerprint.clone()))?, y.clone()))
        })
        .collect()
}

/// Identity release, used for the unprotected arm of comparisons.
pub fn passthrough_dataset(data: &[(Volume, LabelMap)]) -> Result<Vec<(ProtectedVolume, LabelMap)>> {
    data.iter()
        .map(|(x, y)| {
            let zero = PerturbationField::zeros(x.shape(), DEFAULT_EPSILON)?;
            Ok((ProtectedVolume::protect(x, &zero, None)?, y.clone()))
        })
        .collect()
}

/// Sample-wise error-minimizing noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub epsilon: f32,
    /// Alternation rounds; each is one surrogate epoch then PGD on every sample.
    pub rounds: usize,
    /// PGD steps per sample per round.
    pub steps: usize,
    /// Sign-step size as a fraction of epsilon.
    pub step_fraction: f32,
    pub surrogate_lr: f32,
    pub surrogate: VictimArch,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            rounds: 10,
            steps: 5,
            step_fraction: 0.25,
            surrogate_lr: DEFAULT_LR,
            surrogate: VictimArch::UnetSmall,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.step_fraction > 0.0 && self.surrogate_lr > 0.0) {
            return Err(Error::Config("step_fraction and surrogate_lr must be positive".into()));
        }
        Ok(())
    }
}

fn em_pgd_step(surrogate: &UNet, x: &Volume, y: &LabelMap, delta: &mut [f32], cfg: &EmConfig) -> Result<f64> {
    let mut g = Graph::new();
    let shape = x.shape().as_array();
    let input = g.constant(Tensor::new(&shape, x.data().to_vec()));
    let d = g.leaf(Tensor::new(&shape, delta.to_vec()), true);
    let shifted = g.add(input, d);
    let xp = g.clamp(shifted, 0.0, 1.0);
    let out = surrogate.forward(&mut g, xp, false);
    let (loss, value) = objective::seg_node(&mut g, out.output, y, &LossWeights::default())?;
    let grads = g.backward(loss);
    let step = cfg.step_fraction * cfg.epsilon;
    if let Some(grad) = grads.get(d) {
        for (v, gr) in delta.iter_mut().zip(grad.data()) {
            let s = if *gr > 0.0 {
                1.0
            } else if *gr < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v = (*v - step * s).clamp(-cfg.epsilon, cfg.epsilon);
        }
    }
    debug_assert!(delta.iter().all(|v| v.abs() <= cfg.epsilon));
    Ok(value)
}

/// Alternates surrogate epochs on perturbed data with projected sign-gradient
/// descent on per-sample noise that minimizes the surrogate's loss.
pub fn em_baseline(data: &[(Volume, LabelMap)], cfg: &EmConfig) -> Result<Vec<(ProtectedVolume, LabelMap)>> {
    cfg.validate()?;
    let (first, label) = data
        .first()
        .ok_or_else(|| Error::Precondition("EM dataset is empty".into()))?;
    let mut deltas: Vec<Vec<f32>> = data.iter().map(|(x, _)| vec![0.0; x.shape().len()]).collect();
    if cfg.steps > 0 && cfg.rounds > 0 {
        let spec = VictimSpec::preset(cfg.surrogate, cfg.seed.wrapping_mul(2).wrapping_add(0xe3));
        let mut surrogate = build_segmenter(&spec.segmenter(first.shape().channels, label.num_classes()))?;
        surrogate.spec().check_input(first.shape())?;
        let mut adam = Adam::new(cfg.surrogate_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00e3_ba5e);
        let w = LossWeights::default();
        for round in 0..cfg.rounds {
            let perturbed = apply_deltas(data, &deltas, cfg.epsilon)?;
            let train: Vec<(Volume, LabelMap)> =
                perturbed.iter().map(|(p, y)| (p.to_volume(), y.clone())).collect();
            let sur_loss =
                victim::train_epoch(&mut surrogate, &mut adam, &train, &mut rng, &w).map_err(divergence(round))?;
            let mut noise_loss = 0.0;
            for ((x, y), delta) in data.iter().zip(deltas.iter_mut()) {
                for _ in 0..cfg.steps {
                    noise_loss = em_pgd_step(&surrogate, x, y, delta, cfg).map_err(divergence(round))?;
                }
            }
            log::debug!("em round {round}: surrogate {sur_loss:.5}, last sample {noise_loss:.5}");
        }
    }
    apply_deltas(data, &deltas, cfg.epsilon)
}

fn apply_deltas(
    data: &[(Volume, LabelMap)],
    deltas: &[Vec<f32>],
    epsilon: f32,
) -> Result<Vec<(ProtectedVolume, LabelMap)>> {
    data.iter()
        .zip(deltas)
        .map(|((x, y), d)| {
            let field = PerturbationField::new(x.shape(), epsilon, d.clone())?;
            Ok((ProtectedVolume::protect(x, &field, None)?, y.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthSpec};
    use crate::volume::{Dims3, VolumeShape};

    fn tiny(n: usize) -> Vec<(Volume, LabelMap)> {
        generate_dataset(&SynthSpec {
            num_volumes: n,
            shape: [16, 16, 16],
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> ProtectorConfig {
        ProtectorConfig {
            epochs: 2,
            pretrain_epochs: 1,
            generator: GeneratorSpec {
                base_width: 4,
                depth: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn brute_dilation(label: &LabelMap, r: usize) -> Vec<u8> {
        let d = label.dims();
        let mut out = vec![0u8; d.voxels()];
        let r2 = (r * r) as isize;
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let mut hit = false;
                    for zz in 0..d.d {
                        for yy in 0..d.h {
                            for xx in 0..d.w {
                                let dz = z as isize - zz as isize;
                                let dy = y as isize - yy as isize;
                                let dx = x as isize - xx as isize;
                                if label.classes()[(zz * d.h + yy) * d.w + xx] != 0 && dz * dz + dy * dy + dx * dx <= r2 {
                                    hit = true;
                                }
                            }
                        }
                    }
                    out[(z * d.h + y) * d.w + x] = hit as u8;
                }
            }
        }
        out
    }

    #[test]
    fn single_voxel_dilates_to_a_cross() {
        let dims = Dims3::new(5, 5, 5);
        let mut classes = vec![0u8; 125];
        classes[62] = 1;
        let label = LabelMap::new(dims, 2, classes).unwrap();
        let m = derive_roi_mask(&label, 1, MaskMode::ForegroundDilated);
        assert_eq!(m.count(), 7);
        assert_eq!(m.values(), brute_dilation(&label, 1).as_slice());
    }

    #[test]
    fn dilation_matches_brute_force_on_synthetic_labels() {
        let data = generate_dataset(&SynthSpec {
            num_volumes: 2,
            shape: [8, 8, 8],
            ..Default::default()
        })
        .unwrap();
        for (_, y) in &data {
            for r in 0..3 {
                let m = derive_roi_mask(y, r, MaskMode::ForegroundDilated);
                assert_eq!(m.values(), brute_dilation(y, r).as_slice(), "r={r}");
            }
        }
    }

    #[test]
    fn background_label_gives_empty_mask_and_all_ones_ignores_label() {
        let dims = Dims3::new(2, 4, 4);
        let label = LabelMap::new(dims, 2, vec![0; 32]).unwrap();
        assert_eq!(derive_roi_mask(&label, 2, MaskMode::ForegroundDilated).count(), 0);
        assert_eq!(derive_roi_mask(&label, 2, MaskMode::AllOnes).count(), 32);
    }

    #[test]
    fn delta_saturates_masks_and_passes_interior_values() {
        let shape = VolumeShape::new(1, 2, 2, 2);
        let x = Volume::new("v", shape, vec![0.5; 8]).unwrap();
        let eps = DEFAULT_EPSILON;
        let dims = Dims3::new(2, 2, 2);
        let mask = RoiMask::new(dims, vec![1, 0, 1, 1, 1, 1, 1, 1]).unwrap();
        let raw = [0.1, 0.1, -0.005, -0.3, 0.0, 0.01, 0.1, 0.1];
        let d = delta_from_raw(&raw, &x, &mask, eps).unwrap();
        assert_eq!(&d.delta()[..6], &[eps, 0.0, -0.005, -eps, 0.0, 0.01]);
        let d = delta_from_raw(&[0.1; 8], &x, &RoiMask::ones(dims), eps).unwrap();
        assert!(d.delta().iter().all(|&v| (v - 0.015686).abs() < 1e-6));
    }

    #[test]
    fn zeroed_generator_leaves_data_unchanged() {
        let data = tiny(2);
        let cfg = tiny_cfg();
        let g = UNet::zeroed(cfg.generator_spec(1).unet()).unwrap();
        let out = protect_dataset(&data, &g, &cfg).unwrap();
        for ((p, y), (x, y0)) in out.iter().zip(&data) {
            assert_eq!(p.data(), x.data());
            assert_eq!(y, y0);
        }
    }

    #[test]
    fn trained_protector_respects_budget_and_is_deterministic() {
        let data = tiny(2);
        let cfg = tiny_cfg();
        let a = train_protector(&data, &cfg, None).unwrap();
        let b = train_protector(&data, &cfg, None).unwrap();
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 2);
        let out = protect_dataset(&data, &a.generator, &cfg).unwrap();
        for ((p, y), (x, y0)) in out.iter().zip(&data) {
            assert!(p.max_deviation(x).unwrap() <= cfg.epsilon + 1e-7);
            assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(y.classes(), y0.classes());
        }
    }

    #[test]
    fn generator_gradient_is_nonzero_at_init() {
        let data = tiny(1);
        let cfg = tiny_cfg();
        let (sur, _) = pretrain_surrogate(&data, &cfg).unwrap();
        let gen = build_generator(&cfg.generator_spec(1)).unwrap();
        let mask = mask_tensor(&derive_roi_mask(&data[0].1, 2, cfg.mask_mode));
        let clean = sur.predict(&data[0].0).unwrap();
        let t = generator_step(&gen, &sur, &data[0].0, &data[0].1, &mask, &clean, &cfg).unwrap();
        let norm: f32 = t.grads.iter().flatten().map(|g| g.max_abs()).fold(0.0, f32::max);
        assert!(norm > 0.0);
        assert!(t.spd <= 0.0 && t.isc <= 0.0);
    }

    #[test]
    fn em_with_zero_steps_is_identity_and_stays_in_budget_otherwise() {
        let data = tiny(2);
        let none = em_baseline(&data, &EmConfig { steps: 0, ..Default::default() }).unwrap();
        for ((p, _), (x, _)) in none.iter().zip(&data) {
            assert_eq!(p.data(), x.data());
        }
        let cfg = EmConfig {
            rounds: 1,
            steps: 2,
            ..Default::default()
        };
        let em = em_baseline(&data, &cfg).unwrap();
        let mut moved = false;
        for ((p, _), (x, _)) in em.iter().zip(&data) {
            let dev = p.max_deviation(x).unwrap();
            assert!(dev <= cfg.epsilon + 1e-7);
            moved |= dev > 0.0;
        }
        assert!(moved);
    }

    #[test]
    fn config_validation() {
        assert!(ProtectorConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(ProtectorConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(ProtectorConfig::default().validate().is_ok());
    }
}
