//! Segmentation loss, semantic prediction disruption and the generator objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral;
use crate::volume::{LabelMap, LogitVolume, PerturbationField};

/// Weights of the generator objective and of the segmentation loss mix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_spd: f64,
    pub lambda_isc: f64,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub dice_smooth: f64,
    /// Average the logit l1 distance over entries instead of summing.
    pub spd_mean_reduction: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_spd: 0.05,
            lambda_isc: 0.2,
            dice_weight: 1.0,
            ce_weight: 1.0,
            dice_smooth: 1e-5,
            spd_mean_reduction: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_spd,
            self.lambda_isc,
            self.dice_weight,
            self.ce_weight,
            self.dice_smooth,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.lambda_spd < 0.0 || self.lambda_isc < 0.0 {
            return Err(Error::Config("lambda weights must be non-negative".into()));
        }
        if self.dice_smooth <= 0.0 {
            return Err(Error::Config("dice_smooth must be positive".into()));
        }
        Ok(())
    }
}

fn check_pair(logits: &LogitVolume, label: &LabelMap) -> Result<()> {
    if logits.dims() != label.dims() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs label {:?}",
            logits.dims(),
            label.dims()
        )));
    }
    if logits.num_classes() != label.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "logits have {} classes, label has {}",
            logits.num_classes(),
            label.num_classes()
        )));
    }
    Ok(())
}

fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    for (row, out) in logits.chunks(k).zip(p.chunks_mut(k)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        out.iter_mut().for_each(|o| *o /= z);
    }
    p
}

/// Breakdown of the segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLossParts {
    pub cross_entropy: f64,
    pub mean_dice: f64,
    pub total: f64,
}

fn seg_loss_impl(logits: &LogitVolume, label: &LabelMap, w: &LossWeights, want_grad: bool) -> Result<(SegLossParts, Vec<f64>)> {
    check_pair(logits, label)?;
    let k = logits.num_classes();
    let x = logits.logits();
    let n = label.classes().len();
    let p = softmax_rows(x, k);
    let classes = label.classes();

    let mut ce = 0.0;
    for (v, &c) in classes.iter().enumerate() {
        let row = &x[v * k..(v + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|r| (r - m).exp()).sum::<f64>().ln();
        ce += lse - row[c as usize];
    }
    ce /= n as f64;

    let s = w.dice_smooth;
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for (v, &c) in classes.iter().enumerate() {
        for j in 0..k {
            psum[j] += p[v * k + j];
        }
        inter[c as usize] += p[v * k + c as usize];
        gsum[c as usize] += 1.0;
    }
    let dice: Vec<f64> = (0..k)
        .map(|j| (2.0 * inter[j] + s) / (psum[j] + gsum[j] + s))
        .collect();
    let mean_dice = dice.iter().sum::<f64>() / k as f64;
    let total = w.ce_weight * ce + w.dice_weight * (1.0 - mean_dice);
    let parts = SegLossParts {
        cross_entropy: ce,
        mean_dice,
        total,
    };
    if !want_grad {
        return Ok((parts, Vec::new()));
    }

    let mut grad = vec![0.0; x.len()];
    let mut dp = vec![0.0; k];
    for (v, &c) in classes.iter().enumerate() {
        let pv = &p[v * k..(v + 1) * k];
        // d(1 - mean dice)/dp_j
        for j in 0..k {
            let denom = psum[j] + gsum[j] + s;
            let g = if j == c as usize { 1.0 } else { 0.0 };
            let ddice = (2.0 * g * denom - (2.0 * inter[j] + s)) / (denom * denom);
            dp[j] = -w.dice_weight * ddice / k as f64;
        }
        let dot: f64 = pv.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for j in 0..k {
            let g = if j == c as usize { 1.0 } else { 0.0 };
            grad[v * k + j] = w.ce_weight * (pv[j] - g) / n as f64 + pv[j] * (dp[j] - dot);
        }
    }
    Ok((parts, grad))
}

/// `ce_weight * CE + dice_weight * (1 - mean soft Dice)`, averaged over voxels and classes.
pub fn seg_loss(logits: &LogitVolume, label: &LabelMap, w: &LossWeights) -> Result<f64> {
    Ok(seg_loss_impl(logits, label, w, false)?.0.total)
}

pub fn seg_loss_parts(logits: &LogitVolume, label: &LabelMap, w: &LossWeights) -> Result<SegLossParts> {
    Ok(seg_loss_impl(logits, label, w, false)?.0)
}

/// Loss and gradient with respect to the channels-last logits.
pub fn seg_loss_with_grad(logits: &LogitVolume, label: &LabelMap, w: &LossWeights) -> Result<(f64, Vec<f64>)> {
    let (parts, grad) = seg_loss_impl(logits, label, w, true)?;
    Ok((parts.total, grad))
}

fn check_same(clean: &LogitVolume, pert: &LogitVolume) -> Result<()> {
    if clean.dims() != pert.dims() || clean.num_classes() != pert.num_classes() {
        return Err(Error::ShapeMismatch("clean and perturbed logits differ in shape".into()));
    }
    Ok(())
}

/// `-||pert - clean||_1` (or its mean over entries). Gradient flows into `pert` only.
pub fn spd_loss(clean: &LogitVolume, pert: &LogitVolume, mean_reduction: bool) -> Result<f64> {
    check_same(clean, pert)?;
    let l1: f64 = pert
        .logits()
        .iter()
        .zip(clean.logits())
        .map(|(a, b)| (a - b).abs())
        .sum();
    let n = if mean_reduction { clean.logits().len() as f64 } else { 1.0 };
    Ok(-l1 / n)
}

/// Gradient of [`spd_loss`] with respect to `pert`; zero where the logits coincide.
pub fn spd_loss_with_grad(clean: &LogitVolume, pert: &LogitVolume, mean_reduction: bool) -> Result<(f64, Vec<f64>)> {
    let value = spd_loss(clean, pert, mean_reduction)?;
    let n = if mean_reduction { clean.logits().len() as f64 } else { 1.0 };
    let grad = pert
        .logits()
        .iter()
        .zip(clean.logits())
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                -1.0 / n
            } else if d < 0.0 {
                1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((value, grad))
}

/// Unweighted components of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub seg: f64,
    pub spd: f64,
    pub isc: f64,
}

impl LossComponents {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.seg + w.lambda_spd * self.spd + w.lambda_isc * self.isc
    }
}

/// `seg(pert, y) + lambda_spd * spd(clean, pert) + lambda_isc * isc(delta)`.
///
/// A zero `lambda_isc` skips the spectral term (so single-slice volumes are
/// accepted in that case).
pub fn total_loss(
    logits_pert: &LogitVolume,
    logits_clean: &LogitVolume,
    label: &LabelMap,
    delta: &PerturbationField,
    w: &LossWeights,
) -> Result<(f64, LossComponents)> {
    let seg = seg_loss(logits_pert, label, w)?;
    let spd = spd_loss(logits_clean, logits_pert, w.spd_mean_reduction)?;
    let isc = if w.lambda_isc == 0.0 {
        0.0
    } else {
        spectral::isc_loss(delta)?
    };
    let c = LossComponents { seg, spd, isc };
    Ok((c.weighted_total(w), c))
}
