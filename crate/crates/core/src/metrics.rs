//! Segmentation quality (DSC, HD95) and imperceptibility (PSNR, SSIM).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims3, LabelMap, Volume};

/// Returned by [`psnr`] for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Per-class segmentation scores plus optional image-fidelity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Indexed by class; entry 0 is background.
    pub dsc: Vec<f64>,
    pub hd95: Vec<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

impl MetricReport {
    /// Mean over foreground classes.
    pub fn mean_foreground_dsc(&self) -> f64 {
        mean(&self.dsc[1..])
    }

    pub fn mean_foreground_hd95(&self) -> f64 {
        mean(&self.hd95[1..])
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Dice coefficient `2|P & G| / (|P| + |G|)`; two empty masks score 1.0.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("dsc: {} vs {} voxels", pred.len(), gt.len())));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Voxels of `mask` with at least one 6-neighbour outside the mask
/// (positions beyond the grid count as outside).
pub fn boundary(mask: &[bool], dims: Dims3) -> Vec<bool> {
    let Dims3 { d, h, w } = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let interior = z > 0
                    && z + 1 < d
                    && y > 0
                    && y + 1 < h
                    && x > 0
                    && x + 1 < w
                    && at(z - 1, y, x)
                    && at(z + 1, y, x)
                    && at(z, y - 1, x)
                    && at(z, y + 1, x)
                    && at(z, y, x - 1)
                    && at(z, y, x + 1);
                out[(z * h + y) * w + x] = !interior;
            }
        }
    }
    out
}

/// One pass of the lower-envelope squared distance transform along a line.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64], v: &mut [usize], zs: &mut [f64]) {
    let n = f.len();
    let s2 = spacing * spacing;
    let pos = |i: usize| i as f64;
    let mut k = 0usize;
    let mut first = None;
    for (i, &fi) in f.iter().enumerate() {
        if fi.is_finite() {
            first = Some(i);
            break;
        }
    }
    let Some(first) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    zs[0] = f64::NEG_INFINITY;
    zs[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + s2 * pos(q) * pos(q)) - (f[p] + s2 * pos(p) * pos(p))) / (2.0 * s2 * (pos(q) - pos(p)));
            if s <= zs[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            zs[k] = s;
            zs[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while zs[k + 1] < pos(q) {
            k += 1;
        }
        let dq = pos(q) - pos(v[k]);
        *o = s2 * dq * dq + f[v[k]];
    }
}

/// Exact squared Euclidean distance (spacing-scaled) from every voxel to the
/// nearest `true` voxel of `seeds`. Infinite if `seeds` is empty.
pub fn squared_distance_field(seeds: &[bool], dims: Dims3, spacing: [f32; 3]) -> Vec<f64> {
    let Dims3 { d, h, w } = dims;
    let mut field: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let longest = d.max(h).max(w);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut zs = vec![0.0; longest + 1];
    // x
    for z in 0..d {
        for y in 0..h {
            let base = (z * h + y) * w;
            line[..w].copy_from_slice(&field[base..base + w]);
            edt_1d(&line[..w], spacing[2] as f64, &mut out[..w], &mut v, &mut zs);
            field[base..base + w].copy_from_slice(&out[..w]);
        }
    }
    // y
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = field[(z * h + y) * w + x];
            }
            edt_1d(&line[..h], spacing[1] as f64, &mut out[..h], &mut v, &mut zs);
            for y in 0..h {
                field[(z * h + y) * w + x] = out[y];
            }
        }
    }
    // z
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = field[(z * h + y) * w + x];
            }
            edt_1d(&line[..d], spacing[0] as f64, &mut out[..d], &mut v, &mut zs);
            for z in 0..d {
                field[(z * h + y) * w + x] = out[z];
            }
        }
    }
    field
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Length of the grid diagonal between the first and last voxel centres.
pub fn grid_diagonal(dims: Dims3, spacing: [f32; 3]) -> f64 {
    let e = [dims.d, dims.h, dims.w];
    (0..3)
        .map(|i| ((e[i] - 1) as f64 * spacing[i] as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// 95th-percentile symmetric Hausdorff distance between mask boundaries.
///
/// Both empty gives 0; exactly one empty gives the grid diagonal.
pub fn hd95(pred: &[bool], gt: &[bool], dims: Dims3, spacing: [f32; 3]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != dims.voxels() {
        return Err(Error::ShapeMismatch(format!(
            "hd95: {} vs {} voxels on {dims:?}",
            pred.len(),
            gt.len()
        )));
    }
    let p_any = pred.iter().any(|&v| v);
    let g_any = gt.iter().any(|&v| v);
    match (p_any, g_any) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(grid_diagonal(dims, spacing)),
        _ => {}
    }
    let bp = boundary(pred, dims);
    let bg = boundary(gt, dims);
    let to_g = squared_distance_field(&bg, dims, spacing);
    let to_p = squared_distance_field(&bp, dims, spacing);
    let mut d_pg: Vec<f64> = bp.iter().zip(&to_g).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()).collect();
    let mut d_gp: Vec<f64> = bg.iter().zip(&to_p).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()).collect();
    Ok(percentile(&mut d_pg, 95.0).max(percentile(&mut d_gp, 95.0)))
}

/// Per-class DSC and HD95 of an argmax-decoded prediction.
pub fn segmentation_scores(pred: &[u8], gt: &LabelMap, spacing: [f32; 3]) -> Result<MetricReport> {
    if pred.len() != gt.classes().len() {
        return Err(Error::ShapeMismatch("prediction vs label".into()));
    }
    let mut dscs = Vec::with_capacity(gt.num_classes());
    let mut hds = Vec::with_capacity(gt.num_classes());
    for class in 0..gt.num_classes() as u8 {
        let p: Vec<bool> = pred.iter().map(|&c| c == class).collect();
        let g = gt.class_mask(class);
        dscs.push(dsc(&p, &g)?);
        hds.push(hd95(&p, &g, gt.dims(), spacing)?);
    }
    Ok(MetricReport {
        dsc: dscs,
        hd95: hds,
        psnr: None,
        ssim: None,
    })
}

fn check_same(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape().as_array(),
            b.shape().as_array()
        )));
    }
    Ok(())
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// `-10 log10(MSE)` for data range 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(clean: &Volume, other: &Volume) -> Result<f64> {
    check_same(clean, other)?;
    Ok(psnr_from_mse(mse(clean.data(), other.data())))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB)
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `(h, w)` image with the 1D kernel `k`.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `(h, w)` images with data range 1.
pub fn ssim_2d(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "SSIM needs slices of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Per-slice 2D SSIM averaged over slices and channels.
pub fn ssim(clean: &Volume, other: &Volume) -> Result<f64> {
    check_same(clean, other)?;
    let s = clean.shape();
    let mut total = 0.0;
    for c in 0..s.channels {
        for z in 0..s.depth {
            let a: Vec<f64> = clean.slice(c, z).iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = other.slice(c, z).iter().map(|&v| v as f64).collect();
            total += ssim_2d(&a, &b, s.height, s.width)?;
        }
    }
    Ok(total / (s.channels * s.depth) as f64)
}
