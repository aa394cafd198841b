//! Per-slice amplitude spectra and the inter-slice spectral consistency loss.
//!
//! The loss over a single-channel noise field with slices `delta_z` is
//!
//! ```text
//! L = -1/(D-1) * sum_{z=0}^{D-2} || |F(delta_{z+1})| - |F(delta_z)| ||_F
//! ```
//!
//! where `F` is the unnormalized 2D DFT. Minimizing `L` pushes adjacent
//! slices apart in amplitude spectrum. Multi-channel fields average the
//! per-channel losses. The modulus has subgradient 0 at zero, and a pair of
//! identical spectra contributes a zero subgradient.

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::volume::{PerturbationField, VolumeShape};

/// Amplitude spectrum `|F(slice)|` of one `(H, W)` slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSpectrum {
    pub height: usize,
    pub width: usize,
    pub amplitude: Vec<f64>,
}

/// In-place unnormalized 2D DFT of a row-major `(h, w)` buffer.
fn dft2(buf: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft(w, direction);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(h, direction);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

fn transform_slice(slice: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = slice.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft2(&mut buf, h, w, FftDirection::Forward);
    buf
}

pub fn amplitude_spectrum(slice: &[f64], height: usize, width: usize) -> Result<SliceSpectrum> {
    if slice.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "slice of {} values for {height}x{width}",
            slice.len()
        )));
    }
    if slice.iter().any(|v| v.is_nan()) {
        return Err(Error::NotANumber("amplitude_spectrum input"));
    }
    let amplitude = transform_slice(slice, height, width)
        .iter()
        .map(|c| c.norm())
        .collect();
    Ok(SliceSpectrum {
        height,
        width,
        amplitude,
    })
}

fn validate(delta: &[f64], shape: VolumeShape) -> Result<()> {
    if delta.len() != shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} noise values for {:?}",
            delta.len(),
            shape.as_array()
        )));
    }
    if shape.depth < 2 {
        return Err(Error::Precondition(
            "inter-slice loss needs at least two slices along z; disable the term".into(),
        ));
    }
    if delta.iter().any(|v| v.is_nan()) {
        return Err(Error::NotANumber("isc_loss input"));
    }
    Ok(())
}

/// Loss value and gradient with respect to `delta` (same layout as `delta`).
pub fn isc_loss_with_grad(delta: &[f64], shape: VolumeShape) -> Result<(f64, Vec<f64>)> {
    validate(delta, shape)?;
    let (h, w, d) = (shape.height, shape.width, shape.depth);
    let plane = h * w;
    let pairs = (d - 1) as f64;
    let channels = shape.channels as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; delta.len()];
    for c in 0..shape.channels {
        let base = c * shape.voxels();
        let spectra: Vec<Vec<Complex64>> = (0..d)
            .map(|z| transform_slice(&delta[base + z * plane..base + (z + 1) * plane], h, w))
            .collect();
        let amps: Vec<Vec<f64>> = spectra
            .iter()
            .map(|s| s.iter().map(|v| v.norm()).collect())
            .collect();
        // dL/dS_z accumulated over both pairs a slice participates in.
        let mut d_amp = vec![vec![0.0f64; plane]; d];
        for z in 0..d - 1 {
            let diff: Vec<f64> = amps[z + 1].iter().zip(&amps[z]).map(|(a, b)| a - b).collect();
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            loss -= norm / (pairs * channels);
            if norm > 0.0 {
                let s = -1.0 / (pairs * channels * norm);
                for i in 0..plane {
                    d_amp[z + 1][i] += s * diff[i];
                    d_amp[z][i] -= s * diff[i];
                }
            }
        }
        // Through the modulus and the DFT: grad_x = Re(IDFT_unnormalized(G * F / |F|)).
        for z in 0..d {
            let mut buf: Vec<Complex64> = spectra[z]
                .iter()
                .zip(&amps[z])
                .zip(&d_amp[z])
                .map(|((f, &a), &g)| if a > 0.0 { f * (g / a) } else { Complex64::new(0.0, 0.0) })
                .collect();
            dft2(&mut buf, h, w, FftDirection::Inverse);
            for (i, v) in buf.iter().enumerate() {
                grad[base + z * plane + i] = v.re;
            }
        }
    }
    Ok((loss, grad))
}

pub fn isc_loss_raw(delta: &[f64], shape: VolumeShape) -> Result<f64> {
    validate(delta, shape)?;
    let (h, w, d) = (shape.height, shape.width, shape.depth);
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..shape.channels {
        let base = c * shape.voxels();
        let amps: Vec<Vec<f64>> = (0..d)
            .map(|z| {
                transform_slice(&delta[base + z * plane..base + (z + 1) * plane], h, w)
                    .iter()
                    .map(|v| v.norm())
                    .collect()
            })
            .collect();
        let sum: f64 = amps
            .windows(2)
            .map(|p| {
                p[1].iter()
                    .zip(&p[0])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total -= sum / (d - 1) as f64;
    }
    Ok(total / shape.channels as f64)
}

/// Inter-slice frequency consistency loss of a perturbation field.
pub fn isc_loss(delta: &PerturbationField) -> Result<f64> {
    let values: Vec<f64> = delta.delta().iter().map(|&v| v as f64).collect();
    isc_loss_raw(&values, delta.shape())
}
