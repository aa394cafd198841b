//! Image grid of the released noise on consecutive z-slices: the top row shows
//! `x_p - x`, the bottom row its centred log-amplitude spectrum.

use std::path::Path;

use image::{GrayImage, Luma};
use voxshield_core::io::{self, StoredVolume};
use voxshield_core::spectral::amplitude_spectrum;

use crate::error::{CliError, CliResult};

const SCALE: u32 = 4;
const GAP: u32 = 2;

pub struct NoiseSlices {
    pub height: usize,
    pub width: usize,
    /// One `(H, W)` noise slice per shown z, channel 0.
    pub slices: Vec<Vec<f64>>,
}

fn find<'a>(entries: &'a [(StoredVolume, voxshield_core::volume::LabelMap)], id: &str, dir: &Path) -> CliResult<&'a StoredVolume> {
    entries
        .iter()
        .map(|(v, _)| v)
        .find(|v| v.id() == id)
        .ok_or_else(|| CliError::MissingInput {
            path: dir.to_path_buf(),
            reason: format!("no volume with id {id}"),
        })
}

pub fn noise_slices(clean_dir: &Path, protected_dir: &Path, id: &str, count: usize, start: Option<usize>) -> CliResult<NoiseSlices> {
    let clean = io::load_dataset(clean_dir)?;
    let prot = io::load_dataset(protected_dir)?;
    let x = find(&clean.entries, id, clean_dir)?.to_volume();
    let p = find(&prot.entries, id, protected_dir)?.to_volume();
    if x.shape() != p.shape() {
        return Err(CliError::Config(format!("{id} has different shapes in the two datasets")));
    }
    let s = x.shape();
    let count = count.clamp(1, s.depth);
    let start = start.unwrap_or((s.depth - count) / 2);
    if start + count > s.depth {
        return Err(CliError::Config(format!(
            "slices {start}..{} exceed depth {}",
            start + count,
            s.depth
        )));
    }
    let slices = (start..start + count)
        .map(|z| {
            x.slice(0, z)
                .iter()
                .zip(p.slice(0, z))
                .map(|(a, b)| (*b - *a) as f64)
                .collect()
        })
        .collect();
    Ok(NoiseSlices {
        height: s.height,
        width: s.width,
        slices,
    })
}

fn fftshift(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = values[y * w + x];
        }
    }
    out
}

pub fn render(noise: &NoiseSlices) -> CliResult<GrayImage> {
    let (h, w) = (noise.height, noise.width);
    let n = noise.slices.len() as u32;
    let tile_w = w as u32 * SCALE;
    let tile_h = h as u32 * SCALE;
    let mut img = GrayImage::from_pixel(n * tile_w + (n - 1) * GAP, 2 * tile_h + GAP, Luma([255]));
    let peak = noise
        .slices
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let spectra: Vec<Vec<f64>> = noise
        .slices
        .iter()
        .map(|s| {
            let a = amplitude_spectrum(s, h, w)?;
            Ok(fftshift(&a.amplitude, h, w).into_iter().map(f64::ln_1p).collect())
        })
        .collect::<CliResult<_>>()?;
    let spec_peak = spectra.iter().flatten().fold(0.0f64, |m, v| m.max(*v)).max(1e-12);
    for (i, (slice, spec)) in noise.slices.iter().zip(&spectra).enumerate() {
        let x0 = i as u32 * (tile_w + GAP);
        for y in 0..h {
            for x in 0..w {
                let d = (127.5 + 127.5 * slice[y * w + x] / peak).round() as u8;
                let s = (255.0 * spec[y * w + x] / spec_peak).round() as u8;
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        let px = x0 + x as u32 * SCALE + dx;
                        img.put_pixel(px, y as u32 * SCALE + dy, Luma([d]));
                        img.put_pixel(px, tile_h + GAP + y as u32 * SCALE + dy, Luma([s]));
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn visualize(
    clean_dir: &Path,
    protected_dir: &Path,
    id: &str,
    out: &Path,
    count: usize,
    start: Option<usize>,
) -> CliResult<()> {
    let img = render(&noise_slices(clean_dir, protected_dir, id, count, start)?)?;
    if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))?;
    }
    let tmp = out.with_extension("partial.png");
    img.save(&tmp).map_err(|e| CliError::io(&tmp, std::io::Error::other(e)))?;
    std::fs::rename(&tmp, out).map_err(|e| CliError::io(out, e))
}
