//! Raw volumetric kernels operating on channels-first `(C, D, H, W)` buffers.
//!
//! Convolutions lower to GEMMs over im2col buffers covering slabs of whole
//! z-planes, so the buffer stays cache-sized. Everything here is
//! single-threaded and the summation order is fixed, so results are
//! bit-reproducible.

/// Spatial extent of a `(D, H, W)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn halved(&self) -> Self {
        Self::new(self.d / 2, self.h / 2, self.w / 2)
    }

    pub fn doubled(&self) -> Self {
        Self::new(self.d * 2, self.h * 2, self.w * 2)
    }
}

/// `c[m x n] = a[m x k] * b[k x n] (+ c if accumulate)` with explicit strides;
/// rows of `c` are `ldc` apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ldc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= (m - 1) * ldc + n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices sized for the (m, k, n) problem and the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    accumulate: bool,
) {
    gemm_ldc(m, k, n, a, rsa, csa, b, rsb, csb, c, n, accumulate)
}

/// Column buffers are limited to about this many floats; convolutions walk
/// the volume in slabs of whole z-planes that fit.
const COL_BUDGET: usize = 1 << 18;

fn slab_planes(kk: usize, dims: Dims3) -> usize {
    (COL_BUDGET / (kk * dims.h * dims.w).max(1)).clamp(1, dims.d)
}

/// Fills `cols` (shape `(cin * k^3, (z1 - z0) * H * W)`) for output planes
/// `z0..z1` of a stride-1 "same" convolution.
pub(crate) fn im2col(input: &[f32], cin: usize, dims: Dims3, k: usize, z0: usize, z1: usize, cols: &mut [f32]) {
    let Dims3 { d, h, w } = dims;
    let n = dims.voxels();
    let nc = (z1 - z0) * h * w;
    let pad = (k / 2) as isize;
    debug_assert!(cols.len() >= cin * k * k * k * nc);
    let mut row = 0;
    for ci in 0..cin {
        let plane = &input[ci * n..(ci + 1) * n];
        for kz in 0..k {
            let dz = kz as isize - pad;
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let out = &mut cols[row * nc..(row + 1) * nc];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for z in z0..z1 {
                        let sz = z as isize + dz;
                        for y in 0..h {
                            let sy = y as isize + dy;
                            let o = ((z - z0) * h + y) * w;
                            let dst = &mut out[o..o + w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                                dst.fill(0.0);
                                continue;
                            }
                            let src_row = (sz as usize * h + sy as usize) * w;
                            dst[..x_lo].fill(0.0);
                            dst[x_hi..].fill(0.0);
                            if x_lo < x_hi {
                                let s0 = (src_row as isize + x_lo as isize + dx) as usize;
                                dst[x_lo..x_hi].copy_from_slice(&plane[s0..s0 + (x_hi - x_lo)]);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` for planes `z0..z1` onto `grad_input`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(cols: &[f32], cin: usize, dims: Dims3, k: usize, z0: usize, z1: usize, grad_input: &mut [f32]) {
    let Dims3 { d, h, w } = dims;
    let n = dims.voxels();
    let nc = (z1 - z0) * h * w;
    let pad = (k / 2) as isize;
    let mut row = 0;
    for ci in 0..cin {
        let plane = &mut grad_input[ci * n..(ci + 1) * n];
        for kz in 0..k {
            let dz = kz as isize - pad;
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let src = &cols[row * nc..(row + 1) * nc];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_lo < x_hi {
                        for z in z0..z1 {
                            let sz = z as isize + dz;
                            if sz < 0 || sz >= d as isize {
                                continue;
                            }
                            for y in 0..h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let o = ((z - z0) * h + y) * w;
                                let s = &src[o + x_lo..o + x_hi];
                                let t0 = ((sz as usize * h + sy as usize) * w) as isize
                                    + x_lo as isize
                                    + dx;
                                let t = &mut plane[t0 as usize..t0 as usize + (x_hi - x_lo)];
                                for (a, b) in t.iter_mut().zip(s) {
                                    *a += b;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Stride-1 zero-padded convolution; `weight` is `(cout, cin, k, k, k)`.
pub fn conv3d_forward(
    input: &[f32],
    cin: usize,
    dims: Dims3,
    weight: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    k: usize,
) -> Vec<f32> {
    let n = dims.voxels();
    let kk = cin * k * k * k;
    let mut out = vec![0.0f32; cout * n];
    if k == 1 {
        gemm(cout, kk, n, weight, kk as isize, 1, input, n as isize, 1, &mut out, false);
    } else {
        let plane = dims.h * dims.w;
        let step = slab_planes(kk, dims);
        let mut cols = vec![0.0f32; kk * step * plane];
        for z0 in (0..dims.d).step_by(step) {
            let z1 = (z0 + step).min(dims.d);
            let nc = (z1 - z0) * plane;
            im2col(input, cin, dims, k, z0, z1, &mut cols);
            gemm_ldc(cout, kk, nc, weight, kk as isize, 1, &cols, nc as isize, 1, &mut out[z0 * plane..], n, false);
        }
    }
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            let bv = b[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Optional gradients with respect to input, weight and bias.
pub type LayerGrads = (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>);

/// Gradients of [`conv3d_forward`]. Returns `(d_input, d_weight, d_bias)`;
/// each is computed only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    input: &[f32],
    cin: usize,
    dims: Dims3,
    weight: &[f32],
    cout: usize,
    k: usize,
    grad_out: &[f32],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> LayerGrads {
    let n = dims.voxels();
    let kk = cin * k * k * k;
    let mut d_weight = need_weight.then(|| vec![0.0f32; cout * kk]);
    let mut d_input = need_input.then(|| vec![0.0f32; cin * n]);
    if k == 1 {
        if let Some(dw) = d_weight.as_mut() {
            // dW[cout x cin] = dY[cout x n] * X^T[n x cin]
            gemm(cout, n, kk, grad_out, n as isize, 1, input, 1, n as isize, dw, false);
        }
        if let Some(dx) = d_input.as_mut() {
            gemm(kk, cout, n, weight, 1, kk as isize, grad_out, n as isize, 1, dx, false);
        }
    } else if need_weight || need_input {
        let plane = dims.h * dims.w;
        let step = slab_planes(kk, dims);
        let mut cols = vec![0.0f32; kk * step * plane];
        for (i, z0) in (0..dims.d).step_by(step).enumerate() {
            let z1 = (z0 + step).min(dims.d);
            let nc = (z1 - z0) * plane;
            let gy = &grad_out[z0 * plane..];
            if let Some(dw) = d_weight.as_mut() {
                im2col(input, cin, dims, k, z0, z1, &mut cols);
                // dW[cout x kk] += dY[cout x nc] * cols^T[nc x kk]
                gemm(cout, nc, kk, gy, n as isize, 1, &cols, 1, nc as isize, dw, i > 0);
            }
            if let Some(dx) = d_input.as_mut() {
                // dcols[kk x nc] = W^T[kk x cout] * dY[cout x nc]
                gemm_ldc(kk, cout, nc, weight, 1, kk as isize, gy, n as isize, 1, &mut cols, nc, false);
                col2im(&cols, cin, dims, k, z0, z1, dx);
            }
        }
    }

    let d_bias = need_bias.then(|| {
        grad_out
            .chunks(n)
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect()
    });

    (d_input, d_weight, d_bias)
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
/// `weight` is `(cin, cout, 2, 2, 2)`; output grid is `dims.doubled()`.
pub fn conv_transpose2_forward(
    input: &[f32],
    cin: usize,
    dims: Dims3,
    weight: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
) -> Vec<f32> {
    let n = dims.voxels();
    let m = cout * 8;
    // y8[m x n] = W^T[m x cin] * X[cin x n]
    let mut y8 = vec![0.0f32; m * n];
    gemm(m, cin, n, weight, 1, m as isize, input, n as isize, 1, &mut y8, false);
    let od = dims.doubled();
    let on = od.voxels();
    let mut out = vec![0.0f32; cout * on];
    for co in 0..cout {
        let bv = bias.map_or(0.0, |b| b[co]);
        for tap in 0..8 {
            let (a, b, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let src = &y8[(co * 8 + tap) * n..(co * 8 + tap + 1) * n];
            let dst = &mut out[co * on..(co + 1) * on];
            for z in 0..dims.d {
                for y in 0..dims.h {
                    let srow = &src[(z * dims.h + y) * dims.w..(z * dims.h + y + 1) * dims.w];
                    let base = ((2 * z + a) * od.h + 2 * y + b) * od.w + c;
                    for (x, &v) in srow.iter().enumerate() {
                        dst[base + 2 * x] = v + bv;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2_backward(
    input: &[f32],
    cin: usize,
    dims: Dims3,
    weight: &[f32],
    cout: usize,
    grad_out: &[f32],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> LayerGrads {
    let n = dims.voxels();
    let m = cout * 8;
    let od = dims.doubled();
    let on = od.voxels();
    let mut dy8 = vec![0.0f32; m * n];
    for co in 0..cout {
        for tap in 0..8 {
            let (a, b, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let src = &grad_out[co * on..(co + 1) * on];
            let dst = &mut dy8[(co * 8 + tap) * n..(co * 8 + tap + 1) * n];
            for z in 0..dims.d {
                for y in 0..dims.h {
                    let base = ((2 * z + a) * od.h + 2 * y + b) * od.w + c;
                    let drow = &mut dst[(z * dims.h + y) * dims.w..(z * dims.h + y + 1) * dims.w];
                    for (x, v) in drow.iter_mut().enumerate() {
                        *v = src[base + 2 * x];
                    }
                }
            }
        }
    }
    let d_input = need_input.then(|| {
        let mut dx = vec![0.0f32; cin * n];
        // dX[cin x n] = W[cin x m] * dy8[m x n]
        gemm(cin, m, n, weight, m as isize, 1, &dy8, n as isize, 1, &mut dx, false);
        dx
    });
    let d_weight = need_weight.then(|| {
        let mut dw = vec![0.0f32; cin * m];
        // dW[cin x m] = X[cin x n] * dy8^T[n x m]
        gemm(cin, n, m, input, n as isize, 1, &dy8, 1, n as isize, &mut dw, false);
        dw
    });
    let d_bias = need_bias.then(|| {
        grad_out
            .chunks(on)
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect()
    });
    (d_input, d_weight, d_bias)
}

/// 2x2x2 max pooling. Returns pooled values and the flat argmax index of
/// each output voxel into its input channel plane.
pub fn max_pool2_forward(input: &[f32], channels: usize, dims: Dims3) -> (Vec<f32>, Vec<u32>) {
    let od = dims.halved();
    let n = dims.voxels();
    let on = od.voxels();
    let mut out = vec![0.0f32; channels * on];
    let mut arg = vec![0u32; channels * on];
    for c in 0..channels {
        let plane = &input[c * n..(c + 1) * n];
        for z in 0..od.d {
            for y in 0..od.h {
                for x in 0..od.w {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for tap in 0..8 {
                        let (a, b, cc) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                        let i = ((2 * z + a) * dims.h + 2 * y + b) * dims.w + 2 * x + cc;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                    let o = c * on + (z * od.h + y) * od.w + x;
                    out[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(grad_out: &[f32], argmax: &[u32], channels: usize, dims: Dims3) -> Vec<f32> {
    let n = dims.voxels();
    let on = dims.halved().voxels();
    let mut dx = vec![0.0f32; channels * n];
    for c in 0..channels {
        for o in 0..on {
            dx[c * n + argmax[c * on + o] as usize] += grad_out[c * on + o];
        }
    }
    dx
}
