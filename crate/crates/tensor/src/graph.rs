//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that (transitively) depends on a leaf marked as requiring
//! gradients. Nodes that do not require gradients never run their backward
//! closures, so frozen networks only pay for input gradients.

use crate::kernels::{self, Dims3};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Data handed to a backward closure.
pub struct BackwardCtx<'a> {
    pub parents: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn spatial(shape: &[usize]) -> (usize, Dims3) {
    assert_eq!(shape.len(), 4, "expected (C, D, H, W), got {shape:?}");
    (shape[0], Dims3::new(shape[1], shape[2], shape[3]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a leaf. Parameters to be optimized use `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: vec![],
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Node whose value and local gradients with respect to each input were
    /// computed externally. `local_grads[i]` must have the shape of
    /// `inputs[i]`; the output must be a scalar.
    pub fn scalar_with_grads(&mut self, inputs: &[Var], value: f32, local_grads: Vec<Tensor>) -> Var {
        assert_eq!(inputs.len(), local_grads.len());
        for (v, g) in inputs.iter().zip(&local_grads) {
            assert_eq!(self.value(*v).shape(), g.shape(), "local gradient shape mismatch");
        }
        self.push(
            Tensor::scalar(value),
            inputs,
            Box::new(move |ctx| {
                let s = ctx.grad.item();
                local_grads
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(g, &need)| need.then(|| g.scale(s)))
                    .collect()
            }),
        )
    }

    /// Runs reverse accumulation from a scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                parents: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &grad,
                needs,
            };
            let parent_grads = back(&ctx);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(grad);
        }
        Gradients { grads }
    }

    // ---- element-wise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            value,
            &[a, b],
            Box::new(|ctx| vec![ctx.needs[0].then(|| ctx.grad.clone()), ctx.needs[1].then(|| ctx.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            value,
            &[a, b],
            Box::new(|ctx| vec![ctx.needs[0].then(|| ctx.grad.clone()), ctx.needs[1].then(|| ctx.grad.scale(-1.0))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            value,
            &[a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.zip_map(ctx.parents[1], |g, y| g * y)),
                    ctx.needs[1].then(|| ctx.grad.zip_map(ctx.parents[0], |g, x| g * x)),
                ]
            }),
        )
    }

    /// Multiplies a `(C, D, H, W)` tensor by a `(D, H, W)` constant broadcast over channels.
    pub fn mul_spatial_const(&mut self, x: Var, mask: &Tensor) -> Var {
        let shape = self.value(x).shape().to_vec();
        let n: usize = shape[1..].iter().product();
        assert_eq!(mask.len(), n, "mask does not match spatial shape");
        let m = mask.data().to_vec();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(&m).for_each(|(v, w)| *v *= w);
        }
        self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                for chunk in g.data_mut().chunks_mut(n) {
                    chunk.iter_mut().zip(&m).for_each(|(v, w)| *v *= w);
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let value = self.value(x).scale(s);
        self.push(value, &[x], Box::new(move |ctx| vec![Some(ctx.grad.scale(s))]))
    }

    /// Clamp to `[lo, hi]`; gradient is passed only where the input lies strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                vec![Some(ctx.grad.zip_map(ctx.parents[0], |g, v| if v > lo && v < hi { g } else { 0.0 }))]
            }),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f32::tanh);
        self.push(
            value,
            &[x],
            Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * (1.0 - y * y)))]),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                vec![Some(ctx.grad.zip_map(ctx.parents[0], |g, v| if v > 0.0 { g } else { slope * g }))]
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(
            value,
            &[x],
            Box::new(|ctx| vec![Some(Tensor::full(ctx.parents[0].shape(), ctx.grad.item()))]),
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let value: f32 = terms.iter().map(|(v, w)| self.value(*v).item() * w).sum();
        let weights: Vec<f32> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(value),
            &vars,
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                weights
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(w, &need)| need.then(|| Tensor::scalar(g * w)))
                    .collect()
            }),
        )
    }

    // ---- structural ----

    /// Concatenates two `(C, D, H, W)` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ca, da) = spatial(self.value(a).shape());
        let (cb, db) = spatial(self.value(b).shape());
        assert_eq!(da, db, "spatial mismatch in concat");
        let mut data = Vec::with_capacity((ca + cb) * da.voxels());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(&[ca + cb, da.d, da.h, da.w], data);
        let split = ca * da.voxels();
        self.push(
            value,
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                vec![
                    ctx.needs[0].then(|| Tensor::new(ctx.parents[0].shape(), g[..split].to_vec())),
                    ctx.needs[1].then(|| Tensor::new(ctx.parents[1].shape(), g[split..].to_vec())),
                ]
            }),
        )
    }

    // ---- volumetric layers ----

    /// Stride-1 "same" 3D convolution. `w` is `(C_out, C_in, k, k, k)` with odd `k`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (cin, dims) = spatial(self.value(x).shape());
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 5, "conv weight must be rank 5");
        assert_eq!(ws[1], cin, "conv weight expects {} input channels, got {cin}", ws[1]);
        let (cout, k) = (ws[0], ws[2]);
        assert!(k % 2 == 1 && ws[3] == k && ws[4] == k, "cubic odd kernel required");
        let out = kernels::conv3d_forward(
            self.value(x).data(),
            cin,
            dims,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            k,
        );
        let value = Tensor::new(&[cout, dims.d, dims.h, dims.w], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            value,
            &parents,
            Box::new(move |ctx| {
                let need_b = ctx.needs.get(2).copied().unwrap_or(false);
                let (dx, dw, db) = kernels::conv3d_backward(
                    ctx.parents[0].data(),
                    cin,
                    dims,
                    ctx.parents[1].data(),
                    cout,
                    k,
                    ctx.grad.data(),
                    ctx.needs[0],
                    ctx.needs[1],
                    need_b,
                );
                let mut out = vec![
                    dx.map(|d| Tensor::new(ctx.parents[0].shape(), d)),
                    dw.map(|d| Tensor::new(ctx.parents[1].shape(), d)),
                ];
                if ctx.parents.len() == 3 {
                    out.push(db.map(|d| Tensor::new(ctx.parents[2].shape(), d)));
                }
                out
            }),
        )
    }

    /// Kernel-2 stride-2 transposed convolution. `w` is `(C_in, C_out, 2, 2, 2)`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (cin, dims) = spatial(self.value(x).shape());
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws, vec![cin, ws[1], 2, 2, 2], "transpose weight must be (C_in, C_out, 2, 2, 2)");
        let cout = ws[1];
        let out = kernels::conv_transpose2_forward(
            self.value(x).data(),
            cin,
            dims,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
        );
        let od = dims.doubled();
        let value = Tensor::new(&[cout, od.d, od.h, od.w], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            value,
            &parents,
            Box::new(move |ctx| {
                let need_b = ctx.needs.get(2).copied().unwrap_or(false);
                let (dx, dw, db) = kernels::conv_transpose2_backward(
                    ctx.parents[0].data(),
                    cin,
                    dims,
                    ctx.parents[1].data(),
                    cout,
                    ctx.grad.data(),
                    ctx.needs[0],
                    ctx.needs[1],
                    need_b,
                );
                let mut out = vec![
                    dx.map(|d| Tensor::new(ctx.parents[0].shape(), d)),
                    dw.map(|d| Tensor::new(ctx.parents[1].shape(), d)),
                ];
                if ctx.parents.len() == 3 {
                    out.push(db.map(|d| Tensor::new(ctx.parents[2].shape(), d)));
                }
                out
            }),
        )
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (c, dims) = spatial(self.value(x).shape());
        assert!(
            dims.d % 2 == 0 && dims.h % 2 == 0 && dims.w % 2 == 0,
            "max_pool2 needs even extents, got {dims:?}"
        );
        let (out, arg) = kernels::max_pool2_forward(self.value(x).data(), c, dims);
        let od = dims.halved();
        let value = Tensor::new(&[c, od.d, od.h, od.w], out);
        self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let dx = kernels::max_pool2_backward(ctx.grad.data(), &arg, c, dims);
                vec![Some(Tensor::new(ctx.parents[0].shape(), dx))]
            }),
        )
    }

    /// Per-channel normalization over the spatial extent with affine `gamma`, `beta` of shape `(C)`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let (c, dims) = spatial(self.value(x).shape());
        let n = dims.voxels();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0f32; c * n];
        let mut inv_std = vec![0.0f32; c];
        let mut out = vec![0.0f32; c * n];
        for ch in 0..c {
            let plane = &xv[ch * n..(ch + 1) * n];
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            inv_std[ch] = is as f32;
            for i in 0..n {
                let h = ((plane[i] as f64 - mean) * is) as f32;
                xhat[ch * n + i] = h;
                out[ch * n + i] = h * gv[ch] + bv[ch];
            }
        }
        let value = Tensor::new(self.value(x).shape(), out);
        self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gamma = ctx.parents[1].data();
                let mut dx = ctx.needs[0].then(|| vec![0.0f32; c * n]);
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for ch in 0..c {
                    let gp = &g[ch * n..(ch + 1) * n];
                    let hp = &xhat[ch * n..(ch + 1) * n];
                    let sum_g: f64 = gp.iter().map(|&v| v as f64).sum();
                    let sum_gh: f64 = gp.iter().zip(hp).map(|(&a, &b)| a as f64 * b as f64).sum();
                    dgamma[ch] = sum_gh as f32;
                    dbeta[ch] = sum_g as f32;
                    if let Some(dx) = dx.as_mut() {
                        let scale = gamma[ch] * inv_std[ch] / n as f32;
                        let (sg, sgh) = (sum_g as f32, sum_gh as f32);
                        for i in 0..n {
                            dx[ch * n + i] = scale * (n as f32 * gp[i] - sg - hp[i] * sgh);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(ctx.parents[0].shape(), d)),
                    ctx.needs[1].then(|| Tensor::new(&[c], dgamma)),
                    ctx.needs[2].then(|| Tensor::new(&[c], dbeta)),
                ]
            }),
        )
    }
}
