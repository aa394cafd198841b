//! Tape nodes for the loss functions. Values and local gradients are computed
//! in f64 by [`crate::losses`] and [`crate::spectral`], then attached to the
//! graph as scalar nodes.

use voxshield_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::spectral;
use crate::volume::{to_channels_first, LabelMap, LogitVolume, VolumeShape};

fn logits_of(g: &Graph, v: Var, label: &LabelMap) -> Result<LogitVolume> {
    let t = g.value(v);
    if !t.all_finite() {
        return Err(Error::NotANumber("network logits"));
    }
    LogitVolume::from_channels_first(label.dims(), t.shape()[0], t.data())
}

/// Segmentation loss on channels-first logits `(K, D, H, W)`.
pub(crate) fn seg_node(g: &mut Graph, logits: Var, label: &LabelMap, w: &LossWeights) -> Result<(Var, f64)> {
    let lv = logits_of(g, logits, label)?;
    let (value, grad) = losses::seg_loss_with_grad(&lv, label, w)?;
    let grad = Tensor::new(g.value(logits).shape(), to_channels_first(&grad, lv.num_classes()));
    Ok((g.scalar_with_grads(&[logits], value as f32, vec![grad]), value))
}

/// `-||pert - clean||_1` with `clean` held constant.
pub(crate) fn spd_node(
    g: &mut Graph,
    pert: Var,
    clean: &LogitVolume,
    label: &LabelMap,
    mean_reduction: bool,
) -> Result<(Var, f64)> {
    let lv = logits_of(g, pert, label)?;
    let (value, grad) = losses::spd_loss_with_grad(clean, &lv, mean_reduction)?;
    let grad = Tensor::new(g.value(pert).shape(), to_channels_first(&grad, lv.num_classes()));
    Ok((g.scalar_with_grads(&[pert], value as f32, vec![grad]), value))
}

/// Inter-slice spectral loss of a `(C, D, H, W)` noise node.
pub(crate) fn isc_node(g: &mut Graph, delta: Var) -> Result<(Var, f64)> {
    let t = g.value(delta);
    let s = t.shape();
    let shape = VolumeShape::new(s[0], s[1], s[2], s[3]);
    let values: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
    let (value, grad) = spectral::isc_loss_with_grad(&values, shape)?;
    let grad = Tensor::new(s, grad.into_iter().map(|v| v as f32).collect());
    Ok((g.scalar_with_grads(&[delta], value as f32, vec![grad]), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims3;

    #[test]
    fn seg_node_gradient_matches_direct_loss_gradient() {
        let dims = Dims3::new(2, 2, 2);
        let label = LabelMap::new(dims, 2, vec![0, 1, 1, 0, 0, 0, 1, 1]).unwrap();
        let data: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 2, 2, 2], data.clone()), true);
        let (node, value) = seg_node(&mut g, x, &label, &LossWeights::default()).unwrap();
        let grads = g.backward(node);
        let lv = LogitVolume::from_channels_first(dims, 2, &data).unwrap();
        let (v2, g2) = losses::seg_loss_with_grad(&lv, &label, &LossWeights::default()).unwrap();
        assert_eq!(value, v2);
        let expect = to_channels_first(&g2, 2);
        for (a, b) in grads.get(x).unwrap().data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_logits_are_reported() {
        let label = LabelMap::new(Dims3::new(1, 1, 2), 2, vec![0, 1]).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 1, 1, 2], vec![f32::NAN, 0.0, 0.0, 0.0]), true);
        assert!(matches!(seg_node(&mut g, x, &label, &LossWeights::default()), Err(Error::NotANumber(_))));
    }
}
