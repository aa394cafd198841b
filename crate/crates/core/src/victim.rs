//! The data exploiter: trains segmenters from scratch on released data and
//! scores them on held-out clean volumes.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxshield_tensor::{Adam, Graph, Tensor};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics;
use crate::networks::{build_segmenter, UNet, VictimSpec};
use crate::objective;
use crate::volume::{LabelMap, Volume};

/// Learning rate shared by every segmenter trained in the pipeline.
pub const DEFAULT_LR: f32 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VictimTraining {
    pub epochs: usize,
    pub lr: f32,
}

impl Default for VictimTraining {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: DEFAULT_LR,
        }
    }
}

/// One Adam step of `net` on a single volume; returns the loss before the update.
pub fn train_step(net: &mut UNet, adam: &mut Adam, x: &Volume, y: &LabelMap, w: &LossWeights) -> Result<f64> {
    let mut g = Graph::new();
    let input = g.constant(Tensor::new(&x.shape().as_array(), x.data().to_vec()));
    let f = net.forward(&mut g, input, true);
    let (loss, value) = objective::seg_node(&mut g, f.output, y, w)?;
    if !value.is_finite() {
        return Err(Error::NotANumber("segmentation loss"));
    }
    let mut grads = g.backward(loss);
    let grads: Vec<Option<Tensor>> = f.params.iter().map(|&p| grads.take(p)).collect();
    adam.step(net.params_mut(), &grads);
    Ok(value)
}

/// One pass over `data` in a seeded random order; returns the mean loss.
pub fn train_epoch(
    net: &mut UNet,
    adam: &mut Adam,
    data: &[(Volume, LabelMap)],
    rng: &mut ChaCha8Rng,
    w: &LossWeights,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for i in order {
        total += train_step(net, adam, &data[i].0, &data[i].1, w)?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainedVictim {
    pub spec: VictimSpec,
    pub net: UNet,
    pub loss_curve: Vec<f64>,
}

/// Supervised Dice + CE training from a fresh initialization.
pub fn train_victim(data: &[(Volume, LabelMap)], spec: &VictimSpec, cfg: &VictimTraining) -> Result<TrainedVictim> {
    let (first, label) = data
        .first()
        .ok_or_else(|| Error::Precondition("victim training set is empty".into()))?;
    let seg = spec.segmenter(first.shape().channels, label.num_classes());
    let mut net = build_segmenter(&seg)?;
    net.spec().check_input(first.shape())?;
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005e_ed0f_da7a);
    let w = LossWeights::default();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(&mut net, &mut adam, data, &mut rng, &w).map_err(|e| match e {
            Error::NotANumber(what) => Error::Divergence {
                epoch,
                what: what.into(),
            },
            other => other,
        })?;
        log::debug!("victim {} epoch {epoch}: loss {loss:.5}", spec.arch.tag());
        loss_curve.push(loss);
    }
    Ok(TrainedVictim {
        spec: *spec,
        net,
        loss_curve,
    })
}

/// Outcome of one victim run, scored on the clean test split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimRunReport {
    pub victim: String,
    pub dataset: String,
    /// Mean over test volumes, indexed by class (0 = background).
    pub per_class_dsc: Vec<f64>,
    pub per_class_hd95: Vec<f64>,
    /// Mean over test volumes and foreground classes.
    pub mean_dsc: f64,
    pub mean_hd95: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Scores `net` by per-voxel argmax (no post-processing) on `test`.
pub fn score(net: &UNet, test: &[(Volume, LabelMap)]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, first) = test
        .first()
        .ok_or_else(|| Error::Precondition("test split is empty".into()))?;
    let k = first.num_classes();
    let mut dsc = vec![0.0; k];
    let mut hd = vec![0.0; k];
    for (x, y) in test {
        let pred = net.predict(x)?.argmax();
        let r = metrics::segmentation_scores(&pred, y, x.spacing())?;
        for c in 0..k {
            dsc[c] += r.dsc[c] / test.len() as f64;
            hd[c] += r.hd95[c] / test.len() as f64;
        }
    }
    Ok((dsc, hd))
}

/// Fails if any test id also occurs among the training ids.
pub fn check_split_hygiene<'a>(
    train_ids: impl IntoIterator<Item = &'a str>,
    test_ids: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let train: HashSet<&str> = train_ids.into_iter().collect();
    if let Some(leak) = test_ids.into_iter().find(|id| train.contains(id)) {
        return Err(Error::Precondition(format!("test volume {leak} also appears in training data")));
    }
    Ok(())
}

pub fn evaluate_victim(
    victim: &TrainedVictim,
    dataset: &str,
    train_ids: Vec<String>,
    test: &[(Volume, LabelMap)],
) -> Result<VictimRunReport> {
    let test_ids: Vec<String> = test.iter().map(|(v, _)| v.id().to_string()).collect();
    check_split_hygiene(train_ids.iter().map(String::as_str), test_ids.iter().map(String::as_str))?;
    let (per_class_dsc, per_class_hd95) = score(&victim.net, test)?;
    let fg = per_class_dsc.len() - 1;
    Ok(VictimRunReport {
        victim: victim.spec.arch.tag().to_string(),
        dataset: dataset.to_string(),
        mean_dsc: per_class_dsc[1..].iter().sum::<f64>() / fg as f64,
        mean_hd95: per_class_hd95[1..].iter().sum::<f64>() / fg as f64,
        per_class_dsc,
        per_class_hd95,
        epochs: victim.loss_curve.len(),
        seed: victim.spec.seed,
        loss_curve: victim.loss_curve.clone(),
        train_ids,
        test_ids,
    })
}
