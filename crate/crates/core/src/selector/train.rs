//! Selector training against a frozen backbone.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{selector_losses, SelectorLossValues, SelectorModel, SparsityTarget};
use crate::error::{Error, Result};
use crate::tensor::{AdamState, Scalar, Tape, Tensor};
use crate::wab::{TrainSample, WabModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WsTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 0.01,
            seed: 0,
        }
    }
}

/// Mean selector losses over one epoch plus the mean width ratios it implied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsEpochLog {
    pub epoch: usize,
    pub cls: f64,
    pub spars: f64,
    pub select: f64,
    pub total: f64,
    /// Mean of `Σ p_i·r_i` over the epoch.
    pub expected_ratio: f64,
    /// Mean ratio of the argmax width over the epoch.
    pub chosen_ratio: f64,
    pub seconds: f64,
}

/// Everything the selector needs from the frozen backbone, per sample.
#[derive(Clone, Debug)]
pub struct SelectorTargets<T> {
    /// Encodings, each `[1, C_de, H, W]`.
    pub f_de: Vec<Tensor<T>>,
    /// Mean absolute restoration error at every width candidate.
    pub per_width_l1: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl<T> SelectorTargets<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn per_sample_l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, items: usize) -> Vec<f64> {
    let per = a.numel() / items;
    a.data()
        .chunks(per)
        .zip(b.data().chunks(per))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p.as_f64() - q.as_f64()).abs()).sum::<f64>() / per as f64)
        .collect()
}

/// Runs the frozen backbone once over `data`: one encoding per sample and
/// the L1 error of its restoration at every width.
pub fn precompute_targets<T: Scalar>(wab: &WabModel<T>, data: &[TrainSample<T>]) -> Result<SelectorTargets<T>> {
    const CHUNK: usize = 16;
    let classes = wab.config().classes;
    let widths = wab.candidates().widths().to_vec();
    let mut targets = SelectorTargets {
        f_de: Vec::with_capacity(data.len()),
        per_width_l1: Vec::with_capacity(data.len()),
        labels: Vec::with_capacity(data.len()),
    };
    for chunk in data.chunks(CHUNK) {
        if let Some(bad) = chunk.iter().find(|s| s.label >= classes) {
            return Err(Error::Label {
                label: bad.label,
                classes,
            });
        }
        let x = Tensor::stack(&chunk.iter().map(|s| &s.degraded).collect::<Vec<_>>())?;
        let y = Tensor::stack(&chunk.iter().map(|s| &s.clean).collect::<Vec<_>>())?;
        let f_de = wab.encode_eval(&x)?;
        let mut rows = vec![Vec::with_capacity(widths.len()); chunk.len()];
        for &w in &widths {
            let restored = wab.restore_eval(&x, &f_de, w)?;
            for (row, l1) in rows.iter_mut().zip(per_sample_l1(&restored, &y, chunk.len())) {
                row.push(l1);
            }
        }
        for (i, s) in chunk.iter().enumerate() {
            targets.f_de.push(f_de.batch_item(i)?);
            targets.labels.push(s.label);
        }
        targets.per_width_l1.extend(rows);
    }
    Ok(targets)
}

/// Precomputes targets from the frozen backbone and trains the selector on
/// them. The backbone is only read.
pub fn train_ws<T: Scalar>(
    wab: &WabModel<T>,
    sel: &mut SelectorModel<T>,
    data: &[TrainSample<T>],
    t: SparsityTarget,
    config: &WsTrainConfig,
    on_epoch: impl FnMut(&WsEpochLog),
) -> Result<Vec<WsEpochLog>> {
    super::check_compatible(wab.config(), sel.config())?;
    let targets = precompute_targets(wab, data)?;
    train_ws_on_targets(sel, &targets, t, config, on_epoch)
}

/// Adam over the selector parameters only, one step per batch of
/// precomputed targets.
pub fn train_ws_on_targets<T: Scalar>(
    sel: &mut SelectorModel<T>,
    targets: &SelectorTargets<T>,
    t: SparsityTarget,
    config: &WsTrainConfig,
    mut on_epoch: impl FnMut(&WsEpochLog),
) -> Result<Vec<WsEpochLog>> {
    if targets.is_empty() {
        return Err(Error::Config("selector training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let n = sel.candidates().len();
    if let Some(&bad) = targets.labels.iter().find(|&&l| l >= n) {
        return Err(Error::Label { label: bad, classes: n });
    }
    let ratios: Vec<f64> = (0..n).map(|i| sel.candidates().width_ratio(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = {
        let params: Vec<&Tensor<T>> = sel.named_params().into_iter().map(|(_, p)| p).collect();
        AdamState::for_params(&params, config.lr)
    };
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    let total_n = targets.len() as f64;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut acc = SelectorLossValues::default();
        let (mut expected_ratio, mut chosen_ratio) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let f = Tensor::stack(&chunk.iter().map(|&i| &targets.f_de[i]).collect::<Vec<_>>())?;
            let labels: Vec<usize> = chunk.iter().map(|&i| targets.labels[i]).collect();
            let l1: Vec<Vec<f64>> = chunk.iter().map(|&i| targets.per_width_l1[i].clone()).collect();
            let mut tape = Tape::new();
            let vars = sel.bind(&mut tape, true);
            let fv = tape.constant(f);
            let losses = selector_losses(sel, &mut tape, &vars, fv, &labels, &l1, t)?;
            let v = losses.values(&tape)?;
            if !v.total.is_finite() {
                return Err(Error::NonFinite("selector training loss"));
            }
            let w = chunk.len() as f64 / total_n;
            acc.cls += v.cls * w;
            acc.spars += v.spars * w;
            acc.select += v.select * w;
            acc.total += v.total * w;
            for d in sel.decisions(tape.value(losses.probs)) {
                expected_ratio += d.probs.iter().zip(&ratios).map(|(p, r)| p * r).sum::<f64>() / total_n;
                chosen_ratio += ratios[d.chosen_index] / total_n;
            }
            let grads = tape.backward(losses.total)?;
            let slots = vars.all();
            let mut params = sel.params_mut();
            let grads: Vec<Vec<T>> = slots
                .iter()
                .zip(params.iter())
                .map(|(v, p)| grads.get_or_zeros(*v, p.numel()))
                .collect();
            adam.step(&mut params, &grads)?;
        }
        let log = WsEpochLog {
            epoch,
            cls: acc.cls,
            spars: acc.spars,
            select: acc.select,
            total: acc.total,
            expected_ratio,
            chosen_ratio,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
