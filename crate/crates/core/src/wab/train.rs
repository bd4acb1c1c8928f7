//! Backbone objectives and the training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{WabModel, WabVars, WidthCandidates};
use crate::error::{Error, Result};
use crate::tensor::{AdamState, Scalar, Tape, Tensor, Var};

/// One degraded/clean pair, each `[1, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T> {
    pub degraded: Tensor<T>,
    pub clean: Tensor<T>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub distill: f64,
    pub de: f64,
    pub total: f64,
    pub seconds: f64,
}

/// Loss nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct WabLosses {
    pub recon: Var,
    pub distill: Var,
    pub de: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WabLossValues {
    pub recon: f64,
    pub distill: f64,
    pub de: f64,
    pub total: f64,
}

impl WabLosses {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> Result<WabLossValues> {
        let get = |v: Var| tape.value(v).item().map(Scalar::as_f64);
        Ok(WabLossValues {
            recon: get(self.recon)?,
            distill: get(self.distill)?,
            de: get(self.de)?,
            total: get(self.total)?,
        })
    }
}

/// Draws a sub-width uniformly from all but the largest candidate, paired
/// with the full width.
pub fn sample_widths(rng: &mut impl Rng, candidates: &WidthCandidates) -> Result<(usize, usize)> {
    let n = candidates.len();
    if n < 2 {
        return Err(Error::Config(format!("width sampling needs two candidates, have {n}")));
    }
    let w = candidates.widths();
    Ok((w[rng.random_range(0..n - 1)], w[n - 1]))
}

/// Builds reconstruction, distillation and degradation-classification losses
/// for one batch at sub-width `rho`. The full-width output acts as a teacher
/// and is detached inside the distillation term.
pub fn wab_losses<T: Scalar>(
    model: &WabModel<T>,
    tape: &mut Tape<T>,
    vars: &WabVars,
    img: Var,
    clean: Var,
    labels: &[usize],
    rho: usize,
) -> Result<WabLosses> {
    let full = model.candidates().full();
    let f_de = model.encode(tape, vars, img)?;
    let sub = model.restore(tape, vars, img, f_de, rho)?;
    let teacher = model.restore(tape, vars, img, f_de, full)?;
    let l_sub = tape.l1_loss(sub, clean)?;
    let l_full = tape.l1_loss(teacher, clean)?;
    let recon = tape.add(l_sub, l_full)?;
    let frozen = tape.detach(teacher);
    let distill = tape.l1_loss(sub, frozen)?;
    let logits = model.classify(tape, vars, f_de)?;
    let de = tape.cross_entropy(logits, labels)?;
    let partial = tape.add(recon, distill)?;
    let total = tape.add(partial, de)?;
    Ok(WabLosses {
        recon,
        distill,
        de,
        total,
    })
}

fn batch<T: Scalar>(data: &[TrainSample<T>], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
    let deg: Vec<&Tensor<T>> = idx.iter().map(|&i| &data[i].degraded).collect();
    let clean: Vec<&Tensor<T>> = idx.iter().map(|&i| &data[i].clean).collect();
    Ok((
        Tensor::stack(&deg)?,
        Tensor::stack(&clean)?,
        idx.iter().map(|&i| data[i].label).collect(),
    ))
}

fn check_dataset<T>(data: &[TrainSample<T>], batch_size: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(())
}

fn accumulate(acc: &mut WabLossValues, v: &WabLossValues, weight: f64) {
    acc.recon += v.recon * weight;
    acc.distill += v.distill * weight;
    acc.de += v.de * weight;
    acc.total += v.total * weight;
}

/// Sample-weighted mean losses over `data` in fixed order, with sub-widths
/// drawn per batch from a generator seeded by `seed`. No parameters change.
pub fn evaluate_wab_loss<T: Scalar>(
    model: &WabModel<T>,
    data: &[TrainSample<T>],
    batch_size: usize,
    seed: u64,
) -> Result<WabLossValues> {
    check_dataset(data, batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = (0..data.len()).collect();
    let mut acc = WabLossValues::default();
    for chunk in order.chunks(batch_size) {
        let (rho, _) = sample_widths(&mut rng, model.candidates())?;
        let (x, y, labels) = batch(data, chunk)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let losses = wab_losses(model, &mut tape, &vars, xv, yv, &labels, rho)?;
        accumulate(&mut acc, &losses.values(&tape)?, chunk.len() as f64 / data.len() as f64);
    }
    Ok(acc)
}

/// Trains every backbone parameter with Adam: each batch draws one sub-width,
/// evaluates the combined loss and takes one step. `on_epoch` sees each log
/// entry as it is produced. Deterministic given `config.seed`.
pub fn train_wab<T: Scalar>(
    model: &mut WabModel<T>,
    config: &TrainConfig,
    data: &[TrainSample<T>],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    check_dataset(data, config.batch_size)?;
    let classes = model.config().classes;
    if let Some(bad) = data.iter().find(|s| s.label >= classes) {
        return Err(Error::Label {
            label: bad.label,
            classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = {
        let params: Vec<&Tensor<T>> = model.named_params().into_iter().map(|(_, t)| t).collect();
        AdamState::for_params(&params, config.lr)
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut acc = WabLossValues::default();
        for chunk in order.chunks(config.batch_size) {
            let (rho, _) = sample_widths(&mut rng, model.candidates())?;
            let (x, y, labels) = batch(data, chunk)?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let losses = wab_losses(model, &mut tape, &vars, xv, yv, &labels, rho)?;
            let values = losses.values(&tape)?;
            if !values.total.is_finite() {
                return Err(Error::NonFinite("backbone training loss"));
            }
            accumulate(&mut acc, &values, chunk.len() as f64 / data.len() as f64);
            let grads = tape.backward(losses.total)?;
            let slots = vars.all();
            let mut params = model.params_mut();
            let grads: Vec<Vec<T>> = slots
                .iter()
                .zip(params.iter())
                .map(|(v, p)| grads.get_or_zeros(*v, p.numel()))
                .collect();
            adam.step(&mut params, &grads)?;
        }
        let log = EpochLog {
            epoch,
            recon: acc.recon,
            distill: acc.distill,
            de: acc.de,
            total: acc.total,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
