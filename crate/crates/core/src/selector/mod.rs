//! Width selector: maps a degradation encoding to a distribution over the
//! backbone's width candidates and routes each image to one sub-network.
//!
//! Two branches read the same encoding `f_de`:
//!
//! * task branch: a trainable residual block, global pooling and a linear
//!   head `ξ₁` producing `n` logits (also trained as a task classifier);
//! * sample branch: global pooling, two linear layers `γ₁`, `γ₂` and a linear
//!   head `ξ₂`.
//!
//! The decision logits are the sum of both heads. Training only ever sees the
//! soft probabilities; inference takes the argmax, resolving ties toward the
//! smaller width.

mod train;

pub use train::{precompute_targets, train_ws, train_ws_on_targets, SelectorTargets, WsEpochLog, WsTrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{count_flops, Channels, LayerDesc, LayerGroup, ModelDesc};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::wab::{ConvVars, WabConfig, WabModel, WidthAdaptiveConv, WidthCandidates};

/// Desired mean width ratio, within `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityTarget(f64);

impl SparsityTarget {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("sparsity target {t} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub omega: usize,
    pub ratios: Vec<f64>,
    pub c_de: usize,
    pub kernel: usize,
    /// Number of task labels; must equal the number of width candidates.
    pub classes: usize,
}

impl SelectorConfig {
    pub fn for_backbone(wab: &WabConfig) -> Self {
        Self {
            omega: wab.omega,
            ratios: wab.ratios.clone(),
            c_de: wab.c_de,
            kernel: wab.kernel,
            classes: wab.classes,
        }
    }

    pub fn validate(&self) -> Result<WidthCandidates> {
        let candidates = WidthCandidates::new(&self.ratios, self.omega)?;
        if self.classes != candidates.len() {
            return Err(Error::Config(format!(
                "the task head doubles as the width head: {} task classes but {} width candidates",
                self.classes,
                candidates.len()
            )));
        }
        if self.kernel % 2 == 0 || self.c_de == 0 {
            return Err(Error::Config(format!("kernel must be odd and c_de positive: {self:?}")));
        }
        Ok(candidates)
    }

    /// Cost description; every layer is width-independent.
    pub fn describe(&self) -> ModelDesc {
        let (c, n, k) = (self.c_de, self.ratios.len(), self.kernel);
        let g = LayerGroup::Selector;
        ModelDesc {
            omega: self.omega,
            layers: vec![
                LayerDesc::conv("selector.phi.conv1", g, k, Channels::Fixed(c), Channels::Fixed(c), true),
                LayerDesc::conv("selector.phi.conv2", g, k, Channels::Fixed(c), Channels::Fixed(c), true),
                LayerDesc::linear("selector.xi1", g, c, n, true),
                LayerDesc::linear("selector.gamma1", g, c, c, true),
                LayerDesc::linear("selector.gamma2", g, c, c, true),
                LayerDesc::linear("selector.xi2", g, c, n, true),
            ],
        }
    }
}

/// Lists every field on which the two configurations disagree.
pub fn check_compatible(wab: &WabConfig, sel: &SelectorConfig) -> Result<()> {
    let mut mismatched = Vec::new();
    if wab.omega != sel.omega {
        mismatched.push(format!("omega: backbone {} vs selector {}", wab.omega, sel.omega));
    }
    if wab.ratios != sel.ratios {
        mismatched.push(format!("ratios: backbone {:?} vs selector {:?}", wab.ratios, sel.ratios));
    }
    if wab.c_de != sel.c_de {
        mismatched.push(format!("c_de: backbone {} vs selector {}", wab.c_de, sel.c_de));
    }
    if wab.classes != sel.classes {
        mismatched.push(format!("classes: backbone {} vs selector {}", wab.classes, sel.classes));
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(Error::Compatibility(mismatched))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[d_out, d_in], |_| T::from_f64(rng.random_range(-bound..bound))),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> (Var, Var) {
        if trainable {
            (tape.param(&self.weight), tape.param(&self.bias))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorModel<T> {
    config: SelectorConfig,
    candidates: WidthCandidates,
    pub phi_conv1: WidthAdaptiveConv<T>,
    pub phi_conv2: WidthAdaptiveConv<T>,
    pub xi1: Dense<T>,
    pub gamma1: Dense<T>,
    pub gamma2: Dense<T>,
    pub xi2: Dense<T>,
}

#[derive(Clone, Debug)]
pub struct SelectorVars {
    phi1: ConvVars,
    phi2: ConvVars,
    xi1: (Var, Var),
    gamma1: (Var, Var),
    gamma2: (Var, Var),
    xi2: (Var, Var),
}

impl SelectorVars {
    /// Handles in [`SelectorModel::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for c in [self.phi1, self.phi2] {
            out.push(c.weight);
            out.extend(c.bias);
        }
        for (w, b) in [self.xi1, self.gamma1, self.gamma2, self.xi2] {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Tape nodes of one selector pass.
#[derive(Clone, Copy, Debug)]
pub struct SelectorOutputs {
    pub task_logits: Var,
    pub decision_logits: Var,
    pub probs: Var,
}

/// Outcome for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorDecision {
    pub probs: Vec<f64>,
    pub chosen_index: usize,
    pub chosen_width: usize,
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax_smallest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> SelectorModel<T> {
    pub fn new(config: SelectorConfig, seed: u64) -> Result<Self> {
        let candidates = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, n, k) = (config.c_de, candidates.len(), config.kernel);
        let conv = |rng: &mut ChaCha8Rng, gain: f64| {
            let bound = gain * (6.0 / (c * k * k) as f64).sqrt();
            WidthAdaptiveConv::new(
                Tensor::from_fn(&[c, c, k, k], |_| T::from_f64(rng.random_range(-bound..bound))),
                Some(Tensor::zeros(&[c])),
            )
        };
        Ok(Self {
            phi_conv1: conv(&mut rng, 1.0)?,
            phi_conv2: conv(&mut rng, 0.1)?,
            xi1: Dense::init(&mut rng, c, n),
            gamma1: Dense::init(&mut rng, c, c),
            gamma2: Dense::init(&mut rng, c, c),
            xi2: Dense::init(&mut rng, c, n),
            config,
            candidates,
        })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn candidates(&self) -> &WidthCandidates {
        &self.candidates
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        for (name, c) in [("phi.conv1", &self.phi_conv1), ("phi.conv2", &self.phi_conv2)] {
            out.push((format!("selector.{name}.weight"), &c.weight));
            if let Some(b) = &c.bias {
                out.push((format!("selector.{name}.bias"), b));
            }
        }
        for (name, d) in [("xi1", &self.xi1), ("gamma1", &self.gamma1), ("gamma2", &self.gamma2), ("xi2", &self.xi2)] {
            out.push((format!("selector.{name}.weight"), &d.weight));
            out.push((format!("selector.{name}.bias"), &d.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for c in [&mut self.phi_conv1, &mut self.phi_conv2] {
            out.push(&mut c.weight);
            if let Some(b) = &mut c.bias {
                out.push(b);
            }
        }
        for d in [&mut self.xi1, &mut self.gamma1, &mut self.gamma2, &mut self.xi2] {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces every parameter from `(name, tensor)` pairs in
    /// [`named_params`](Self::named_params) order.
    pub fn load_params(&mut self, params: Vec<(String, Tensor<T>)>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != params.len() {
            return Err(Error::Config(format!("expected {} tensors, got {}", expected.len(), params.len())));
        }
        for ((name, shape), (got, t)) in expected.iter().zip(&params) {
            if name != got || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!("tensor {got} {:?} does not match {name} {shape:?}", t.shape())));
            }
        }
        for (slot, (_, t)) in self.params_mut().into_iter().zip(params) {
            *slot = t;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> SelectorVars {
        SelectorVars {
            phi1: self.phi_conv1.bind(tape, trainable),
            phi2: self.phi_conv2.bind(tape, trainable),
            xi1: self.xi1.bind(tape, trainable),
            gamma1: self.gamma1.bind(tape, trainable),
            gamma2: self.gamma2.bind(tape, trainable),
            xi2: self.xi2.bind(tape, trainable),
        }
    }

    /// Builds both branches over `f_de: [B, C_de, H, W]`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, vars: &SelectorVars, f_de: Var) -> Result<SelectorOutputs> {
        let c = self.config.c_de;
        let shape = tape.value(f_de).shape();
        if shape.len() != 4 || shape[1] != c {
            return Err(Error::Dimension(format!("encoding {shape:?} does not have {c} channels")));
        }
        // task branch
        let r = tape.conv2d_sliced(f_de, vars.phi1.weight, vars.phi1.bias, c, c)?;
        let r = tape.relu(r)?;
        let r = tape.conv2d_sliced(r, vars.phi2.weight, vars.phi2.bias, c, c)?;
        let f_task = tape.add(f_de, r)?;
        let f_task = tape.global_avg_pool(f_task)?;
        let task_logits = tape.linear(f_task, vars.xi1.0, Some(vars.xi1.1))?;
        // sample branch
        let pooled = tape.global_avg_pool(f_de)?;
        let s = tape.linear(pooled, vars.gamma1.0, Some(vars.gamma1.1))?;
        let s = tape.linear(s, vars.gamma2.0, Some(vars.gamma2.1))?;
        let sample_logits = tape.linear(s, vars.xi2.0, Some(vars.xi2.1))?;

        let decision_logits = tape.add(task_logits, sample_logits)?;
        let probs = tape.softmax(decision_logits)?;
        Ok(SelectorOutputs {
            task_logits,
            decision_logits,
            probs,
        })
    }

    /// Per-image decisions from decision probabilities `[B, n]`.
    pub fn decisions(&self, probs: &Tensor<T>) -> Vec<SelectorDecision> {
        let n = self.candidates.len();
        probs
            .data()
            .chunks(n)
            .map(|row| {
                let p: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                let chosen_index = argmax_smallest(&p);
                SelectorDecision {
                    chosen_width: self.candidates.widths()[chosen_index],
                    chosen_index,
                    probs: p,
                }
            })
            .collect()
    }
}

/// Inference pass over a batch of encodings.
pub fn selector_forward<T: Scalar>(sel: &SelectorModel<T>, f_de: &Tensor<T>) -> Result<Vec<SelectorDecision>> {
    let mut tape = Tape::new();
    let vars = sel.bind(&mut tape, false);
    let f = tape.constant(f_de.clone());
    let out = sel.forward_tape(&mut tape, &vars, f)?;
    Ok(sel.decisions(tape.value(out.probs)))
}

/// Loss nodes of one selector batch.
#[derive(Clone, Copy, Debug)]
pub struct SelectorLosses {
    pub cls: Var,
    pub spars: Var,
    pub select: Var,
    pub total: Var,
    pub probs: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectorLossValues {
    pub cls: f64,
    pub spars: f64,
    pub select: f64,
    pub total: f64,
}

impl SelectorLosses {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> Result<SelectorLossValues> {
        let get = |v: Var| tape.value(v).item().map(Scalar::as_f64);
        Ok(SelectorLossValues {
            cls: get(self.cls)?,
            spars: get(self.spars)?,
            select: get(self.select)?,
            total: get(self.total)?,
        })
    }
}

/// Batch mean of `(Σ_i p_i·r_i − t)²` for probabilities `[m, n]`.
pub fn sparsity_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, ratios: &[f64], t: SparsityTarget) -> Result<Var> {
    let m = tape.value(probs).shape()[0];
    let r = tape.constant(Tensor::new(&[1, ratios.len()], ratios.iter().map(|&v| T::from_f64(v)).collect())?);
    let expected = tape.linear(probs, r, None)?;
    let target = tape.constant(Tensor::full(&[m, 1], T::from_f64(t.value())));
    let gap = tape.sub(expected, target)?;
    let sq = tape.square(gap)?;
    tape.mean(sq)
}

/// `(1/(m·n))·Σ_j Σ_i p_ij·L_ij` with constant per-width losses `L: [m][n]`.
pub fn selection_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, per_width_l1: &[Vec<f64>]) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    let (m, n) = (shape[0], shape[1]);
    if per_width_l1.len() != m || per_width_l1.iter().any(|row| row.len() != n) {
        return Err(Error::Dimension(format!("per-width losses do not form a {m}x{n} matrix")));
    }
    let l = tape.constant(Tensor::new(
        &[m, n],
        per_width_l1.iter().flatten().map(|&v| T::from_f64(v)).collect(),
    )?);
    let weighted = tape.mul(probs, l)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / (m * n) as f64)
}

/// Classification, sparsity and selection losses for one batch. The
/// encoding is detached first, so nothing upstream of the selector can
/// receive gradient.
pub fn selector_losses<T: Scalar>(
    sel: &SelectorModel<T>,
    tape: &mut Tape<T>,
    vars: &SelectorVars,
    f_de: Var,
    task_labels: &[usize],
    per_width_l1: &[Vec<f64>],
    t: SparsityTarget,
) -> Result<SelectorLosses> {
    let n = sel.candidates.len();
    if sel.config.classes != n {
        return Err(Error::Config(format!("{} task classes vs {n} width candidates", sel.config.classes)));
    }
    let f = tape.detach(f_de);
    let out = sel.forward_tape(tape, vars, f)?;
    let cls = tape.cross_entropy(out.task_logits, task_labels)?;
    let ratios: Vec<f64> = (0..n).map(|i| sel.candidates.width_ratio(i)).collect();
    let spars = sparsity_loss(tape, out.probs, &ratios, t)?;
    let select = selection_loss(tape, out.probs, per_width_l1)?;
    let partial = tape.add(cls, spars)?;
    let total = tape.add(partial, select)?;
    Ok(SelectorLosses {
        cls,
        spars,
        select,
        total,
        probs: out.probs,
    })
}

/// Restoration of one image after routing.
#[derive(Clone, Debug, PartialEq)]
pub struct Routed<T> {
    pub restored: Tensor<T>,
    pub decision: SelectorDecision,
    /// Backbone plus selector FLOPs for this image.
    pub flops: u64,
}

/// Encodes each image once, picks its width and restores it at that width.
/// `force_width` bypasses the selector's choice (the selector still runs).
pub fn route_and_restore<T: Scalar>(
    wab: &WabModel<T>,
    sel: &SelectorModel<T>,
    img: &Tensor<T>,
    force_width: Option<usize>,
) -> Result<Vec<Routed<T>>> {
    check_compatible(wab.config(), sel.config())?;
    let shape = img.shape();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("image batch shape {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    let desc = wab.config().describe().merged(&sel.config().describe())?;
    let f_de = wab.encode_eval(img)?;
    let mut decisions = selector_forward(sel, &f_de)?;
    let mut out = Vec::with_capacity(decisions.len());
    for (i, decision) in decisions.drain(..).enumerate() {
        let width = match force_width {
            Some(fw) => {
                wab.candidates().index_of(fw)?;
                fw
            }
            None => decision.chosen_width,
        };
        let restored = wab.restore_eval(&img.batch_item(i)?, &f_de.batch_item(i)?, width)?;
        out.push(Routed {
            restored,
            flops: count_flops(&desc, width, h, w)?.flops,
            decision: SelectorDecision {
                chosen_index: wab.candidates().index_of(width)?,
                chosen_width: width,
                ..decision
            },
        });
    }
    Ok(out)
}
