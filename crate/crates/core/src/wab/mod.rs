//! Width-adaptive backbone.
//!
//! One weight store holds every sub-network: evaluating at width `ρ` uses the
//! first `ρ` input and output channels of each adaptive convolution. The
//! degradation encoder is fixed-width; a 1×1 transform conv projects its
//! encoding onto the first `ρ` trunk channels.

mod prefix;
mod train;

pub use prefix::{corrupt_prefix_block, DECOMPOSITION_TOLERANCE, verify_prefix_decomposition, verify_prefix_decomposition_split, PrefixReport};
pub use train::{evaluate_wab_loss, sample_widths, train_wab, wab_losses, EpochLog, TrainConfig, TrainSample, WabLossValues, WabLosses};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Channels, LayerDesc, LayerGroup, ModelDesc};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Ascending width ratios ending at 1 and the maximum width `ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthCandidates {
    ratios: Vec<f64>,
    omega: usize,
    widths: Vec<usize>,
}

impl WidthCandidates {
    pub fn new(ratios: &[f64], omega: usize) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::Config("no width ratios".into()));
        }
        if ratios.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!("width ratios must ascend strictly: {ratios:?}")));
        }
        if ratios[0] <= 0.0 || *ratios.last().unwrap() != 1.0 {
            return Err(Error::Config(format!("width ratios must lie in (0, 1] and end at 1: {ratios:?}")));
        }
        let widths: Vec<usize> = ratios.iter().map(|r| (r * omega as f64).round() as usize).collect();
        if widths[0] == 0 || widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "ratios {ratios:?} at omega {omega} give widths {widths:?}"
            )));
        }
        Ok(Self {
            ratios: ratios.to_vec(),
            omega,
            widths,
        })
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn omega(&self) -> usize {
        self.omega
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn full(&self) -> usize {
        self.omega
    }

    pub fn index_of(&self, width: usize) -> Result<usize> {
        self.widths
            .iter()
            .position(|&w| w == width)
            .ok_or_else(|| Error::Width(format!("{width} is not a candidate width {:?}", self.widths)))
    }

    /// Realised ratio `ρ/ω` of candidate `index`.
    pub fn width_ratio(&self, index: usize) -> f64 {
        self.widths[index] as f64 / self.omega as f64
    }
}

/// Architecture hyper-parameters of the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WabConfig {
    pub omega: usize,
    pub ratios: Vec<f64>,
    pub blocks: usize,
    pub c_de: usize,
    pub kernel: usize,
    /// Number of degradation classes of the encoder's classifier.
    pub classes: usize,
}

impl WabConfig {
    pub fn desk() -> Self {
        Self {
            omega: 32,
            ratios: vec![0.6, 0.7, 0.8, 0.9, 1.0],
            blocks: 4,
            c_de: 8,
            kernel: 3,
            classes: 5,
        }
    }

    pub fn full() -> Self {
        Self {
            omega: 64,
            c_de: 16,
            ..Self::desk()
        }
    }

    pub fn candidates(&self) -> Result<WidthCandidates> {
        WidthCandidates::new(&self.ratios, self.omega)
    }

    /// Layer description for cost accounting, in parameter order.
    pub fn describe(&self) -> ModelDesc {
        use Channels::{Fixed, Width};
        let (k, c) = (self.kernel, self.c_de);
        let mut layers = vec![
            LayerDesc::conv("encoder.conv1", LayerGroup::Encoder, k, Fixed(IMAGE_CHANNELS), Fixed(c), true),
            LayerDesc::conv("encoder.conv2", LayerGroup::Encoder, k, Fixed(c), Fixed(c), true),
            LayerDesc::linear("encoder.classifier", LayerGroup::Encoder, c, self.classes, true),
            LayerDesc::conv("head", LayerGroup::Head, k, Fixed(IMAGE_CHANNELS), Width, true),
            LayerDesc::conv("transform", LayerGroup::Transform, 1, Fixed(c), Width, false),
        ];
        for i in 0..self.blocks {
            for j in 1..=2 {
                layers.push(LayerDesc::conv(format!("trunk.{i}.conv{j}"), LayerGroup::Trunk, k, Width, Width, true));
            }
        }
        layers.push(LayerDesc::conv("tail", LayerGroup::Tail, k, Width, Fixed(IMAGE_CHANNELS), true));
        ModelDesc {
            omega: self.omega,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.candidates()?;
        if self.kernel % 2 == 0 || self.c_de == 0 || self.classes == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd, c_de and classes positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Convolution with one full-width weight store, evaluable on any prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthAdaptiveConv<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl<T: Scalar> WidthAdaptiveConv<T> {
    fn init(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, k: usize, bias: bool, gain: f64) -> Self {
        // He-uniform on the full fan-in
        let bound = gain * (6.0 / (in_ch * k * k) as f64).sqrt();
        let weight = Tensor::from_fn(&[out_ch, in_ch, k, k], |_| T::from_f64(rng.random_range(-bound..bound)));
        Self {
            weight,
            bias: bias.then(|| Tensor::zeros(&[out_ch])),
        }
    }

    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let shape = weight.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::Dimension(format!("conv weight shape {shape:?}")));
        }
        if let Some(b) = &bias {
            if b.shape() != [shape[0]] {
                return Err(Error::Dimension(format!("bias {:?} for weight {shape:?}", b.shape())));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ConvVars {
        let mut reg = |t: &Tensor<T>| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        ConvVars {
            weight: reg(&self.weight),
            bias: self.bias.as_ref().map(reg),
        }
    }

    /// Copy with weight rows `>= out_ch`, columns `>= in_ch` and bias entries
    /// `>= out_ch` set to zero.
    pub fn zero_masked(&self, in_ch: usize, out_ch: usize) -> Self {
        let mut out = self.clone();
        let (wo, wi, k) = (self.weight.shape()[0], self.weight.shape()[1], self.weight.shape()[2]);
        let taps = k * k;
        let data = out.weight.data_mut();
        for o in 0..wo {
            for i in 0..wi {
                if o >= out_ch || i >= in_ch {
                    data[(o * wi + i) * taps..(o * wi + i + 1) * taps].fill(T::zero());
                }
            }
        }
        if let Some(b) = &mut out.bias {
            b.data_mut()[out_ch.min(wo)..].fill(T::zero());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> WidthAdaptiveConv<U> {
        WidthAdaptiveConv {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Tensor::cast),
        }
    }
}

fn conv<T: Scalar>(tape: &mut Tape<T>, vars: ConvVars, x: Var, in_ch: usize, out_ch: usize) -> Result<Var> {
    tape.conv2d_sliced(x, vars.weight, vars.bias, in_ch, out_ch)
}

/// Fixed-width residual encoder over the input image plus its degradation
/// classifier (global pool + linear to `classes` logits).
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationEncoder<T> {
    pub conv1: WidthAdaptiveConv<T>,
    pub conv2: WidthAdaptiveConv<T>,
    pub classifier_weight: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub conv1: WidthAdaptiveConv<T>,
    pub conv2: WidthAdaptiveConv<T>,
}

/// Backbone: head, encoder, transform, trunk of residual blocks, tail, and a
/// global residual connection from the input.
#[derive(Clone, Debug, PartialEq)]
pub struct WabModel<T> {
    config: WabConfig,
    candidates: WidthCandidates,
    pub encoder: DegradationEncoder<T>,
    pub head: WidthAdaptiveConv<T>,
    /// `[ω, C_de, 1, 1]`, sliced on output channels.
    pub transform: WidthAdaptiveConv<T>,
    pub trunk: Vec<ResidualBlock<T>>,
    pub tail: WidthAdaptiveConv<T>,
}

/// Tape handles of every backbone parameter.
#[derive(Clone, Debug)]
pub struct WabVars {
    enc1: ConvVars,
    enc2: ConvVars,
    cls_w: Var,
    cls_b: Var,
    head: ConvVars,
    transform: ConvVars,
    trunk: Vec<(ConvVars, ConvVars)>,
    tail: ConvVars,
}

impl WabVars {
    /// Handles in [`WabModel::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut convs = vec![self.enc1, self.enc2];
        let mut out = Vec::new();
        let push = |c: &ConvVars, out: &mut Vec<Var>| {
            out.push(c.weight);
            out.extend(c.bias);
        };
        for c in convs.drain(..) {
            push(&c, &mut out);
        }
        out.push(self.cls_w);
        out.push(self.cls_b);
        push(&self.head, &mut out);
        push(&self.transform, &mut out);
        for (a, b) in &self.trunk {
            push(a, &mut out);
            push(b, &mut out);
        }
        push(&self.tail, &mut out);
        out
    }
}

pub(crate) const IMAGE_CHANNELS: usize = 3;

impl<T: Scalar> WabModel<T> {
    pub fn new(config: WabConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let candidates = config.candidates()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, k, c_de) = (config.omega, config.kernel, config.c_de);
        let bound = (1.0 / c_de as f64).sqrt();
        let encoder = DegradationEncoder {
            conv1: WidthAdaptiveConv::init(&mut rng, c_de, IMAGE_CHANNELS, k, true, 1.0),
            conv2: WidthAdaptiveConv::init(&mut rng, c_de, c_de, k, true, 0.5),
            classifier_weight: Tensor::from_fn(&[config.classes, c_de], |_| T::from_f64(rng.random_range(-bound..bound))),
            classifier_bias: Tensor::zeros(&[config.classes]),
        };
        let head = WidthAdaptiveConv::init(&mut rng, w, IMAGE_CHANNELS, k, true, 1.0);
        let transform = WidthAdaptiveConv::init(&mut rng, w, c_de, 1, false, 0.5);
        let trunk = (0..config.blocks)
            .map(|_| ResidualBlock {
                conv1: WidthAdaptiveConv::init(&mut rng, w, w, k, true, 1.0),
                conv2: WidthAdaptiveConv::init(&mut rng, w, w, k, true, 0.1),
            })
            .collect();
        let tail = WidthAdaptiveConv::init(&mut rng, IMAGE_CHANNELS, w, k, true, 0.01);
        Ok(Self {
            config,
            candidates,
            encoder,
            head,
            transform,
            trunk,
            tail,
        })
    }

    pub fn config(&self) -> &WabConfig {
        &self.config
    }

    pub fn candidates(&self) -> &WidthCandidates {
        &self.candidates
    }

    /// Every stored tensor with a stable dotted name.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        fn conv<'a, T>(name: &str, c: &'a WidthAdaptiveConv<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
            out.push((format!("{name}.weight"), &c.weight));
            if let Some(b) = &c.bias {
                out.push((format!("{name}.bias"), b));
            }
        }
        let mut out = Vec::new();
        conv("encoder.conv1", &self.encoder.conv1, &mut out);
        conv("encoder.conv2", &self.encoder.conv2, &mut out);
        out.push(("encoder.classifier.weight".into(), &self.encoder.classifier_weight));
        out.push(("encoder.classifier.bias".into(), &self.encoder.classifier_bias));
        conv("head", &self.head, &mut out);
        conv("transform", &self.transform, &mut out);
        for (i, b) in self.trunk.iter().enumerate() {
            conv(&format!("trunk.{i}.conv1"), &b.conv1, &mut out);
            conv(&format!("trunk.{i}.conv2"), &b.conv2, &mut out);
        }
        conv("tail", &self.tail, &mut out);
        out
    }

    /// Mutable parameters in [`named_params`](Self::named_params) order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        fn conv<'a, T>(c: &'a mut WidthAdaptiveConv<T>, out: &mut Vec<&'a mut Tensor<T>>) {
            out.push(&mut c.weight);
            if let Some(b) = &mut c.bias {
                out.push(b);
            }
        }
        conv(&mut self.encoder.conv1, &mut out);
        conv(&mut self.encoder.conv2, &mut out);
        out.push(&mut self.encoder.classifier_weight);
        out.push(&mut self.encoder.classifier_bias);
        conv(&mut self.head, &mut out);
        conv(&mut self.transform, &mut out);
        for b in &mut self.trunk {
            conv(&mut b.conv1, &mut out);
            conv(&mut b.conv2, &mut out);
        }
        conv(&mut self.tail, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces every parameter from `(name, tensor)` pairs; names and shapes
    /// must match this model exactly.
    pub fn load_params(&mut self, params: Vec<(String, Tensor<T>)>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&params) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor {got_name} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        for (slot, (_, t)) in self.params_mut().into_iter().zip(params) {
            *slot = t;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> WabModel<U> {
        let cast_block = |b: &ResidualBlock<T>| ResidualBlock {
            conv1: b.conv1.cast(),
            conv2: b.conv2.cast(),
        };
        WabModel {
            config: self.config.clone(),
            candidates: self.candidates.clone(),
            encoder: DegradationEncoder {
                conv1: self.encoder.conv1.cast(),
                conv2: self.encoder.conv2.cast(),
                classifier_weight: self.encoder.classifier_weight.cast(),
                classifier_bias: self.encoder.classifier_bias.cast(),
            },
            head: self.head.cast(),
            transform: self.transform.cast(),
            trunk: self.trunk.iter().map(cast_block).collect(),
            tail: self.tail.cast(),
        }
    }

    /// Copy whose width-adaptive weights are zero outside the width-`ρ`
    /// prefix, so a full-width pass computes the width-`ρ` sub-network.
    pub fn zero_masked(&self, width: usize) -> Result<Self> {
        self.candidates.index_of(width)?;
        let mut out = self.clone();
        out.head = self.head.zero_masked(IMAGE_CHANNELS, width);
        out.transform = self.transform.zero_masked(self.config.c_de, width);
        for b in &mut out.trunk {
            b.conv1 = b.conv1.zero_masked(width, width);
            b.conv2 = b.conv2.zero_masked(width, width);
        }
        out.tail = self.tail.zero_masked(width, IMAGE_CHANNELS);
        Ok(out)
    }

    /// Registers all parameters on `tape`; frozen models bind constants so no
    /// gradient can reach them.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> WabVars {
        let enc1 = self.encoder.conv1.bind(tape, trainable);
        let enc2 = self.encoder.conv2.bind(tape, trainable);
        let (cls_w, cls_b) = if trainable {
            (tape.param(&self.encoder.classifier_weight), tape.param(&self.encoder.classifier_bias))
        } else {
            (
                tape.constant(self.encoder.classifier_weight.clone()),
                tape.constant(self.encoder.classifier_bias.clone()),
            )
        };
        WabVars {
            enc1,
            enc2,
            cls_w,
            cls_b,
            head: self.head.bind(tape, trainable),
            transform: self.transform.bind(tape, trainable),
            trunk: self
                .trunk
                .iter()
                .map(|b| (b.conv1.bind(tape, trainable), b.conv2.bind(tape, trainable)))
                .collect(),
            tail: self.tail.bind(tape, trainable),
        }
    }

    /// Degradation encoding `f_de: [B, C_de, H, W]`.
    pub fn encode(&self, tape: &mut Tape<T>, vars: &WabVars, img: Var) -> Result<Var> {
        let c_de = self.config.c_de;
        let e = conv(tape, vars.enc1, img, IMAGE_CHANNELS, c_de)?;
        let e = tape.relu(e)?;
        let r = conv(tape, vars.enc2, e, c_de, c_de)?;
        tape.add(e, r)
    }

    /// Degradation-class logits `[B, classes]` from an encoding.
    pub fn classify(&self, tape: &mut Tape<T>, vars: &WabVars, f_de: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(f_de)?;
        tape.linear(pooled, vars.cls_w, Some(vars.cls_b))
    }

    /// Restored image at `width` given a precomputed encoding.
    pub fn restore(&self, tape: &mut Tape<T>, vars: &WabVars, img: Var, f_de: Var, width: usize) -> Result<Var> {
        self.candidates.index_of(width)?;
        let h = conv(tape, vars.head, img, IMAGE_CHANNELS, width)?;
        let h = tape.relu(h)?;
        let f = conv(tape, vars.transform, f_de, self.config.c_de, width)?;
        let mut x = tape.add(h, f)?;
        for (c1, c2) in &vars.trunk {
            let y = conv(tape, *c1, x, width, width)?;
            let y = tape.relu(y)?;
            let y = conv(tape, *c2, y, width, width)?;
            x = tape.add(x, y)?;
        }
        let out = conv(tape, vars.tail, x, width, IMAGE_CHANNELS)?;
        tape.add(img, out)
    }

    /// Inference forward at `width`: `(restored, f_de)`.
    pub fn forward(&self, img: &Tensor<T>, width: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let f_de = self.encode(&mut tape, &vars, x)?;
        let restored = self.restore(&mut tape, &vars, x, f_de, width)?;
        Ok((tape.value(restored).clone(), tape.value(f_de).clone()))
    }

    /// Encoding only.
    pub fn encode_eval(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let f_de = self.encode(&mut tape, &vars, x)?;
        Ok(tape.value(f_de).clone())
    }

    /// Restoration at `width` reusing an encoding computed elsewhere.
    pub fn restore_eval(&self, img: &Tensor<T>, f_de: &Tensor<T>, width: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let f = tape.constant(f_de.clone());
        let restored = self.restore(&mut tape, &vars, x, f, width)?;
        Ok(tape.value(restored).clone())
    }

    /// Inputs seen by each trunk convolution during a width-`width` pass, with
    /// the convolution itself, for layer-wise pre-activation checks.
    pub fn trunk_layer_inputs(&self, img: &Tensor<T>, width: usize) -> Result<Vec<(WidthAdaptiveConv<T>, Tensor<T>)>> {
        self.candidates.index_of(width)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x0 = tape.constant(img.clone());
        let f_de = self.encode(&mut tape, &vars, x0)?;
        let h = conv(&mut tape, vars.head, x0, IMAGE_CHANNELS, width)?;
        let h = tape.relu(h)?;
        let f = conv(&mut tape, vars.transform, f_de, self.config.c_de, width)?;
        let mut x = tape.add(h, f)?;
        let mut out = Vec::new();
        for (block, (c1, c2)) in self.trunk.iter().zip(&vars.trunk) {
            out.push((block.conv1.clone(), tape.value(x).clone()));
            let y = conv(&mut tape, *c1, x, width, width)?;
            let y = tape.relu(y)?;
            out.push((block.conv2.clone(), tape.value(y).clone()));
            let y = conv(&mut tape, *c2, y, width, width)?;
            x = tape.add(x, y)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WabConfig {
        WabConfig {
            omega: 10,
            ratios: vec![0.6, 0.7, 0.8, 0.9, 1.0],
            blocks: 2,
            c_de: 4,
            kernel: 3,
            classes: 5,
        }
    }

    #[test]
    fn candidates_validate() {
        let c = WidthCandidates::new(&[0.6, 0.7, 0.8, 0.9, 1.0], 64).unwrap();
        assert_eq!(c.widths(), &[38, 45, 51, 58, 64]);
        assert_eq!(c.index_of(51).unwrap(), 2);
        assert!(matches!(c.index_of(50), Err(Error::Width(_))));
        assert!(WidthCandidates::new(&[0.6, 0.6, 1.0], 10).is_err());
        assert!(WidthCandidates::new(&[0.5, 0.9], 10).is_err());
        assert!(WidthCandidates::new(&[0.0, 1.0], 10).is_err());
        assert!(WidthCandidates::new(&[0.01, 1.0], 10).is_err());
    }

    #[test]
    fn zero_body_returns_input() {
        let mut m = WabModel::<f64>::new(tiny(), 3).unwrap();
        for b in &mut m.trunk {
            b.conv1.weight.data_mut().fill(0.0);
            b.conv2.weight.data_mut().fill(0.0);
        }
        m.tail.weight.data_mut().fill(0.0);
        let img = crate::degrade::synth_clean(1, 8, 8).unwrap().to_tensor::<f64>();
        for &w in m.candidates().widths() {
            let (out, _) = m.forward(&img, w).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn non_candidate_width_is_rejected() {
        let m = WabModel::<f64>::new(tiny(), 3).unwrap();
        let img = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(matches!(m.forward(&img, 5), Err(Error::Width(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = WabModel::<f32>::new(tiny(), 4).unwrap();
        let img = crate::degrade::synth_clean(2, 8, 8).unwrap().to_tensor::<f32>();
        assert_eq!(m.forward(&img, 8).unwrap(), m.forward(&img, 8).unwrap());
        assert_eq!(WabModel::<f32>::new(tiny(), 4).unwrap(), m);
    }

    #[test]
    fn load_params_round_trips_and_checks_names() {
        let a = WabModel::<f32>::new(tiny(), 1).unwrap();
        let mut b = WabModel::<f32>::new(tiny(), 2).unwrap();
        let params: Vec<(String, Tensor<f32>)> =
            a.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        b.load_params(params.clone()).unwrap();
        assert_eq!(a, b);
        let mut wrong = params;
        wrong.swap(0, 1);
        assert!(b.load_params(wrong).is_err());
    }

    #[test]
    fn param_count_is_width_independent_store() {
        let m = WabModel::<f32>::new(tiny(), 1).unwrap();
        let (w, c, k) = (10, 4, 9);
        let expected = (c * 3 * k + c) + (c * c * k + c) + (5 * c + 5) // encoder
            + (w * 3 * k + w) + (w * c) // head, transform
            + 2 * 2 * (w * w * k + w) // trunk
            + (3 * w * k + 3); // tail
        assert_eq!(m.param_count(), expected);
    }
}
