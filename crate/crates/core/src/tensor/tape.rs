//! Reverse-mode tape.
//!
//! Every op appends one node; node indices are therefore already a
//! topological order, and [`Tape::backward`] walks them once in reverse.

use super::conv::{self, ConvGeom};
use super::{dims2, dims4, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Sum(Var),
    Mean(Var),
    AvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L1(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed differentiable ops.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    strict: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// In strict mode every op fails with [`Error::NonFinite`] if its output
    /// contains a NaN or an infinity.
    pub fn strict() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            value: Tensor { grad: None, ..t },
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Gradient-free copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.strict && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Same-size convolution with the whole stored weight.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let [wo, wi, k, _] = dims4(self.value(w).shape())?;
        if pad != k / 2 {
            return Err(Error::Dimension(format!(
                "padding {pad} does not keep size for kernel {k}"
            )));
        }
        self.conv2d_sliced(x, w, b, wi, wo)
    }

    /// Convolution with the sub-block `weight[0:out_ch, 0:in_ch]` and
    /// `bias[0:out_ch]`. Gradients reach only that sub-block.
    pub fn conv2d_sliced(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Var> {
        let [batch, c, height, width] = dims4(self.value(x).shape())?;
        let [wo, wi, k, k2] = dims4(self.value(w).shape())?;
        if k != k2 || k % 2 == 0 {
            return Err(Error::Dimension(format!(
                "kernel must be square and odd, got {k}x{k2}"
            )));
        }
        if in_ch == 0 || in_ch > wi || out_ch == 0 || out_ch > wo {
            return Err(Error::Width(format!(
                "slice {out_ch}x{in_ch} outside stored weight {wo}x{wi}"
            )));
        }
        if c != in_ch {
            return Err(Error::Dimension(format!(
                "input has {c} channels, slice expects {in_ch}"
            )));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs.len() != 1 || bs[0] != wo {
                return Err(Error::Dimension(format!(
                    "bias shape {bs:?} for {wo} output channels"
                )));
            }
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            out_ch,
            height,
            width,
            kernel: k,
            stored_in: wi,
        };
        let mut out = vec![T::zero(); batch * out_ch * height * width];
        conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::new(&[batch, out_ch, height, width], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv { x, w, b, geom }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape(),
            src.data().iter().map(|&v| v.max(T::zero())).collect(),
        )?;
        self.push("relu", value, Op::Relu(x), &[x])
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        Tensor::new(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&v| v * f).collect())?;
        self.push("scale", value, Op::Scale(x, f), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&v| v * v).collect())?;
        self.push("square", value, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let s: T = src.data().iter().copied().sum();
        let m = s / T::from_f64(src.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// `[B, C, H, W] -> [B, C]`, mean over each plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let [b, c, h, w] = dims4(src.shape())?;
        let plane = h * w;
        let denom = T::from_f64(plane as f64);
        let data = src
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::new(&[b, c], data)?;
        self.push("global_avg_pool", value, Op::AvgPool(x), &[x])
    }

    /// `y = x·Wᵀ + b` with `x: [B, din]`, `W: [dout, din]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, din] = dims2(self.value(x).shape())?;
        let [dout, win] = dims2(self.value(w).shape())?;
        if din != win {
            return Err(Error::Dimension(format!(
                "linear input width {din} vs weight {dout}x{win}"
            )));
        }
        let mut out = vec![T::zero(); batch * dout];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [dout] {
                return Err(Error::Dimension(format!(
                    "bias shape {:?} for {dout} outputs",
                    bias.shape()
                )));
            }
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias.data());
            }
        }
        // SAFETY: x is batch x din, w^T is din x dout, out is batch x dout.
        unsafe {
            T::gemm_raw(
                batch,
                din,
                dout,
                self.value(x).data().as_ptr(),
                din as isize,
                1,
                self.value(w).data().as_ptr(),
                1,
                din as isize,
                T::one(),
                out.as_mut_ptr(),
                dout as isize,
                1,
            );
        }
        let value = Tensor::new(&[batch, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, Op::Linear { x, w, b }, &inputs)
    }

    /// Row-wise softmax of `[B, n]` logits, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let [_, n] = dims2(src.shape())?;
        let mut data = Vec::with_capacity(src.numel());
        for row in src.data().chunks_exact(n) {
            softmax_row(row, &mut data);
        }
        let value = Tensor::new(src.shape(), data)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let src = self.value(logits);
        let [b, n] = dims2(src.shape())?;
        if labels.len() != b {
            return Err(Error::Dimension(format!(
                "{} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Label { label, classes: n });
        }
        let mut probs = Vec::with_capacity(b * n);
        let mut total = T::zero();
        for (row, &label) in src.data().chunks_exact(n).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[label]);
            softmax_row(row, &mut probs);
        }
        let loss = total / T::from_f64(b as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.zip_same(a, b, |x, y| (x - y).abs())?;
        let n = T::from_f64(diff.numel() as f64);
        let loss = diff.data().iter().copied().sum::<T>() / n;
        self.push("l1_loss", Tensor::scalar(loss), Op::L1(a, b), &[a, b])
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let mut dx = self.wants(*x).then(|| vec![T::zero(); self.value(*x).numel()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                let mut db = b
                    .filter(|b| self.wants(*b))
                    .map(|b| vec![T::zero(); self.value(b).numel()]);
                conv::backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    accumulate(grads, *x, &d);
                }
                if let Some(d) = dw {
                    accumulate(grads, *w, &d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    accumulate(grads, *b, &d);
                }
            }
            Op::Relu(x) => {
                let d: Vec<T> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let d: Vec<T> = g.iter().map(|&v| -v).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<T> = g.iter().zip(self.value(*b).data()).map(|(&u, &v)| u * v).collect();
                    accumulate(grads, *a, &d);
                }
                if self.wants(*b) {
                    let d: Vec<T> = g.iter().zip(self.value(*a).data()).map(|(&u, &v)| u * v).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Scale(x, f) => {
                let d: Vec<T> = g.iter().map(|&v| v * *f).collect();
                accumulate(grads, *x, &d);
            }
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                let d: Vec<T> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&u, &v)| two * v * u)
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).numel()];
                accumulate(grads, *x, &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let d = vec![g[0] / T::from_f64(n as f64); n];
                accumulate(grads, *x, &d);
            }
            Op::AvgPool(x) => {
                let src = self.value(*x);
                let plane = src.shape()[2] * src.shape()[3];
                let denom = T::from_f64(plane as f64);
                let mut d = Vec::with_capacity(src.numel());
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv / denom, plane));
                }
                accumulate(grads, *x, &d);
            }
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, g, grads),
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(n).zip(g.chunks_exact(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                accumulate(grads, *x, &d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = self.value(*logits).shape()[1];
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let mut d = probs.clone();
                for (row, &label) in d.chunks_exact_mut(n).zip(labels) {
                    row[label] = row[label] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                accumulate(grads, *logits, &d);
            }
            Op::L1(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = g[0] / T::from_f64(ta.numel() as f64);
                let d: Vec<T> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    let neg: Vec<T> = d.iter().map(|&v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, &d);
                }
            }
        }
    }

    fn linear_backward(&self, x: Var, w: Var, b: Option<Var>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let [batch, din] = [self.value(x).shape()[0], self.value(x).shape()[1]];
        let dout = self.value(w).shape()[0];
        if self.wants(x) {
            let mut d = vec![T::zero(); batch * din];
            // SAFETY: g is batch x dout, w is dout x din.
            unsafe {
                T::gemm_raw(
                    batch,
                    dout,
                    din,
                    g.as_ptr(),
                    dout as isize,
                    1,
                    self.value(w).data().as_ptr(),
                    din as isize,
                    1,
                    T::zero(),
                    d.as_mut_ptr(),
                    din as isize,
                    1,
                );
            }
            accumulate(grads, x, &d);
        }
        if self.wants(w) {
            let mut d = vec![T::zero(); dout * din];
            // SAFETY: gᵀ is dout x batch, x is batch x din.
            unsafe {
                T::gemm_raw(
                    dout,
                    batch,
                    din,
                    g.as_ptr(),
                    1,
                    dout as isize,
                    self.value(x).data().as_ptr(),
                    din as isize,
                    1,
                    T::zero(),
                    d.as_mut_ptr(),
                    din as isize,
                    1,
                );
            }
            accumulate(grads, w, &d);
        }
        if let Some(b) = b.filter(|b| self.wants(*b)) {
            let mut d = vec![T::zero(); dout];
            for row in g.chunks_exact(dout) {
                d.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
            }
            accumulate(grads, b, &d);
        }
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let start = out.len();
    out.extend(row.iter().map(|&v| (v - max).exp()));
    let z: T = out[start..].iter().copied().sum();
    out[start..].iter_mut().for_each(|v| *v = *v / z);
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: &[T]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(d).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// Result of [`Tape::backward`]: one optional gradient buffer per node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_single_pixel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[3.0]));
        let b = tape.constant(t(&[1], &[0.5]));
        let y = tape.conv2d(x, w, Some(b), 0).unwrap();
        assert_eq!(tape.value(y).data(), &[6.5]);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let input = Tensor::<f64>::from_fn(&[1, 1, 4, 5], |i| i as f64 * 0.3 - 1.0);
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let x = tape.constant(input.clone());
        let w = tape.constant(t(&[1, 1, 3, 3], &kernel));
        let y = tape.conv2d(x, w, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), input.data());
    }

    #[test]
    fn conv_rejects_bad_padding_and_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None, 1), Err(Error::Dimension(_))));
        assert!(matches!(tape.conv2d(x, w, None, 0), Err(Error::Dimension(_))));
        assert!(matches!(
            tape.conv2d_sliced(x, w, None, 2, 5),
            Err(Error::Width(_))
        ));
        assert!(matches!(
            tape.conv2d_sliced(x, w, None, 4, 2),
            Err(Error::Width(_))
        ));
        assert!(tape.conv2d_sliced(x, w, None, 2, 2).is_ok());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn avg_pool_plane_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2]);
        assert_eq!(tape.value(y).data(), &[2.5, 7.0]);
    }

    #[test]
    fn linear_hand_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2], &[0.0, 1.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 8.0]);

        let bad = tape.constant(t(&[3, 3], &[0.0; 9]));
        assert!(matches!(tape.linear(x, bad, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_known_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1f64.ln(), 2f64.ln(), 3f64.ln(), 0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        for (got, want) in d.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        for v in &d[3..] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 5]));
        let l = tape.cross_entropy(x, &[2]).unwrap();
        assert!((tape.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 5];
        logits[3] = 1000.0;
        let x = tape.constant(t(&[1, 5], &logits));
        let l = tape.cross_entropy(x, &[3]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);

        assert_eq!(
            tape.cross_entropy(x, &[5]).unwrap_err(),
            Error::Label { label: 5, classes: 5 }
        );
    }

    #[test]
    fn l1_values_and_shape_check() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[0.9, 1.9, 2.9, 3.9]));
        let same = tape.l1_loss(a, a).unwrap();
        let off = tape.l1_loss(a, b).unwrap();
        assert_eq!(tape.value(same).item().unwrap(), 0.0);
        assert!((tape.value(off).item().unwrap() - 0.1).abs() < 1e-12);
        let c = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.l1_loss(a, c), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_fn(&[2, 3], |i| i as f64).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn two_paths_accumulate() {
        // loss = sum(x*x + 3x) -> d/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0).unwrap();
        let y = tape.add(sq, lin).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn strict_mode_flags_non_finite() {
        let mut tape = Tape::strict();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert_eq!(tape.square(x).unwrap_err(), Error::NonFinite("square"));
        let mut lax = Tape::new();
        let x = lax.constant(t(&[1], &[f64::MAX]));
        assert!(lax.square(x).is_ok());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let c = tape.detach(x);
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
        assert!(g.get(c).is_none());
    }
}
