//! Central finite-difference checks of the tape's analytic gradients.
//!
//! The checker only ever calls the forward closure; the numerical side never
//! touches the backward code it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of checking one op over several random instances.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic and central-difference gradients of the scalar built by
/// `f` with respect to every element of every input. Returns the worst
/// relative error.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::strict();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::strict();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}

/// Uniform values in `[-1, 1]` kept at least `margin` away from zero, so that
/// kinks at zero stay outside the finite-difference stencil.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Weighted sum `Σ r ⊙ x` with a fixed random `r`, turning any tensor output
/// into a scalar with a non-trivial upstream gradient.
fn project(tape: &mut Tape<f64>, x: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let y = tape.mul(x, r)?;
    tape.sum(y)
}

/// Names of all ops covered by [`check_op`].
pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_sliced",
    "relu",
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "sum",
    "mean",
    "global_avg_pool",
    "linear",
    "softmax",
    "cross_entropy",
    "l1_loss",
];

/// Runs `instances` random gradient checks of one op.
pub fn check_op(op: &'static str, seed: u64, instances: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let err = match op {
            "conv2d" => {
                let b = rng.random_range(1..3);
                let ci = rng.random_range(1..4);
                let co = rng.random_range(1..4);
                let h = rng.random_range(2..5);
                let x = random_tensor(&mut rng, &[b, ci, h, h + 1], 0.0);
                let w = random_tensor(&mut rng, &[co, ci, 3, 3], 0.0);
                let bias = random_tensor(&mut rng, &[co], 0.0);
                let r = random_tensor(&mut rng, &[b, co, h, h + 1], 0.0);
                check_gradients(&[x, w, bias], |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 1)?;
                    project(t, y, &r)
                })?
            }
            "conv2d_sliced" => {
                let (wo, wi) = (rng.random_range(2..5), rng.random_range(2..5));
                let (ro, ri) = (rng.random_range(1..=wo), rng.random_range(1..=wi));
                let k = if rng.random_bool(0.5) { 1 } else { 3 };
                let x = random_tensor(&mut rng, &[2, ri, 3, 4], 0.0);
                let w = random_tensor(&mut rng, &[wo, wi, k, k], 0.0);
                let bias = random_tensor(&mut rng, &[wo], 0.0);
                let r = random_tensor(&mut rng, &[2, ro, 3, 4], 0.0);
                check_gradients(&[x, w, bias], |t, v| {
                    let y = t.conv2d_sliced(v[0], v[1], Some(v[2]), ri, ro)?;
                    project(t, y, &r)
                })?
            }
            "relu" => {
                let x = random_tensor(&mut rng, &[3, 4], 1e-3);
                let r = random_tensor(&mut rng, &[3, 4], 0.0);
                check_gradients(&[x], |t, v| {
                    let y = t.relu(v[0])?;
                    project(t, y, &r)
                })?
            }
            "add" | "sub" | "mul" => {
                let a = random_tensor(&mut rng, &[2, 5], 0.0);
                let b = random_tensor(&mut rng, &[2, 5], 0.0);
                let r = random_tensor(&mut rng, &[2, 5], 0.0);
                check_gradients(&[a, b], |t, v| {
                    let y = match op {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    project(t, y, &r)
                })?
            }
            "scale" | "square" => {
                let x = random_tensor(&mut rng, &[7], 0.0);
                let r = random_tensor(&mut rng, &[7], 0.0);
                let factor = rng.random_range(-2.0..2.0);
                check_gradients(&[x], |t, v| {
                    let y = if op == "scale" {
                        t.scale(v[0], factor)?
                    } else {
                        t.square(v[0])?
                    };
                    project(t, y, &r)
                })?
            }
            "sum" | "mean" => {
                let x = random_tensor(&mut rng, &[2, 3, 2], 0.0);
                check_gradients(&[x], |t, v| {
                    let s = if op == "sum" { t.sum(v[0])? } else { t.mean(v[0])? };
                    t.square(s).and_then(|q| t.sum(q))
                })?
            }
            "global_avg_pool" => {
                let x = random_tensor(&mut rng, &[2, 3, 3, 2], 0.0);
                let r = random_tensor(&mut rng, &[2, 3], 0.0);
                check_gradients(&[x], |t, v| {
                    let y = t.global_avg_pool(v[0])?;
                    project(t, y, &r)
                })?
            }
            "linear" => {
                let (b, din, dout) = (
                    rng.random_range(1..4),
                    rng.random_range(1..5),
                    rng.random_range(1..5),
                );
                let x = random_tensor(&mut rng, &[b, din], 0.0);
                let w = random_tensor(&mut rng, &[dout, din], 0.0);
                let bias = random_tensor(&mut rng, &[dout], 0.0);
                let r = random_tensor(&mut rng, &[b, dout], 0.0);
                check_gradients(&[x, w, bias], |t, v| {
                    let y = t.linear(v[0], v[1], Some(v[2]))?;
                    project(t, y, &r)
                })?
            }
            "softmax" => {
                let x = random_tensor(&mut rng, &[3, 5], 0.0);
                let r = random_tensor(&mut rng, &[3, 5], 0.0);
                check_gradients(&[x], |t, v| {
                    let y = t.softmax(v[0])?;
                    project(t, y, &r)
                })?
            }
            "cross_entropy" => {
                let b = rng.random_range(1..5);
                let n = rng.random_range(2..6);
                let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
                let x = random_tensor(&mut rng, &[b, n], 0.0);
                check_gradients(&[x], |t, v| t.cross_entropy(v[0], &labels))?
            }
            "l1_loss" => {
                let a = random_tensor(&mut rng, &[2, 6], 0.0);
                // keep |a - b| well away from the tie at zero
                let offs = random_tensor(&mut rng, &[2, 6], 1e-2);
                let b = Tensor::new(
                    &[2, 6],
                    a.data().iter().zip(offs.data()).map(|(x, o)| x + o).collect(),
                )?;
                check_gradients(&[a, b], |t, v| t.l1_loss(v[0], v[1]))?
            }
            other => {
                return Err(crate::Error::Config(format!("no gradient check for op {other}")))
            }
        };
        worst = worst.max(err);
    }
    Ok(GradCheckReport {
        op,
        instances,
        max_rel_error: worst,
    })
}
