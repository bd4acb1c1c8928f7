//! Narrow/wide decomposition of stacked width-adaptive convolutions.
//!
//! For a linear stack, the first `ρ1` channels of a width-`ρ2` pass equal the
//! width-`ρ1` pass plus a remainder that only depends on the extra channels:
//!
//! ```text
//! O_i = W_i[0:ρ1, 0:ρ1] * O_{i-1}  +  W_i[0:ρ1, ρ1:ρ2] * x_{i-1}[ρ1:ρ2]
//! ```
//!
//! with `O_0 = 0`. The remainder is propagated explicitly here, using
//! sub-block weights copied out of the store, and compared layer by layer.

use super::WidthAdaptiveConv;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Largest tolerated deviation in double precision.
pub const DECOMPOSITION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixReport {
    pub narrow: usize,
    pub wide: usize,
    /// Max absolute deviation after each layer.
    pub layer_deviations: Vec<f64>,
    /// Max absolute value of the remainder after each layer.
    pub remainder_norms: Vec<f64>,
}

impl PrefixReport {
    pub fn max_deviation(&self) -> f64 {
        self.layer_deviations.iter().copied().fold(0.0, f64::max)
    }
}

/// Copies `weight[rows, cols]` into a dense kernel tensor.
fn weight_block(weight: &Tensor<f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Tensor<f64> {
    let s = weight.shape();
    let (wi, taps) = (s[1], s[2] * s[3]);
    let (nr, nc) = (rows.len(), cols.len());
    let mut data = Vec::with_capacity(nr * nc * taps);
    for o in rows {
        for i in cols.clone() {
            data.extend_from_slice(&weight.data()[(o * wi + i) * taps..(o * wi + i + 1) * taps]);
        }
    }
    Tensor::new(&[nr, nc, s[2], s[3]], data).expect("block shape matches data")
}

fn conv_block(x: &Tensor<f64>, weight: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(weight.clone());
    let pad = weight.shape()[2] / 2;
    let y = tape.conv2d(xv, wv, None, pad)?;
    Ok(tape.value(y).clone())
}

fn conv_prefix(layer: &WidthAdaptiveConv<f64>, x: &Tensor<f64>, width: usize) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = layer.bind(&mut tape, false);
    let y = tape.conv2d_sliced(xv, vars.weight, vars.bias, width, width)?;
    Ok(tape.value(y).clone())
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

/// Checks the decomposition on `layers`, all evaluated without activations.
/// `input` has at least `ρ2` channels; only the first `ρ2` are read.
pub fn verify_prefix_decomposition(
    layers: &[WidthAdaptiveConv<f64>],
    input: &Tensor<f64>,
    rho1: usize,
    rho2: usize,
) -> Result<PrefixReport> {
    verify_prefix_decomposition_split(layers, layers, input, rho1, rho2)
}

/// As [`verify_prefix_decomposition`], but the narrow pass runs on
/// `narrow_layers` while the wide pass and the remainder use `wide_layers`.
/// Identical stacks must pass; any change inside the shared prefix block
/// must be reported.
pub fn verify_prefix_decomposition_split(
    wide_layers: &[WidthAdaptiveConv<f64>],
    narrow_layers: &[WidthAdaptiveConv<f64>],
    input: &Tensor<f64>,
    rho1: usize,
    rho2: usize,
) -> Result<PrefixReport> {
    if rho1 == 0 || rho1 > rho2 {
        return Err(Error::Width(format!("need 0 < rho1 <= rho2, got {rho1}, {rho2}")));
    }
    if wide_layers.len() != narrow_layers.len() || wide_layers.is_empty() {
        return Err(Error::Config("narrow and wide stacks must have the same non-zero depth".into()));
    }
    for l in wide_layers.iter().chain(narrow_layers) {
        if l.in_channels() < rho2 || l.out_channels() < rho2 {
            return Err(Error::Width(format!(
                "layer {:?} narrower than rho2 = {rho2}",
                l.weight.shape()
            )));
        }
    }
    let mut wide = input.channel_range(0, rho2)?;
    let mut narrow = input.channel_range(0, rho1)?;
    let mut remainder: Option<Tensor<f64>> = None;
    let mut report = PrefixReport {
        narrow: rho1,
        wide: rho2,
        layer_deviations: Vec::new(),
        remainder_norms: Vec::new(),
    };

    for (index, (wl, nl)) in wide_layers.iter().zip(narrow_layers).enumerate() {
        let mut next: Option<Tensor<f64>> = None;
        if let Some(r) = &remainder {
            next = Some(conv_block(r, &weight_block(&wl.weight, 0..rho1, 0..rho1))?);
        }
        if rho1 < rho2 {
            let extra = wide.channel_range(rho1, rho2)?;
            let cross = conv_block(&extra, &weight_block(&wl.weight, 0..rho1, rho1..rho2))?;
            next = Some(match next {
                Some(n) => add(&n, &cross)?,
                None => cross,
            });
        }
        remainder = next;

        wide = conv_prefix(wl, &wide, rho2)?;
        narrow = conv_prefix(nl, &narrow, rho1)?;

        let top = wide.channel_range(0, rho1)?;
        let predicted = match &remainder {
            Some(r) => add(&narrow, r)?,
            None => narrow.clone(),
        };
        let deviation = top.max_abs_diff(&predicted)?;
        report.layer_deviations.push(deviation);
        report.remainder_norms.push(
            remainder
                .as_ref()
                .map_or(0.0, |r| r.data().iter().fold(0.0, |m, v| m.max(v.abs()))),
        );
        if !(deviation < DECOMPOSITION_TOLERANCE) {
            return Err(Error::Decomposition { layer: index, deviation });
        }
    }
    Ok(report)
}

/// Copy of `layer` with `eps` added to one weight inside the `ρ×ρ` prefix
/// block, for negative tests of the decomposition check.
pub fn corrupt_prefix_block(layer: &WidthAdaptiveConv<f64>, rho: usize, eps: f64) -> WidthAdaptiveConv<f64> {
    let mut out = layer.clone();
    let s = layer.weight.shape();
    let (wi, taps) = (s[1], s[2] * s[3]);
    let o = (rho.max(1) - 1) / 2;
    let i = rho.max(1) - 1;
    out.weight.data_mut()[(o * wi + i) * taps + taps / 2] += eps;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(rng: &mut ChaCha8Rng, depth: usize, w: usize, k: usize) -> Vec<WidthAdaptiveConv<f64>> {
        (0..depth)
            .map(|_| {
                WidthAdaptiveConv::new(
                    random_tensor(rng, &[w, w, k, k], 0.0),
                    Some(random_tensor(rng, &[w], 0.0)),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn equal_widths_have_no_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = stack(&mut rng, 3, 6, 3);
        let x = random_tensor(&mut rng, &[2, 6, 5, 5], 0.0);
        let r = verify_prefix_decomposition(&layers, &x, 4, 4).unwrap();
        assert!(r.remainder_norms.iter().all(|&n| n == 0.0));
        assert_eq!(r.max_deviation(), 0.0);
    }

    #[test]
    fn single_layer_remainder_is_cross_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layers = stack(&mut rng, 1, 5, 3);
        let x = random_tensor(&mut rng, &[1, 5, 4, 4], 0.0);
        let r = verify_prefix_decomposition(&layers, &x, 2, 5).unwrap();
        assert!(r.max_deviation() < DECOMPOSITION_TOLERANCE);
        assert!(r.remainder_norms[0] > 1e-3);
    }

    #[test]
    fn mutated_narrow_pass_is_caught_at_first_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers = stack(&mut rng, 3, 6, 3);
        let x = random_tensor(&mut rng, &[1, 6, 5, 5], 0.0);
        let mut narrow = layers.clone();
        narrow[0] = corrupt_prefix_block(&layers[0], 3, 1e-3);
        match verify_prefix_decomposition_split(&layers, &narrow, &x, 3, 6) {
            Err(Error::Decomposition { layer, deviation }) => {
                assert_eq!(layer, 0);
                assert!(deviation > 1e-6);
            }
            other => panic!("expected decomposition failure, got {other:?}"),
        }
    }
}
