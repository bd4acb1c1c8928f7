//! Self-contained invariant suites run by `uwadn verify`.
//!
//! Every suite builds its own random instances from a seed and reports each
//! check with the deviation it measured, so a failure names what broke and by
//! how much.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uwadn_core::degrade::{synth_clean, verify_decomposition, DegradationKind, DegradationSpec, HazeSpec, RainSpec, Task};
use uwadn_core::gradcheck::{check_op, random_tensor, OPS, TOLERANCE};
use uwadn_core::selector::{selection_loss, sparsity_loss, SparsityTarget};
use uwadn_core::tensor::{Tape, Tensor};
use uwadn_core::wab::{
    corrupt_prefix_block, verify_prefix_decomposition_split, wab_losses, WabConfig, WabModel, WidthAdaptiveConv,
    DECOMPOSITION_TOLERANCE,
};

use crate::error::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Grad,
    Slicing,
    Prefix,
    Degrade,
    Losses,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Grad, Suite::Slicing, Suite::Prefix, Suite::Degrade, Suite::Losses];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Slicing => "slicing",
            Suite::Prefix => "prefix",
            Suite::Degrade => "degrade",
            Suite::Losses => "losses",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| PipelineError::Usage(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured deviation or value.
    pub measured: f64,
    pub limit: f64,
}

impl Check {
    fn below(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured < limit,
            measured,
            limit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Perturbs one weight inside the shared prefix of the narrow pass; the
    /// prefix suite must then fail.
    pub mutate: bool,
    /// Random instances per gradient-checked op.
    pub grad_instances: usize,
    /// Random stacks for the prefix suite.
    pub prefix_seeds: usize,
    /// Random inputs per width for the slicing suite.
    pub slicing_inputs: usize,
    /// Samples for the degradation suite.
    pub degrade_samples: usize,
}

impl VerifyOptions {
    pub fn standard(seed: u64) -> Self {
        Self {
            seed,
            mutate: false,
            grad_instances: 20,
            prefix_seeds: 50,
            slicing_inputs: 20,
            degrade_samples: 100,
        }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = match suite {
        Suite::Grad => grad_suite(opts)?,
        Suite::Slicing => slicing_suite(opts)?,
        Suite::Prefix => prefix_suite(opts)?,
        Suite::Degrade => degrade_suite(opts)?,
        Suite::Losses => loss_suite()?,
    };
    Ok(SuiteReport {
        suite,
        passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn grad_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    OPS.iter()
        .enumerate()
        .map(|(i, &op)| {
            let r = check_op(op, opts.seed.wrapping_add(i as u64), opts.grad_instances)?;
            Ok(Check::below(
                format!("{op} ({} instances, max relative error)", r.instances),
                r.max_rel_error,
                TOLERANCE,
            ))
        })
        .collect()
}

fn slicing_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let model = WabModel::<f64>::new(WabConfig::desk(), opts.seed)?;
    let full = model.candidates().full();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x51);
    let mut checks = Vec::new();
    for &w in model.candidates().widths() {
        let masked = model.zero_masked(w)?;
        let mut worst = 0.0f64;
        for _ in 0..opts.slicing_inputs {
            let x = Tensor::from_fn(&[1, 3, 12, 12], |_| rng.random_range(0.0..1.0));
            let (sliced, _) = model.forward(&x, w)?;
            let (reference, _) = masked.forward(&x, full)?;
            worst = worst.max(sliced.max_abs_diff(&reference)?);
        }
        checks.push(Check::below(format!("width {w}: sliced vs zero-masked full width"), worst, 1e-9));
    }
    Ok(checks)
}

/// Random linear `[16, 16, 3, 3]` stack with biases.
fn random_stack(seed: u64, depth: usize, omega: usize) -> Result<Vec<WidthAdaptiveConv<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..depth)
        .map(|_| {
            let w = random_tensor(&mut rng, &[omega, omega, 3, 3], 0.0);
            let b = random_tensor(&mut rng, &[omega], 0.0);
            Ok(WidthAdaptiveConv::new(Tensor::new(w.shape(), w.data().iter().map(|v| v * 0.3).collect())?, Some(b))?)
        })
        .collect()
}

fn prefix_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    const OMEGA: usize = 16;
    let (r1, r2) = (8, 12);
    let mut worst = 0.0f64;
    let mut failed_at = None;
    for s in 0..opts.prefix_seeds as u64 {
        let wide = random_stack(opts.seed.wrapping_add(s), 3, OMEGA)?;
        let mut narrow = wide.clone();
        if opts.mutate {
            narrow[1] = corrupt_prefix_block(&narrow[1], r1, 1e-3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(s) ^ 0xabc);
        let x = random_tensor(&mut rng, &[1, OMEGA, 6, 6], 0.0);
        match verify_prefix_decomposition_split(&wide, &narrow, &x, r1, r2) {
            Ok(report) => worst = worst.max(report.max_deviation()),
            Err(uwadn_core::Error::Decomposition { layer, deviation }) => {
                worst = worst.max(deviation);
                failed_at.get_or_insert((s, layer));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let name = match failed_at {
        Some((s, layer)) => format!(
            "3-layer stacks, omega {OMEGA}, rho {r1}/{r2}, {} seeds (first failure: seed {s}, layer {layer})",
            opts.prefix_seeds
        ),
        None => format!("3-layer stacks, omega {OMEGA}, rho {r1}/{r2}, {} seeds", opts.prefix_seeds),
    };
    Ok(vec![Check::below(name, worst, DECOMPOSITION_TOLERANCE)])
}

fn degrade_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xde);
    let (mut n2r, mut n2h, mut r2h) = (0.0f64, 0.0f64, 0.0f64);
    let mut sparser = 0usize;
    for _ in 0..opts.degrade_samples {
        let seed: u64 = rng.random();
        let size = rng.random_range(16..=40);
        let sigma = rng.random_range(0.0..0.2);
        let clean = synth_clean(seed, size, size)?;
        let noise = DegradationSpec::noise(sigma);
        // streak count scaled from the size-aware default keeps coverage sparse
        let base = match Task::Rain.default_spec(size, size).kind {
            DegradationKind::Rain(r) => r,
            _ => RainSpec::default(),
        };
        let rain = DegradationSpec::rain(
            RainSpec {
                streaks: ((base.streaks as f64 * rng.random_range(0.5..1.0)).round() as usize).max(1),
                angle: rng.random_range(-30.0..30.0),
                intensity: rng.random_range(0.2..0.8),
                ..base
            },
            sigma,
        );
        let haze = DegradationSpec::haze(
            HazeSpec {
                beta: rng.random_range(0.3..2.0),
                ..HazeSpec::default()
            },
            sigma,
        );
        match verify_decomposition(&clean, &noise, &rain, &haze, seed) {
            Ok(r) => {
                n2r = n2r.max(r.noise_to_rain);
                n2h = n2h.max(r.noise_to_haze);
                r2h = r2h.max(r.rain_to_haze);
                sparser += usize::from(r.rain_sparser());
            }
            Err(uwadn_core::Error::Verification { identity, deviation }) => {
                return Ok(vec![Check::below(identity, deviation.abs().max(f64::MIN_POSITIVE), 0.0)]);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let n = opts.degrade_samples;
    Ok(vec![
        Check::below("y_rain = y_noise + A_rain", n2r, 1e-12),
        Check::below("y_haze = y_noise + A'", n2h, 1e-12),
        Check::below("y_haze = y_rain + complement", r2h, 1e-12),
        Check {
            name: format!("rain support smaller than A' support ({sparser}/{n} samples)"),
            passed: sparser == n,
            measured: (n - sparser) as f64,
            limit: 0.0,
        },
    ])
}

fn loss_suite() -> Result<Vec<Check>> {
    let ratios = [0.6, 0.7, 0.8, 0.9, 1.0];
    let t = SparsityTarget::new(0.8)?;
    let one_hot = |i: usize| Tensor::<f64>::from_fn(&[1, 5], |j| if i == j { 1.0 } else { 0.0 });
    let spars = |p: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(p);
        let l = sparsity_loss(&mut tape, v, &ratios, t)?;
        Ok(tape.value(l).item()?)
    };
    let mut checks = vec![
        Check::below("L_spars, one-hot at ratio 0.8, t = 0.8", spars(one_hot(2))?.abs(), 1e-15),
        Check::below("L_spars, one-hot at ratio 1.0, t = 0.8 (0.04)", (spars(one_hot(4))? - 0.04).abs(), 1e-15),
        Check::below("L_spars, uniform p, t = 0.8", spars(Tensor::full(&[1, 5], 0.2))?.abs(), 1e-15),
    ];
    let l = vec![vec![0.21, 0.13, 0.08, 0.05, 0.04]];
    let mut worst = 0.0f64;
    for i in 0..5 {
        let mut tape = Tape::new();
        let p = tape.constant(one_hot(i));
        let v = selection_loss(&mut tape, p, &l)?;
        worst = worst.max((tape.value(v).item()? - l[0][i] / 5.0).abs());
    }
    checks.push(Check::below("L_select, one-hot p = L_i / n", worst, 1e-15));

    // a zero tail makes every width return its input, so student == teacher
    let cfg = WabConfig {
        omega: 10,
        blocks: 1,
        c_de: 4,
        ..WabConfig::desk()
    };
    let mut model = WabModel::<f64>::new(cfg, 1)?;
    model.tail.weight.data_mut().fill(0.0);
    if let Some(b) = &mut model.tail.bias {
        b.data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    let y = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let (xv, yv) = (tape.constant(x), tape.constant(y));
    let losses = wab_losses(&model, &mut tape, &vars, xv, yv, &[0, 3], 6)?;
    let distill = losses.values(&tape)?.distill;
    checks.push(Check::below("L_distill at equal outputs", distill.abs(), 1e-15));

    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::full(&[3, Task::ALL.len()], 0.37));
    let ce = tape.cross_entropy(logits, &[0, 2, 4])?;
    let ce = tape.value(ce).item()?;
    checks.push(Check::below("CE of uniform 5-way logits = ln 5", (ce - 5f64.ln()).abs(), 1e-9));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(seed: u64) -> VerifyOptions {
        VerifyOptions {
            seed,
            mutate: false,
            grad_instances: 2,
            prefix_seeds: 3,
            slicing_inputs: 1,
            degrade_samples: 3,
        }
    }

    #[test]
    fn quick_suites_pass() {
        for suite in Suite::ALL {
            let r = run_suite(suite, &quick(4)).unwrap();
            assert!(r.passed, "{:?}", r.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn mutation_is_caught() {
        let r = run_suite(
            Suite::Prefix,
            &VerifyOptions {
                mutate: true,
                ..quick(4)
            },
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }
}
