use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uwadn_core::degrade::{degrade, synth_clean, DegradationSpec, Task};
use uwadn_core::gradcheck::random_tensor;
use uwadn_core::tensor::{Tape, Tensor};
use uwadn_core::wab::{
    evaluate_wab_loss, sample_widths, train_wab, verify_prefix_decomposition, wab_losses, TrainConfig,
    TrainSample, WabConfig, WabModel, WidthAdaptiveConv, WidthCandidates, DECOMPOSITION_TOLERANCE,
};

fn small_config() -> WabConfig {
    WabConfig {
        omega: 10,
        ratios: vec![0.6, 0.7, 0.8, 0.9, 1.0],
        blocks: 2,
        c_de: 4,
        kernel: 3,
        classes: 5,
    }
}

fn images(n: usize, size: usize) -> Tensor<f64> {
    let items: Vec<Tensor<f64>> = (0..n)
        .map(|i| synth_clean(100 + i as u64, size, size).unwrap().to_tensor())
        .collect();
    let refs: Vec<&Tensor<f64>> = items.iter().collect();
    Tensor::stack(&refs).unwrap()
}

fn toy_set(n: usize, size: usize) -> Vec<TrainSample<f32>> {
    // strong degradations only: light noise is already near the identity's optimum
    let tasks = [Task::Noise50, Task::Rain, Task::Haze];
    (0..n)
        .map(|i| {
            let task = tasks[i % tasks.len()];
            let seed = 1000 + i as u64;
            let clean = synth_clean(seed, size, size).unwrap();
            let s = degrade(&clean, &task.default_spec(size, size), seed, task.label()).unwrap();
            TrainSample {
                degraded: s.degraded.to_tensor(),
                clean: s.clean.to_tensor(),
                label: task.label(),
            }
        })
        .collect()
}

#[test]
fn sliced_forward_equals_zero_masked_full_width() {
    let m = WabModel::<f64>::new(small_config(), 7).unwrap();
    let x = images(2, 9);
    for &w in m.candidates().widths() {
        let (sliced, _) = m.forward(&x, w).unwrap();
        let (masked, _) = m.zero_masked(w).unwrap().forward(&x, m.candidates().full()).unwrap();
        let dev = sliced.max_abs_diff(&masked).unwrap();
        assert!(dev < 1e-9, "width {w}: {dev}");
    }
}

#[test]
fn sub_widths_actually_differ_from_full_width() {
    let m = WabModel::<f64>::new(small_config(), 7).unwrap();
    let x = images(1, 9);
    let (full, _) = m.forward(&x, 10).unwrap();
    let (sub, _) = m.forward(&x, 6).unwrap();
    assert!(full.max_abs_diff(&sub).unwrap() > 1e-6);
}

#[test]
fn backward_at_a_sub_width_leaves_outer_weights_untouched() {
    let m = WabModel::<f64>::new(small_config(), 3).unwrap();
    let x = images(2, 8);
    let clean = images(2, 8);

    for &w in &m.candidates().widths()[..4] {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(clean.clone());
        let f = m.encode(&mut tape, &vars, xv).unwrap();
        let out = m.restore(&mut tape, &vars, xv, f, w).unwrap();
        let loss = tape.l1_loss(out, yv).unwrap();
        let grads = tape.backward(loss).unwrap();
        let all = vars.all();
        let named = m.named_params();
        let mut inside_nonzero = false;
        for ((name, t), v) in named.iter().zip(&all) {
            let g = grads.get_or_zeros(*v, t.numel());
            let shape = t.shape();
            // (rows, cols) of the full-width store that width w may touch
            let (rows, cols) = match name.as_str() {
                n if n.starts_with("encoder") => continue,
                n if n.starts_with("head") => (w, 3),
                n if n.starts_with("transform") => (w, 4),
                n if n.starts_with("tail") => (3, w),
                _ => (w, w),
            };
            let per_row: usize = shape[1..].iter().product();
            let taps = if shape.len() == 4 { shape[2] * shape[3] } else { 1 };
            for (j, gv) in g.iter().enumerate() {
                let o = j / per_row.max(1);
                let i = (j % per_row.max(1)) / taps;
                let outside = o >= rows || (shape.len() == 4 && i >= cols);
                if outside {
                    assert_eq!(*gv, 0.0, "{name}[{j}] at width {w}");
                } else if *gv != 0.0 {
                    inside_nonzero = true;
                }
            }
        }
        assert!(inside_nonzero);
    }
}

#[test]
fn total_loss_is_the_sum_of_independently_computed_terms() {
    let m = WabModel::<f64>::new(small_config(), 5).unwrap();
    let x = images(3, 8);
    let y = images(3, 8).cast::<f64>();
    let y = Tensor::new(y.shape(), y.data().iter().map(|v| v * 0.9 + 0.05).collect()).unwrap();
    let labels = [0, 3, 4];
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let losses = wab_losses(&m, &mut tape, &vars, xv, yv, &labels, 7).unwrap();
    let v = losses.values(&tape).unwrap();

    let l1 = |a: &Tensor<f64>, b: &Tensor<f64>| {
        a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.numel() as f64
    };
    let (sub, f_de) = m.forward(&x, 7).unwrap();
    let (full, _) = m.forward(&x, 10).unwrap();
    let recon = l1(&sub, &y) + l1(&full, &y);
    let distill = l1(&sub, &full);
    // cross-entropy from pooled features by hand
    let [b, c, h, w] = [f_de.shape()[0], f_de.shape()[1], f_de.shape()[2], f_de.shape()[3]];
    let mut de = 0.0;
    for (bi, &label) in labels.iter().enumerate() {
        let pooled: Vec<f64> = (0..c)
            .map(|ci| f_de.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let logits: Vec<f64> = (0..5)
            .map(|k| {
                m.encoder.classifier_bias.data()[k]
                    + (0..c).map(|ci| m.encoder.classifier_weight.data()[k * c + ci] * pooled[ci]).sum::<f64>()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        de += lse - logits[label];
    }
    de /= b as f64;

    assert!((v.recon - recon).abs() < 1e-12);
    assert!((v.distill - distill).abs() < 1e-12);
    assert!((v.de - de).abs() < 1e-12);
    assert!((v.total - (recon + distill + de)).abs() < 1e-12);
    assert!(v.distill > 0.0);
}

#[test]
fn zero_body_gives_zero_distillation_and_reconstruction_against_input() {
    let mut m = WabModel::<f64>::new(small_config(), 5).unwrap();
    for b in &mut m.trunk {
        b.conv1.weight.data_mut().fill(0.0);
        b.conv2.weight.data_mut().fill(0.0);
    }
    m.tail.weight.data_mut().fill(0.0);
    let x = images(2, 8);
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(x);
    let v = wab_losses(&m, &mut tape, &vars, xv, yv, &[1, 2], 6)
        .unwrap()
        .values(&tape)
        .unwrap();
    assert_eq!(v.distill, 0.0);
    assert_eq!(v.recon, 0.0);
    assert!(v.de > 0.0);
}

#[test]
fn teacher_receives_no_distillation_gradient() {
    // With the reconstruction and classification terms removed, only the
    // student path may carry gradient; weights used only at full width stay zero.
    let m = WabModel::<f64>::new(small_config(), 9).unwrap();
    let x = images(1, 8);
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(x);
    let losses = wab_losses(&m, &mut tape, &vars, xv, yv, &[0], 6).unwrap();
    let grads = tape.backward(losses.distill).unwrap();
    let named = m.named_params();
    let all = vars.all();
    let (name, t) = &named.iter().find(|(n, _)| n == "trunk.0.conv1.weight").unwrap();
    let idx = named.iter().position(|(n, _)| n == name).unwrap();
    let g = grads.get_or_zeros(all[idx], t.numel());
    // row 9 is outside width 6: only the teacher could have touched it
    let per_row = 10 * 9;
    assert!(g[9 * per_row..10 * per_row].iter().all(|&v| v == 0.0));
}

#[test]
fn width_sampling_is_uniform_over_sub_widths() {
    let c = WidthCandidates::new(&[0.6, 0.7, 0.8, 0.9, 1.0], 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        let (sub, full) = sample_widths(&mut rng, &c).unwrap();
        assert_eq!(full, 64);
        counts[c.index_of(sub).unwrap()] += 1;
    }
    for n in counts {
        assert!((2350..=2650).contains(&n), "{counts:?}");
    }
}

#[test]
fn parameter_count_is_unchanged_by_training() {
    let data = toy_set(10, 8);
    let mut m = WabModel::<f32>::new(small_config(), 1).unwrap();
    let before = m.param_count();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        lr: 1e-3,
        seed: 3,
    };
    train_wab(&mut m, &cfg, &data, |_| {}).unwrap();
    assert_eq!(m.param_count(), before);
}

#[test]
fn one_epoch_lowers_the_loss_on_a_toy_set() {
    let data = toy_set(64, 16);
    let mut m = WabModel::<f32>::new(WabConfig::desk(), 11).unwrap();
    let before = evaluate_wab_loss(&m, &data, 8, 99).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        lr: 1e-3,
        seed: 4,
    };
    let logs = train_wab(&mut m, &cfg, &data, |_| {}).unwrap();
    assert_eq!(logs.len(), 1);
    let after = evaluate_wab_loss(&m, &data, 8, 99).unwrap();
    assert!(after.total < before.total, "{before:?} -> {after:?}");
}

#[test]
fn training_is_deterministic() {
    let data = toy_set(12, 8);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr: 1e-3,
        seed: 8,
    };
    let run = || {
        let mut m = WabModel::<f32>::new(small_config(), 2).unwrap();
        let logs = train_wab(&mut m, &cfg, &data, |_| {}).unwrap();
        (m, logs.iter().map(|l| l.total).collect::<Vec<_>>())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn unknown_labels_are_rejected() {
    let mut data = toy_set(4, 8);
    data[2].label = 7;
    let mut m = WabModel::<f32>::new(small_config(), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        lr: 1e-3,
        seed: 0,
    };
    assert!(train_wab(&mut m, &cfg, &data, |_| {}).is_err());
}

fn random_stack(seed: u64, depth: usize, w: usize) -> Vec<WidthAdaptiveConv<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..depth)
        .map(|_| WidthAdaptiveConv::new(random_tensor(&mut rng, &[w, w, 3, 3], 0.0), None).unwrap())
        .collect()
}

#[test]
fn three_layer_linear_stack_decomposes() {
    let layers = random_stack(1, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[2, 8, 6, 6], 0.0);
    for (r1, r2) in [(3, 8), (5, 6), (1, 8), (4, 4)] {
        let report = verify_prefix_decomposition(&layers, &x, r1, r2).unwrap();
        assert_eq!(report.layer_deviations.len(), 3);
        assert!(report.max_deviation() < DECOMPOSITION_TOLERANCE);
        if r1 < r2 {
            assert!(report.remainder_norms.iter().all(|&n| n > 0.0));
        }
    }
}

#[test]
fn without_cross_blocks_the_wide_prefix_is_the_narrow_pass() {
    // Zeroing W[0:ρ1, ρ1:ρ2] cuts the only path from extra channels into the
    // prefix, so the remainder must vanish.
    let (r1, r2) = (3, 7);
    let mut layers = random_stack(5, 3, 7);
    for l in &mut layers {
        let data = l.weight.data_mut();
        for o in 0..r1 {
            for i in r1..r2 {
                data[(o * 7 + i) * 9..(o * 7 + i + 1) * 9].fill(0.0);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[1, 7, 5, 5], 0.0);
    let report = verify_prefix_decomposition(&layers, &x, r1, r2).unwrap();
    assert!(report.remainder_norms.iter().all(|&n| n == 0.0));
}

#[test]
fn trunk_pre_activations_decompose_layer_by_layer() {
    let m = WabModel::<f64>::new(small_config(), 12).unwrap();
    let x = images(1, 8);
    for (layer, input) in m.trunk_layer_inputs(&x, 10).unwrap() {
        let r = verify_prefix_decomposition(&[layer], &input, 6, 10).unwrap();
        assert!(r.max_deviation() < DECOMPOSITION_TOLERANCE);
    }
}

#[test]
fn null_degradation_still_trains() {
    let clean = synth_clean(5, 8, 8).unwrap();
    let s = degrade(&clean, &DegradationSpec::noise(0.0), 5, 0).unwrap();
    let data = vec![TrainSample {
        degraded: s.degraded.to_tensor::<f32>(),
        clean: s.clean.to_tensor(),
        label: 0,
    }];
    let mut m = WabModel::<f32>::new(small_config(), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 1,
        lr: 1e-3,
        seed: 0,
    };
    let logs = train_wab(&mut m, &cfg, &data, |_| {}).unwrap();
    assert!(logs.iter().all(|l| l.total.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn prefix_nesting_holds_for_random_models(seed in 0u64..1000, omega in 10usize..16, blocks in 1usize..3) {
        let cfg = WabConfig { omega, blocks, ..small_config() };
        let m = WabModel::<f64>::new(cfg, seed).unwrap();
        let x = images(1, 8);
        for &w in m.candidates().widths() {
            let (sliced, _) = m.forward(&x, w).unwrap();
            let (masked, _) = m.zero_masked(w).unwrap().forward(&x, omega).unwrap();
            prop_assert!(sliced.max_abs_diff(&masked).unwrap() < 1e-9);
        }
    }

    #[test]
    fn distillation_is_never_negative(seed in 0u64..1000) {
        let m = WabModel::<f64>::new(small_config(), seed).unwrap();
        let x = images(1, 8);
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(x);
        let v = wab_losses(&m, &mut tape, &vars, xv, yv, &[0], 8).unwrap().values(&tape).unwrap();
        prop_assert!(v.distill >= 0.0);
    }
}
