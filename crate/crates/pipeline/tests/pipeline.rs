use std::path::Path;
use std::process::Command;

use uwadn::commands::{self, Context, SynthArgs};
use uwadn::config::ModelSection;
use uwadn::dataset::{regenerate, DatasetPack, Split};
use uwadn::report::{evaluate, EvalMode};
use uwadn::{Checkpoint, PipelineError, RunConfig};
use uwadn_core::degrade::Task;
use uwadn_core::wab::{WabConfig, WabModel};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model = ModelSection {
        omega: 10,
        blocks: 1,
        c_de: 4,
        ..cfg.model
    };
    cfg.data.image_size = 12;
    cfg.data.train_per_task = 4;
    cfg.data.eval_per_task = 2;
    cfg.wab.epochs = 1;
    cfg.wab.batch_size = 4;
    cfg.ws.epochs = 2;
    cfg
}

fn context(dir: &Path, cfg: RunConfig) -> Context {
    Context::new(cfg, dir).unwrap()
}

/// Synthesizes a training pack under `<root>/train` and returns its path.
fn train_pack(root: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let dir = root.join("train");
    commands::synth(&context(&dir, cfg.clone()), &SynthArgs::default()).unwrap();
    dir
}

#[test]
fn synth_produces_the_requested_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let ctx = context(tmp.path(), RunConfig::desk());
    let args = SynthArgs {
        tasks: Some(vec![Task::Noise25, Task::Rain, Task::Haze]),
        count: Some(60),
        size: Some(32),
        split: Some(Split::Train),
    };
    let pack = commands::synth(&ctx, &args).unwrap();
    assert_eq!(pack.len(), 180);
    for task in [Task::Noise25, Task::Rain, Task::Haze] {
        assert_eq!(pack.manifest.samples.iter().filter(|s| s.task == task).count(), 60);
    }
    let loaded = DatasetPack::load(tmp.path()).unwrap();
    assert_eq!(loaded, pack);
}

#[test]
fn synth_is_byte_deterministic_and_regenerable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = SynthArgs {
        count: Some(5),
        size: Some(16),
        ..SynthArgs::default()
    };
    commands::synth(&context(a.path(), RunConfig::desk()), &args).unwrap();
    commands::synth(&context(b.path(), RunConfig::desk()), &args).unwrap();
    for file in ["manifest.json", "data.bin"] {
        assert_eq!(std::fs::read(a.path().join(file)).unwrap(), std::fs::read(b.path().join(file)).unwrap());
    }
    let pack = DatasetPack::load(a.path()).unwrap();
    for i in [0, 7, 14] {
        let (clean, degraded) = regenerate(&pack.manifest.samples[i], 16).unwrap();
        assert_eq!(clean.to_tensor::<f32>().reshape(&[3, 16, 16]).unwrap(), pack.clean[i]);
        assert_eq!(degraded.to_tensor::<f32>().reshape(&[3, 16, 16]).unwrap(), pack.degraded[i]);
    }
}

#[test]
fn corrupted_pack_blob_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let args = SynthArgs {
        count: Some(1),
        size: Some(8),
        ..SynthArgs::default()
    };
    commands::synth(&context(tmp.path(), RunConfig::desk()), &args).unwrap();
    let blob = tmp.path().join("data.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[10] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(DatasetPack::load(tmp.path()), Err(PipelineError::Checksum { .. })));
}

#[test]
fn checkpoint_rejects_flipped_payload_bytes() {
    let m = WabModel::<f32>::new(WabConfig::desk(), 1).unwrap();
    let bytes = Checkpoint::from_wab(&m, Default::default()).to_bytes().unwrap();
    for pos in [bytes.len() - 1, bytes.len() - 1000, bytes.len() / 2 + 4000] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(
            matches!(Checkpoint::from_bytes(&bad), Err(PipelineError::Checksum { .. })),
            "byte {pos}"
        );
    }
}

#[test]
fn loading_into_a_different_width_names_the_field() {
    let m = WabModel::<f32>::new(WabConfig::desk(), 1).unwrap();
    let ck = Checkpoint::from_bytes(&Checkpoint::from_wab(&m, Default::default()).to_bytes().unwrap()).unwrap();
    match ck.wab_expecting(&WabConfig::full()) {
        Err(PipelineError::Core(uwadn_core::Error::Compatibility(fields))) => {
            assert!(fields.iter().any(|f| f.starts_with("omega")));
            assert!(fields.iter().any(|f| f.starts_with("c_de")));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(ck.wab_expecting(&WabConfig::desk()).unwrap(), m);
}

#[test]
fn selector_training_requires_a_backbone() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = train_pack(tmp.path(), &cfg);
    let ctx = context(&tmp.path().join("run"), cfg);
    let missing = tmp.path().join("nope.ckpt");
    let r = commands::train_ws_stage(&ctx, &data, &missing, None, |_| {});
    assert!(matches!(r, Err(PipelineError::Stage(_))));
}

#[test]
fn two_stage_training_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = train_pack(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    let ctx = context(&run, cfg.clone());

    let wab = commands::train_wab_stage(&ctx, &data, |_| {}).unwrap();
    assert!(run.join("wab_loss.csv").exists());
    let again = commands::train_wab_stage(&context(&tmp.path().join("run2"), cfg.clone()), &data, |_| {}).unwrap();
    assert_eq!(wab.checksum(), again.checksum());

    let wab_path = run.join("wab.ckpt");
    let ws = commands::train_ws_stage(&ctx, &data, &wab_path, Some(0.7), |_| {}).unwrap();
    assert_eq!(ws.meta("target_t").and_then(|v| v.as_f64()), Some(0.7));
    assert_eq!(ws.meta("wab_sha256").and_then(|v| v.as_str()), Some(wab.checksum()));
    let loss_rows = std::fs::read_to_string(run.join("ws_loss.csv")).unwrap().lines().count();
    assert_eq!(loss_rows, 1 + cfg.ws.epochs);

    // a selector checkpoint is not a backbone
    let r = commands::train_ws_stage(&ctx, &data, &run.join("ws.ckpt"), None, |_| {});
    assert!(matches!(r, Err(PipelineError::Stage(_))));

    let routed = commands::eval_stage(&ctx, &data, &wab_path, Some(&run.join("ws.ckpt")), None).unwrap();
    assert_eq!(routed.tasks.len(), 3);
    assert!(routed.params > wab.header().tensors.len() as u64);
    let csv = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    assert!(csv.starts_with("metric,noise25,rain,haze,average"));

    assert!(matches!(
        commands::eval_stage(&ctx, &data, &wab_path, Some(&run.join("ws.ckpt")), Some(1.0)),
        Err(PipelineError::Usage(_))
    ));
    assert!(matches!(commands::eval_stage(&ctx, &data, &wab_path, None, None), Err(PipelineError::Usage(_))));

    let rows = commands::sweep_stage(&ctx, &data, &data, &wab_path, &[0.6, 0.8, 1.0]).unwrap();
    assert_eq!(rows.len(), 3);
    let csv = std::fs::read_to_string(run.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn fixed_width_cost_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let args = SynthArgs {
        count: Some(1),
        size: Some(32),
        ..SynthArgs::default()
    };
    let pack = commands::synth(&context(tmp.path(), RunConfig::desk()), &args).unwrap();
    let m = WabModel::<f32>::new(WabConfig::desk(), 2).unwrap();
    let full = evaluate(&m, EvalMode::Fixed(1.0), &pack).unwrap();
    let narrow = evaluate(&m, EvalMode::Fixed(0.6), &pack).unwrap();
    let ratio = narrow.mean_flops / full.mean_flops;
    assert!((0.33..=0.42).contains(&ratio), "{ratio}");
    assert!(evaluate(&m, EvalMode::Fixed(0.65), &pack).is_err());
}

fn uwadn(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_uwadn"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn cli_verify_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = uwadn(&["verify", "--suite", "losses", "--suite", "degrade"], tmp.path());
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 2);

    let mutated = uwadn(&["verify", "--suite", "prefix", "--mutate"], tmp.path());
    assert!(!mutated.status.success());
    assert!(String::from_utf8_lossy(&mutated.stdout).contains("FAIL"));
}

#[test]
fn cli_rejects_unknown_config_keys_and_missing_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "seed = 1\n[wab]\nepochz = 3\n").unwrap();
    let r = uwadn(&["--config", cfg.to_str().unwrap(), "verify", "--suite", "losses"], tmp.path());
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("epochz"));

    let r = uwadn(&["train-ws", "--data", tmp.path().to_str().unwrap()], &tmp.path().join("o"));
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("train-wab"));
}

#[test]
fn cli_synth_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let pack = tmp.path().join("pack");
    let r = uwadn(&["synth", "--tasks", "noise25,rain,haze", "--count", "2", "--size", "16", "--seed", "7"], &pack);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(DatasetPack::load(&pack).unwrap().len(), 6);
    let r = uwadn(&["export-ppm", "--data", pack.to_str().unwrap(), "--limit", "2"], tmp.path());
    assert!(r.status.success());
    let ppm = std::fs::read(tmp.path().join("ppm/00000_noise25_clean.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(ppm.len(), b"P6\n16 16\n255\n".len() + 16 * 16 * 3);
}
