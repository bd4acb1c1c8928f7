//! Library side of every CLI command. Each writes its artifacts under the
//! output directory and returns what it wrote, so tests can drive the same
//! code as the binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use uwadn_core::degrade::Task;
use uwadn_core::selector::{precompute_targets, train_ws_on_targets, SelectorModel, SparsityTarget, WsEpochLog};
use uwadn_core::wab::{train_wab, EpochLog, WabModel};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TaskEntry};
use crate::dataset::{export_ppm, DatasetPack, Split};
use crate::error::{IoContext, PipelineError, Result};
use crate::report::{evaluate, write_sweep_csv, EvalMode, EvalReport, SweepRow};
use crate::verify::{run_suite, Suite, SuiteReport, VerifyOptions};

pub const WAB_CHECKPOINT: &str = "wab.ckpt";
pub const WS_CHECKPOINT: &str = "ws.ckpt";

/// Resolved configuration plus the output directory.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        let out = out.into();
        fs::create_dir_all(&out).at(&out)?;
        Ok(Self { config, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SynthArgs {
    pub tasks: Option<Vec<Task>>,
    pub count: Option<usize>,
    pub size: Option<usize>,
    pub split: Option<Split>,
}

/// Generates a pack into the output directory. Unset arguments fall back to
/// the configuration; an explicit task list uses each task's default recipe
/// unless the configuration overrides it.
pub fn synth(ctx: &Context, args: &SynthArgs) -> Result<DatasetPack> {
    let d = &ctx.config.data;
    let split = args.split.unwrap_or(Split::Train);
    let tasks: Vec<TaskEntry> = match &args.tasks {
        Some(list) => list
            .iter()
            .map(|&task| {
                d.tasks
                    .iter()
                    .find(|e| e.task == task)
                    .cloned()
                    .unwrap_or(TaskEntry { task, spec: None })
            })
            .collect(),
        None => d.tasks.clone(),
    };
    let per_task = args.count.unwrap_or(match split {
        Split::Train => d.train_per_task,
        Split::Eval => d.eval_per_task,
    });
    let size = args.size.unwrap_or(d.image_size);
    let pack = DatasetPack::synthesize(&tasks, per_task, size, ctx.config.seed, split)?;
    pack.save(&ctx.out)?;
    Ok(pack)
}

fn write_csv<R: serde::Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)
}

/// Trains the backbone on the pack at `data`; writes `wab.ckpt` and
/// `wab_loss.csv`.
pub fn train_wab_stage(ctx: &Context, data: &Path, on_epoch: impl FnMut(&EpochLog)) -> Result<Checkpoint> {
    let pack = DatasetPack::load(data)?;
    let samples = pack.train_samples()?;
    let mut model = WabModel::<f32>::new(ctx.config.wab_config(), ctx.config.seed)?;
    let train = ctx.config.wab_train();
    let logs = train_wab(&mut model, &train, &samples, on_epoch)?;
    write_csv(&ctx.path("wab_loss.csv"), &logs)?;
    let meta = BTreeMap::from([
        ("stage".to_string(), json!("wab")),
        ("seed".to_string(), json!(train.seed)),
        ("epochs".to_string(), json!(train.epochs)),
        ("batch_size".to_string(), json!(train.batch_size)),
        ("lr".to_string(), json!(train.lr)),
        ("dataset_sha256".to_string(), json!(pack.manifest.sha256)),
    ]);
    let ck = Checkpoint::from_wab(&model, meta);
    ck.save(&ctx.path(WAB_CHECKPOINT))?;
    Ok(ck)
}

/// Loads a backbone checkpoint, refusing anything else.
pub fn load_wab(path: &Path) -> Result<(Checkpoint, WabModel<f32>)> {
    if !path.exists() {
        return Err(PipelineError::Stage(format!(
            "no backbone checkpoint at {}; run train-wab first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    let model = ck.wab()?;
    Ok((ck, model))
}

/// Trains a selector against the frozen backbone at `wab_path`; writes
/// `ws.ckpt` and `ws_loss.csv`. `target` overrides the configured `t`.
pub fn train_ws_stage(
    ctx: &Context,
    data: &Path,
    wab_path: &Path,
    target: Option<f64>,
    on_epoch: impl FnMut(&WsEpochLog),
) -> Result<Checkpoint> {
    let (wab_ck, wab) = load_wab(wab_path)?;
    let pack = DatasetPack::load(data)?;
    let t = SparsityTarget::new(target.unwrap_or(ctx.config.ws.target_t))?;
    let targets = precompute_targets(&wab, &pack.train_samples()?)?;
    let (sel, logs) = fit_selector(ctx, &wab, &targets, t, on_epoch)?;
    write_csv(&ctx.path("ws_loss.csv"), &logs)?;
    let ck = selector_checkpoint(ctx, &sel, t, wab_ck.checksum());
    ck.save(&ctx.path(WS_CHECKPOINT))?;
    Ok(ck)
}

fn fit_selector(
    ctx: &Context,
    wab: &WabModel<f32>,
    targets: &uwadn_core::selector::SelectorTargets<f32>,
    t: SparsityTarget,
    on_epoch: impl FnMut(&WsEpochLog),
) -> Result<(SelectorModel<f32>, Vec<WsEpochLog>)> {
    let mut sel = SelectorModel::<f32>::new(uwadn_core::selector::SelectorConfig::for_backbone(wab.config()), ctx.config.seed)?;
    let logs = train_ws_on_targets(&mut sel, targets, t, &ctx.config.ws_train(), on_epoch)?;
    Ok((sel, logs))
}

fn selector_checkpoint(ctx: &Context, sel: &SelectorModel<f32>, t: SparsityTarget, wab_sha: &str) -> Checkpoint {
    let train = ctx.config.ws_train();
    let meta = BTreeMap::from([
        ("stage".to_string(), json!("ws")),
        ("target_t".to_string(), json!(t.value())),
        ("seed".to_string(), json!(train.seed)),
        ("epochs".to_string(), json!(train.epochs)),
        ("lr".to_string(), json!(train.lr)),
        ("wab_sha256".to_string(), json!(wab_sha)),
    ]);
    Checkpoint::from_selector(sel, meta)
}

/// Evaluates on the pack at `data`, either routed (`ws`) or at a fixed
/// width ratio; exactly one must be given. Writes `eval.json` and
/// `eval.csv`.
pub fn eval_stage(ctx: &Context, data: &Path, wab_path: &Path, ws: Option<&Path>, width: Option<f64>) -> Result<EvalReport> {
    let (_, wab) = load_wab(wab_path)?;
    let pack = DatasetPack::load(data)?;
    let report = match (ws, width) {
        (Some(p), None) => {
            let sel = Checkpoint::load(p)?.selector()?;
            evaluate(&wab, EvalMode::Routed(&sel), &pack)?
        }
        (None, Some(r)) => evaluate(&wab, EvalMode::Fixed(r), &pack)?,
        _ => return Err(PipelineError::Usage("give exactly one of --ws and --width".into())),
    };
    report.write_json(&ctx.path("eval.json"))?;
    report.write_csv(&ctx.path("eval.csv"))?;
    Ok(report)
}

/// Trains one selector per target from the same seed and evaluates each
/// routed model; writes `sweep.csv` and `sweep.json`.
pub fn sweep_stage(ctx: &Context, data: &Path, eval_data: &Path, wab_path: &Path, targets: &[f64]) -> Result<Vec<SweepRow>> {
    let (_, wab) = load_wab(wab_path)?;
    let train = DatasetPack::load(data)?;
    let eval = DatasetPack::load(eval_data)?;
    let rows = sweep(ctx, &wab, &train, &eval, targets)?;
    write_sweep_csv(&rows, &ctx.path("sweep.csv"))?;
    let path = ctx.path("sweep.json");
    fs::write(&path, serde_json::to_vec_pretty(&rows)?).at(&path)?;
    Ok(rows)
}

/// In-memory sweep; the backbone targets are computed once and shared.
pub fn sweep(ctx: &Context, wab: &WabModel<f32>, train: &DatasetPack, eval: &DatasetPack, targets: &[f64]) -> Result<Vec<SweepRow>> {
    let precomputed = precompute_targets(wab, &train.train_samples()?)?;
    targets
        .iter()
        .map(|&t| {
            let (sel, _) = fit_selector(ctx, wab, &precomputed, SparsityTarget::new(t)?, |_| {})?;
            let r = evaluate(wab, EvalMode::Routed(&sel), eval)?;
            Ok(SweepRow {
                t,
                mean_psnr: r.mean_psnr,
                mean_flops: r.mean_flops,
                mean_width_ratio: r.mean_width_ratio,
            })
        })
        .collect()
}

/// Trains a selector in memory at target `t` from precomputed pack data.
pub fn train_selector(ctx: &Context, wab: &WabModel<f32>, train: &DatasetPack, t: f64) -> Result<(SelectorModel<f32>, Vec<WsEpochLog>)> {
    let targets = precompute_targets(wab, &train.train_samples()?)?;
    fit_selector(ctx, wab, &targets, SparsityTarget::new(t)?, |_| {})
}

/// Runs the chosen suites (all when empty); writes `verify.json`.
pub fn verify_stage(ctx: &Context, suites: &[Suite], mutate: bool) -> Result<Vec<SuiteReport>> {
    let opts = VerifyOptions {
        mutate,
        ..VerifyOptions::standard(ctx.config.seed)
    };
    let chosen: Vec<Suite> = if suites.is_empty() { Suite::ALL.to_vec() } else { suites.to_vec() };
    let reports = chosen.into_iter().map(|s| run_suite(s, &opts)).collect::<Result<Vec<_>>>()?;
    let path = ctx.path("verify.json");
    fs::write(&path, serde_json::to_vec_pretty(&reports)?).at(&path)?;
    Ok(reports)
}

/// Writes PPM previews of the first `limit` samples to `<out>/ppm`.
pub fn export_stage(ctx: &Context, data: &Path, limit: usize) -> Result<usize> {
    let pack = DatasetPack::load(data)?;
    export_ppm(&pack, &ctx.path("ppm"), limit)
}
