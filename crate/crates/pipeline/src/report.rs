//! Evaluation reports: per-task quality, chosen widths and cost.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uwadn_core::degrade::Task;
use uwadn_core::metrics::{count_flops, psnr, ssim};
use uwadn_core::selector::{route_and_restore, SelectorModel};
use uwadn_core::tensor::Tensor;
use uwadn_core::wab::WabModel;

use crate::dataset::DatasetPack;
use crate::error::{IoContext, PipelineError, Result};

/// Fixed width (as a ratio of `ω`) or routed by a selector.
#[derive(Clone, Copy, Debug)]
pub enum EvalMode<'a> {
    Fixed(f64),
    Routed(&'a SelectorModel<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub samples: usize,
    /// Quality of the unrestored input, for reference.
    pub input_psnr: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mean_width_ratio: f64,
    pub mean_flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `"width=0.6"` or `"routed"`.
    pub mode: String,
    pub tasks: Vec<TaskReport>,
    /// Unweighted means over tasks.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_width_ratio: f64,
    pub mean_flops: f64,
    /// Full-width FLOPs of the backbone on one image, for comparison.
    pub full_width_flops: u64,
    pub params: u64,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == task)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).at(path)
    }

    /// One row per metric, one column per task plus `average`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["metric".to_string()];
        head.extend(self.tasks.iter().map(|t| t.task.name().to_string()));
        head.push("average".into());
        w.write_record(&head)?;
        let rows: [(&str, fn(&TaskReport) -> f64, f64); 5] = [
            ("input_psnr", |t| t.input_psnr, mean(self.tasks.iter().map(|t| t.input_psnr))),
            ("psnr", |t| t.psnr, self.mean_psnr),
            ("ssim", |t| t.ssim, self.mean_ssim),
            ("width_ratio", |t| t.mean_width_ratio, self.mean_width_ratio),
            ("flops", |t| t.mean_flops, self.mean_flops),
        ];
        for (name, get, avg) in rows {
            let mut rec = vec![name.to_string()];
            rec.extend(self.tasks.iter().map(|t| format!("{:.6}", get(t))));
            rec.push(format!("{avg:.6}"));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| PipelineError::Usage(e.to_string()))?;
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(&bytes).at(path)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Width in channels for a ratio, which must name a candidate.
pub fn width_for_ratio(wab: &WabModel<f32>, ratio: f64) -> Result<usize> {
    let c = wab.candidates();
    c.ratios()
        .iter()
        .position(|&r| (r - ratio).abs() < 1e-9)
        .map(|i| c.widths()[i])
        .ok_or_else(|| PipelineError::Usage(format!("width ratio {ratio} is not one of {:?}", c.ratios())))
}

/// Restores every sample of `pack` and aggregates per task.
pub fn evaluate(wab: &WabModel<f32>, mode: EvalMode<'_>, pack: &DatasetPack) -> Result<EvalReport> {
    const CHUNK: usize = 16;
    let size = pack.manifest.image_size;
    let desc = wab.config().describe();
    let omega = wab.config().omega;
    let full_width_flops = count_flops(&desc, omega, size, size)?.flops;
    let (forced, label) = match mode {
        EvalMode::Fixed(r) => (Some(width_for_ratio(wab, r)?), format!("width={r}")),
        EvalMode::Routed(_) => (None, "routed".to_string()),
    };
    // per sample: (psnr, ssim, input psnr, width, flops)
    let mut rows: Vec<(f64, f64, f64, usize, u64)> = Vec::with_capacity(pack.len());
    let idx: Vec<usize> = (0..pack.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let x = Tensor::stack(&chunk.iter().map(|&i| &pack.degraded[i]).collect::<Vec<_>>())?
            .reshape(&[chunk.len(), 3, size, size])?;
        let outputs: Vec<(Tensor<f32>, usize, u64)> = match mode {
            EvalMode::Routed(sel) => route_and_restore(wab, sel, &x, None)?
                .into_iter()
                .map(|r| (r.restored, r.decision.chosen_width, r.flops))
                .collect(),
            EvalMode::Fixed(_) => {
                let w = forced.expect("fixed mode has a width");
                let (restored, _) = wab.forward(&x, w)?;
                let flops = count_flops(&desc, w, size, size)?.flops;
                (0..chunk.len())
                    .map(|i| Ok((restored.batch_item(i)?, w, flops)))
                    .collect::<Result<_>>()?
            }
        };
        for (&i, (restored, w, flops)) in chunk.iter().zip(outputs) {
            let restored = restored.reshape(&[3, size, size])?;
            let clean = &pack.clean[i];
            rows.push((
                psnr(&restored, clean, 1.0)?,
                ssim(&restored, clean)?,
                psnr(&pack.degraded[i], clean, 1.0)?,
                w,
                flops,
            ));
        }
    }
    let mut tasks = Vec::new();
    for task in pack.tasks() {
        let sel: Vec<&(f64, f64, f64, usize, u64)> = rows
            .iter()
            .zip(&pack.manifest.samples)
            .filter(|(_, r)| r.task == task)
            .map(|(row, _)| row)
            .collect();
        tasks.push(TaskReport {
            task,
            samples: sel.len(),
            input_psnr: mean(sel.iter().map(|r| r.2)),
            psnr: mean(sel.iter().map(|r| r.0)),
            ssim: mean(sel.iter().map(|r| r.1)),
            mean_width_ratio: mean(sel.iter().map(|r| r.3 as f64 / omega as f64)),
            mean_flops: mean(sel.iter().map(|r| r.4 as f64)),
        });
    }
    let params = match mode {
        EvalMode::Fixed(_) => wab.param_count() as u64,
        EvalMode::Routed(sel) => (wab.param_count() + sel.param_count()) as u64,
    };
    Ok(EvalReport {
        mode: label,
        mean_psnr: mean(tasks.iter().map(|t| t.psnr)),
        mean_ssim: mean(tasks.iter().map(|t| t.ssim)),
        mean_width_ratio: mean(tasks.iter().map(|t| t.mean_width_ratio)),
        mean_flops: mean(tasks.iter().map(|t| t.mean_flops)),
        tasks,
        full_width_flops,
        params,
    })
}

/// One row of a sparsity-target sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub mean_psnr: f64,
    pub mean_flops: f64,
    pub mean_width_ratio: f64,
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)
}
