use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uwadn::commands::{self, Context, SynthArgs, WAB_CHECKPOINT};
use uwadn::dataset::Split;
use uwadn::verify::Suite;
use uwadn::{Profile, Result, RunConfig};
use uwadn_core::degrade::Task;

#[derive(Parser, Debug)]
#[command(name = "uwadn", version, about = "Width-adaptive all-in-one image restoration")]
struct Cli {
    /// TOML run configuration, merged over the profile defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Default profile when the config file names none
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset pack into --out
    Synth {
        /// Comma-separated tasks, e.g. noise25,rain,haze
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<Task>>,
        /// Samples per task
        #[arg(long)]
        count: Option<usize>,
        /// Square image side
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Train the width-adaptive backbone
    TrainWab {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the width selector against a frozen backbone
    TrainWs {
        #[arg(long)]
        data: PathBuf,
        /// Backbone checkpoint (default: <out>/wab.ckpt)
        #[arg(long)]
        wab: Option<PathBuf>,
        #[arg(long)]
        target_t: Option<f64>,
    },
    /// Per-task quality and cost, routed (--ws) or at a fixed width ratio (--width)
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        wab: Option<PathBuf>,
        #[arg(long, conflicts_with = "width")]
        ws: Option<PathBuf>,
        #[arg(long)]
        width: Option<f64>,
    },
    /// Train and evaluate one selector per sparsity target
    SweepT {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        wab: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.6,0.7,0.8,0.9,1.0")]
        targets: Vec<f64>,
    },
    /// Run the invariant suites; exits nonzero on any failure
    Verify {
        /// grad, slicing, prefix, degrade or losses; repeat or omit for all
        #[arg(long)]
        suite: Vec<Suite>,
        /// Corrupt one shared-prefix weight to check that the prefix suite notices
        #[arg(long)]
        mutate: bool,
    },
    /// Write 8-bit PPM previews of a pack
    ExportPpm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Eval,
}

fn run(cli: Cli) -> Result<bool> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path, cli.profile)?,
        None => RunConfig::for_profile(cli.profile),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = Context::new(config, &cli.out)?;
    let default_wab = || cli.out.join(WAB_CHECKPOINT);
    match cli.command {
        Command::Synth {
            tasks,
            count,
            size,
            split,
        } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let pack = commands::synth(
                &ctx,
                &SynthArgs {
                    tasks,
                    count,
                    size,
                    split: Some(split),
                },
            )?;
            println!("wrote {} samples to {}", pack.len(), cli.out.display());
        }
        Command::TrainWab { data } => {
            let ck = commands::train_wab_stage(&ctx, &data, |l| {
                println!(
                    "epoch {:4}  recon {:.5}  distill {:.5}  de {:.5}  total {:.5}  ({:.1}s)",
                    l.epoch, l.recon, l.distill, l.de, l.total, l.seconds
                )
            })?;
            println!("checkpoint sha256 {}", ck.checksum());
        }
        Command::TrainWs { data, wab, target_t } => {
            let wab = wab.unwrap_or_else(default_wab);
            let ck = commands::train_ws_stage(&ctx, &data, &wab, target_t, |l| {
                println!(
                    "epoch {:3}  cls {:.5}  spars {:.5}  select {:.5}  total {:.5}  ratio {:.3}",
                    l.epoch, l.cls, l.spars, l.select, l.total, l.chosen_ratio
                )
            })?;
            println!("checkpoint sha256 {}", ck.checksum());
        }
        Command::Eval { data, wab, ws, width } => {
            let wab = wab.unwrap_or_else(default_wab);
            let r = commands::eval_stage(&ctx, &data, &wab, ws.as_deref(), width)?;
            for t in &r.tasks {
                println!(
                    "{:8}  psnr {:.3} (input {:.3})  ssim {:.4}  width {:.3}  flops {:.0}",
                    t.task.name(),
                    t.psnr,
                    t.input_psnr,
                    t.ssim,
                    t.mean_width_ratio,
                    t.mean_flops
                );
            }
            println!("average   psnr {:.3}  ssim {:.4}  width {:.3}  flops {:.0}", r.mean_psnr, r.mean_ssim, r.mean_width_ratio, r.mean_flops);
        }
        Command::SweepT {
            data,
            eval_data,
            wab,
            targets,
        } => {
            let wab = wab.unwrap_or_else(default_wab);
            for row in commands::sweep_stage(&ctx, &data, &eval_data, &wab, &targets)? {
                println!("t {:.2}  psnr {:.3}  flops {:.0}  width {:.3}", row.t, row.mean_psnr, row.mean_flops, row.mean_width_ratio);
            }
        }
        Command::Verify { suite, mutate } => {
            let reports = commands::verify_stage(&ctx, &suite, mutate)?;
            let mut ok = true;
            for r in &reports {
                println!("[{}] {} ({:.1}s)", if r.passed { "PASS" } else { "FAIL" }, r.suite.name(), r.seconds);
                for c in &r.checks {
                    println!("    {} {}: {:.3e} (limit {:.0e})", if c.passed { "ok  " } else { "FAIL" }, c.name, c.measured, c.limit);
                }
                ok &= r.passed;
            }
            return Ok(ok);
        }
        Command::ExportPpm { data, limit } => {
            let n = commands::export_stage(&ctx, &data, limit)?;
            println!("wrote {n} images to {}", cli.out.join("ppm").display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
