use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fose::diffusion::InitNoise;
use fose::metrics::Resolution;
use fose::pipeline::data::stack_pairs;
use fose::pipeline::eval::{fuse, InferenceOptions, Method};
use fose::pipeline::train::load_split;
use fose::pipeline::{
    ablate, count_cost, emit_report, evaluate, run_stage, synthesize, AblateOptions, AblationKind, FoseConfig,
    RunOptions,
};
use fose::raster::{write_array, Split};
use fose::{Error, Result};

#[derive(Parser)]
#[command(name = "fose", version, about = "One-step diffusion pansharpening fused with an end-to-end network")]
struct Cli {
    /// Configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val/test splits under the data root.
    Synth,
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        stage: u8,
        /// Continue from the stage's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Fuse a split with the teacher (steps > 1) or the one-step student.
    Sample {
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value = "zero")]
        noise: InitNoise,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute quality metrics for a method and the EXP baseline.
    Eval {
        #[arg(long, default_value = "reduced")]
        resolution: Resolution,
        #[arg(long, default_value = "fose")]
        method: Method,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        noise: Option<InitNoise>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Depth, noise or structure ablation table.
    Ablate {
        #[arg(long)]
        kind: AblationKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training steps the depth ablation may spend.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and multiply-accumulate counts per method.
    Cost {
        /// Side of the square input; defaults to the configured gt size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Summary, metric tables, loss curves and image grids.
    Report {
        #[arg(long)]
        eval_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<FoseConfig> {
    match path {
        Some(p) => FoseConfig::load(p),
        None => {
            let cfg = FoseConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let root = cfg.run_root.clone();
    match cli.command {
        Command::Synth => {
            for d in synthesize(&cfg)? {
                println!("wrote {}", d.display());
            }
        }
        Command::Train { stage, resume, stop_after } => {
            let o = run_stage(&cfg, stage, RunOptions { resume, stop_after })?;
            let (a, b) = o.loss_window();
            println!(
                "stage {stage}: {} steps, loss {a:.6} -> {b:.6}, checkpoint {} ({})",
                o.final_step,
                o.checkpoint.display(),
                o.hash
            );
        }
        Command::Sample { steps, noise, seed, split, out } => {
            if steps == 0 {
                return Err(Error::InvalidArgument("steps must be positive".into()));
            }
            let method = if steps == 1 { Method::Osd } else { Method::Dm { steps } };
            let pairs = load_split(&cfg, split)?;
            let [_, lms, pan] = stack_pairs(&pairs)?;
            let fused = fuse(&cfg, method, &lms, &pan, InferenceOptions { init_noise: noise, seed })?;
            let out = out.unwrap_or_else(|| root.join("samples"));
            std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
            let dims: [usize; 4] = fused.dims().try_into().map_err(|_| Error::Dimension("fused rank".into()))?;
            let flat = fused.flatten_all()?.to_vec1::<f32>()?;
            let path = out.join(format!("{method}_{noise}_{split}.arr"));
            write_array(&path, dims, &flat)?;
            println!("{method}: {} images, {} denoiser calls each, wrote {}", dims[0], method.invocations(), path.display());
        }
        Command::Eval { resolution, method, split, noise, seed, out } => {
            let opts = InferenceOptions {
                init_noise: noise.unwrap_or(cfg.model.init_noise),
                seed,
            };
            let out = out.unwrap_or_else(|| root.join("eval"));
            let e = evaluate(&cfg, method, resolution, split, &out, opts)?;
            println!("{}\n{}", e.report.summary_line(), e.baseline.summary_line());
        }
        Command::Ablate { kind, seed, budget, out } => {
            let out = out.unwrap_or_else(|| root.join("ablate"));
            let t = ablate(&cfg, kind, &out, AblateOptions { seed, step_budget: budget })?;
            print!("{}", t.to_markdown());
        }
        Command::Cost { size } => {
            let s = size.unwrap_or(cfg.data.gt_size);
            let steps = cfg.model.sampler_steps;
            for m in [Method::Dm { steps }, Method::Osd, Method::E2e, Method::Fose] {
                print!("{}", count_cost(&cfg, m, s, s)?.to_text());
            }
        }
        Command::Report { eval_dir, out } => {
            let eval_dir = eval_dir.unwrap_or_else(|| root.join("eval"));
            let out = out.unwrap_or_else(|| root.join("report"));
            let files = emit_report(&cfg, &eval_dir, &out)?;
            println!("wrote {} files under {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
