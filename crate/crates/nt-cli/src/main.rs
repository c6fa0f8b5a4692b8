//! `ntune`: the pipeline's command surface. Every subcommand is a thin
//! wrapper over the library stages; anything reproducible lives there.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nt_train::assemble::TaskKind;
use nt_train::config::RunConfig;
use nt_train::pipeline::{
    backbone_ckpt_path, genar_ckpt_path, load_data, pretrain_backbone, pretrain_genar, run_dir,
    run_eval, run_export_attention, run_gen_data, run_infer, run_inspect, run_tune,
};
use nt_train::{Result, TrainError};

#[derive(Parser)]
#[command(name = "ntune", version, about = "Sparse task tuning over a frozen backbone")]
struct Cli {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory stage artifacts are keyed into.
    #[arg(long, global = true, default_value = "results")]
    results: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Backbone,
    Genar,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a fresh synthetic dataset to the configured data path.
    GenData {
        /// Override the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Regenerate even if the directory is not empty.
        #[arg(long)]
        force: bool,
    },
    /// Run one frozen pretraining stage over the training split.
    Pretrain {
        #[arg(long, value_enum)]
        stage: Stage,
    },
    /// Tune the task additions against the frozen stages, then score the
    /// configured eval split.
    Tune {
        /// Backbone checkpoint; defaults to the hash-keyed artifact.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Generator checkpoint; defaults to the hash-keyed artifact.
        #[arg(long)]
        genar: Option<PathBuf>,
        /// Comma-separated task subset overriding the config's mix.
        #[arg(long, value_delimiter = ',')]
        task_mix: Option<Vec<String>>,
        /// Retune even if this config already has a finished run.
        #[arg(long)]
        force: bool,
    },
    /// Score a tuned checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Split to score; defaults to the config's eval split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Greedy-decode one sample under one task; prints the answer and
    /// writes masks (PGM) or the generated image (PPM).
    Infer {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export neuron retention frequencies from the eval split as CSV plus
    /// a tasks-by-neurons PGM heatmap.
    InspectActivations {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one attention head over one decoded sample as labeled CSV.
    ExportAttention {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        task: String,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_task(name: &str) -> Result<TaskKind> {
    TaskKind::parse(name)
        .ok_or_else(|| TrainError::Config(format!("unknown task {name:?}")))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_ref())?;
    let results = &cli.results;
    match cli.cmd {
        Cmd::GenData { out, force } => {
            if let Some(dir) = out {
                cfg.data.path = dir.to_string_lossy().into_owned();
            }
            let dir = run_gen_data(&cfg, force)?;
            println!("dataset written to {}", dir.display());
        }
        Cmd::Pretrain { stage } => {
            let ds = load_data(&cfg)?;
            let report = match stage {
                Stage::Backbone => pretrain_backbone(&cfg, &ds, results)?,
                Stage::Genar => pretrain_genar(&cfg, &ds, results)?,
            };
            println!(
                "checkpoint {} (loss {:.4} -> {:.4}{})",
                report.path.display(),
                report.initial_loss,
                report.final_loss,
                if report.reused { ", reused" } else { "" }
            );
        }
        Cmd::Tune { backbone, genar, task_mix, force } => {
            if let Some(mix) = task_mix {
                cfg.train.task_mix = mix;
                cfg.validate()?;
            }
            let ds = load_data(&cfg)?;
            let backbone = backbone.unwrap_or_else(|| backbone_ckpt_path(&cfg, results));
            let genar = genar.unwrap_or_else(|| genar_ckpt_path(&cfg, results));
            let out = run_tune(&cfg, &ds, &backbone, &genar, results, force)?;
            println!(
                "tuned checkpoint {}{}",
                out.ckpt.display(),
                if out.reused { " (reused)" } else { "" }
            );
            for (task, m) in &out.metrics.tasks {
                println!("  {task}: {}", m.summary());
            }
        }
        Cmd::Eval { ckpt, split } => {
            let ds = load_data(&cfg)?;
            let ckpt = ckpt.unwrap_or_else(|| run_dir(&cfg, results).join("tuned.ntck"));
            let split = split.unwrap_or_else(|| cfg.eval.split.clone());
            let (path, metrics) = run_eval(&cfg, &ds, &ckpt, &split)?;
            println!("metrics written to {}", path.display());
            for (task, m) in &metrics.tasks {
                println!("  {task}: {}", m.summary());
            }
        }
        Cmd::Infer { ckpt, sample, task, out } => {
            let ds = load_data(&cfg)?;
            let ckpt = ckpt.unwrap_or_else(|| run_dir(&cfg, results).join("tuned.ntck"));
            let task = parse_task(&task)?;
            let out = out.unwrap_or_else(|| {
                run_dir(&cfg, results).join(format!("infer-{sample}-{}", task.name()))
            });
            let res = run_infer(&cfg, &ds, &ckpt, &sample, task, &out)?;
            println!("{}", res.answer);
            for f in &res.files {
                println!("wrote {}", f.display());
            }
        }
        Cmd::InspectActivations { ckpt, out } => {
            let ds = load_data(&cfg)?;
            let ckpt = ckpt.unwrap_or_else(|| run_dir(&cfg, results).join("tuned.ntck"));
            let out = out.unwrap_or_else(|| run_dir(&cfg, results));
            for f in run_inspect(&cfg, &ds, &ckpt, &out)? {
                println!("wrote {}", f.display());
            }
        }
        Cmd::ExportAttention { ckpt, sample, task, layer, head, out } => {
            let ds = load_data(&cfg)?;
            let ckpt = ckpt.unwrap_or_else(|| run_dir(&cfg, results).join("tuned.ntck"));
            let task = parse_task(&task)?;
            let out = out.unwrap_or_else(|| {
                run_dir(&cfg, results)
                    .join(format!("attention-{sample}-{}-l{layer}h{head}.csv", task.name()))
            });
            let path = run_export_attention(&cfg, &ds, &ckpt, &sample, task, layer, head, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
