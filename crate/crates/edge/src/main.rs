//! `edge-distill`: distill, synthesize, caption, eval, ablate, baseline.
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use edge_distill::config::{AblationPlan, ExperimentConfig};
use edge_distill::pipeline::{
    self, SynthesisSource, FINETUNED_CKPT, PRETRAINED_CKPT,
};
use edge_distill::EdgeError;

#[derive(Parser)]
#[command(name = "edge-distill", version, about = "Generative vision-language dataset distillation")]
struct Cli {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed (propagates to training and synthesis).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineKind {
    Pretrained,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and fine-tune the generator; writes checkpoints + log.
    Distill,
    /// Sample a distilled dataset from a checkpoint.
    Synthesize {
        /// Checkpoint path; defaults to the run's fine-tuned checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Synthesize with a baseline source instead of the fine-tuned model.
        #[arg(long, value_enum)]
        baseline: Option<BaselineKind>,
    },
    /// Expand an existing distilled directory to N captions per image.
    Caption {
        #[arg(long)]
        distilled: Option<PathBuf>,
        #[arg(long)]
        cpi: Option<usize>,
    },
    /// Train the evaluation encoder and report retrieval metrics.
    Eval {
        #[arg(long)]
        distilled: Option<PathBuf>,
        /// Comma-separated evaluation seeds, e.g. 0,1,2.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run the loss-component ablation and write the table.
    Ablate,
    /// Synthesize + evaluate a baseline distilled set.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> edge_distill::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> edge_distill::Result<()> {
    let cfg = load_config(cli)?;
    let run_dir = cfg.run_dir();
    match &cli.command {
        Command::Distill => {
            let art = pipeline::cmd_distill(&cfg)?;
            println!("checkpoint: {}", art.finetuned.display());
            println!("pretrained: {}", art.pretrained.display());
            println!("train log:  {}", art.log.display());
        }
        Command::Synthesize { checkpoint, baseline } => {
            let source = match baseline {
                None => SynthesisSource::Finetuned(
                    checkpoint.clone().unwrap_or_else(|| run_dir.join(FINETUNED_CKPT)),
                ),
                Some(BaselineKind::Pretrained) => SynthesisSource::Pretrained(
                    checkpoint.clone().unwrap_or_else(|| run_dir.join(PRETRAINED_CKPT)),
                ),
                Some(BaselineKind::Random) => SynthesisSource::Random,
            };
            let dir = pipeline::cmd_synthesize(&cfg, &source)?;
            println!("distilled dataset: {}", dir.display());
        }
        Command::Caption { distilled, cpi } => {
            let dir = distilled.clone().unwrap_or_else(|| run_dir.join("distilled"));
            let cpi = cpi.unwrap_or(cfg.synthesis.cpi);
            let out = pipeline::cmd_caption(&cfg, &dir, cpi)?;
            println!("expanded to {cpi} captions per image: {}", out.display());
        }
        Command::Eval { distilled, seeds } => {
            let dir = distilled.clone().unwrap_or_else(|| run_dir.join("distilled"));
            let seeds = seeds.clone().unwrap_or_else(|| cfg.eval.seeds.clone());
            let (report, path) = pipeline::cmd_eval(&cfg, &dir, &seeds)?;
            for (seed, m) in &report.metrics.per_seed {
                println!("seed {seed}: IR@1={:.4} TR@1={:.4} align={:.4}",
                    m.ir_at[&cfg.eval.ks[0]], m.tr_at[&cfg.eval.ks[0]], m.alignment_score);
            }
            let mean = &report.metrics.mean;
            println!("mean:   IR@1={:.4} TR@1={:.4} align={:.4}",
                mean.ir_at[&cfg.eval.ks[0]], mean.tr_at[&cfg.eval.ks[0]], mean.alignment_score);
            println!("report: {}", path.display());
        }
        Command::Ablate => {
            let (table, path) = pipeline::cmd_ablate(&cfg, &AblationPlan::default())?;
            print!("{}", table.render_text());
            println!("table: {}", path.display());
        }
        Command::Baseline { kind, checkpoint } => {
            let source = match kind {
                BaselineKind::Pretrained => SynthesisSource::Pretrained(
                    checkpoint.clone().unwrap_or_else(|| run_dir.join(PRETRAINED_CKPT)),
                ),
                BaselineKind::Random => SynthesisSource::Random,
            };
            let dir = pipeline::cmd_synthesize(&cfg, &source)?;
            let (report, path) = pipeline::cmd_eval(&cfg, &dir, &cfg.eval.seeds)?;
            let mean = &report.metrics.mean;
            println!("baseline IR@1={:.4} TR@1={:.4} align={:.4}",
                mean.ir_at[&cfg.eval.ks[0]], mean.tr_at[&cfg.eval.ks[0]], mean.alignment_score);
            println!("report: {}", path.display());
        }
    }
    Ok(())
}

fn exit_code_for(err: &EdgeError) -> u8 {
    match err {
        EdgeError::Config(_) | EdgeError::Parse { .. } | EdgeError::Capacity { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
