use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pcrl::config::RunConfig;
use pcrl::run::{self, report_json, FinetuneTask};
use pcrl_core::downstream::ProbeTask;
use pcrl_core::pretrain::Ablation;

#[derive(Parser)]
#[command(name = "pcrl", version, about = "Contrastive pretraining with preserved transformations, finetuning and probes")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the corpus and every run, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "pcrl-out")]
    out: PathBuf,
    /// Pretraining variant, overriding the config.
    #[arg(long, global = true, value_enum)]
    ablation: Option<AblationArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into --out.
    GenData,
    /// Pretrain; writes config.json, log.jsonl, checkpoint/ and state/ into --out.
    Pretrain {
        /// Corpus archive; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from --out/state if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Finetune from a checkpoint (or from scratch) and report on the test split.
    Finetune {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Linear probe on a frozen encoder (random init without --checkpoint).
    Probe {
        #[arg(long, value_enum)]
        task: ProbeArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a predictions archive written by finetune.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Run the built-in oracle and invariant checks.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Segmentation,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeArg {
    Rotation,
    Position,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblationArg {
    ContraOnly,
    SelfRecons,
    TransattFlip,
    Transatt,
    Crossmix,
    Full,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::ContraOnly => Ablation::ContraOnly,
            AblationArg::SelfRecons => Ablation::SelfRecons,
            AblationArg::TransattFlip => Ablation::TransattFlip,
            AblationArg::Transatt => Ablation::Transatt,
            AblationArg::Crossmix => Ablation::Crossmix,
            AblationArg::Full => Ablation::Full,
        }
    }
}

fn config(cli: &Cli) -> pcrl::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(a) = cli.ablation {
        cfg = cfg.with_ablation(a.into());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> pcrl::Result<bool> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Verify => {
            let checks = pcrl::verify::run_all();
            for c in &checks {
                match &c.outcome {
                    Ok(()) => println!("PASS {}", c.name),
                    Err(e) => println!("FAIL {}: {e}", c.name),
                }
            }
            return Ok(checks.iter().all(|c| c.outcome.is_ok()));
        }
        Command::Evaluate { predictions } => print!("{}", report_json(&run::evaluate(predictions)?)),
        Command::GenData => {
            let cfg = config(cli)?;
            let c = run::gen_data(&cfg, out)?;
            eprintln!("wrote {} samples to {}", c.len(), out.display());
        }
        Command::Pretrain { data, resume } => {
            let cfg = config(cli)?;
            let tr = run::pretrain(&cfg, data.as_deref(), out, *resume)?;
            let p = &tr.progress;
            println!(
                "{}",
                serde_json::json!({
                    "epochs": p.epoch,
                    "iterations": p.iteration,
                    "best_val_total": p.early_stopping.best,
                    "checkpoint": out.join("checkpoint"),
                })
            );
        }
        Command::Finetune { task, checkpoint, data } => {
            let cfg = config(cli)?;
            let task = match task {
                TaskArg::Classification => FinetuneTask::Classification,
                TaskArg::Segmentation => FinetuneTask::Segmentation,
            };
            let r = run::finetune(&cfg, task, checkpoint.as_deref(), data.as_deref(), Some(out))?;
            print!("{}", report_json(&r));
        }
        Command::Probe { task, checkpoint, data } => {
            let cfg = config(cli)?;
            let task = match task {
                ProbeArg::Rotation => ProbeTask::Rotation,
                ProbeArg::Position => ProbeTask::Position,
            };
            print!("{}", report_json(&run::probe(&cfg, task, checkpoint.as_deref(), data.as_deref())?));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
