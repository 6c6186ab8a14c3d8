use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mrp_lab::acceptance::{run_acceptance, Suite};
use mrp_lab::experiment::{
    prepare_output_dir, run_evaluate, run_experiment, run_finetune, run_generate, run_pretrain,
    ExperimentConfig, OutputPolicy, Pipeline,
};
use mrp_lab::io::{load_checkpoint, write_json};
use mrp_lab::{LabError, Result};

/// Mask-reconstruction pretraining lab: synthetic multi-view data,
/// teacher-student and MAE pretraining, fine-tuning and a supervised
/// baseline.
#[derive(Parser)]
#[command(name = "mrp-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the dictionary and every data split.
    Generate(Common),
    /// Pretrain the selected MRP pipelines.
    Pretrain(Common),
    /// Fine-tune a pretrained encoder (and/or train the supervised baseline).
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint for the MRP pipelines.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Evaluate a model checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint with encoder and head.
        #[arg(long)]
        model: PathBuf,
    },
    /// Run every selected pipeline end to end and compare them.
    Compare(Common),
    /// Run an acceptance suite: oracle, capture, downstream, mae or all.
    Accept {
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        policy: PolicyArgs,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to these pipelines (repeatable).
    #[arg(long, value_enum)]
    pipeline: Vec<PipelineArg>,
    /// Record full correlation snapshots during pretraining.
    #[arg(long)]
    verbose_probes: bool,
    /// Run pipelines concurrently.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct PolicyArgs {
    /// Replace an existing non-empty output directory.
    #[arg(long, conflicts_with = "versioned")]
    overwrite: bool,
    /// Write to `<out>-1`, `<out>-2`, ... when the directory is taken.
    #[arg(long)]
    versioned: bool,
}

impl PolicyArgs {
    fn policy(&self) -> OutputPolicy {
        if self.overwrite {
            OutputPolicy::Overwrite
        } else if self.versioned {
            OutputPolicy::Version
        } else {
            OutputPolicy::Refuse
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    TsMrp,
    MaeMrp,
    Supervised,
}

impl From<PipelineArg> for Pipeline {
    fn from(p: PipelineArg) -> Self {
        match p {
            PipelineArg::TsMrp => Pipeline::TsMrp,
            PipelineArg::MaeMrp => Pipeline::MaeMrp,
            PipelineArg::Supervised => Pipeline::Supervised,
        }
    }
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if !self.pipeline.is_empty() {
            cfg.pipelines = self.pipeline.iter().map(|&p| p.into()).collect();
        }
        cfg.verbose_probes |= self.verbose_probes;
        cfg.parallel |= self.parallel;
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .ok_or_else(|| LabError::Argument("no output directory: pass --out or set output_dir".into()))?;
        Ok((cfg, out))
    }

    fn prepare(&self, out: &Path) -> Result<PathBuf> {
        let out = prepare_output_dir(out, self.policy.policy())?;
        eprintln!("writing to {}", out.display());
        Ok(out)
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, out) = c.resolve()?;
            let out = c.prepare(&out)?;
            for s in run_generate(&cfg, &out)? {
                println!(
                    "{:<10} n={} multi-view={} single-view={}",
                    s.split,
                    s.summary.n,
                    s.summary.multi_per_class.iter().sum::<usize>(),
                    s.summary.single_per_class.iter().sum::<usize>()
                );
            }
        }
        Command::Pretrain(c) => {
            let (cfg, out) = c.resolve()?;
            let out = c.prepare(&out)?;
            for (p, s) in run_pretrain(&cfg, &out)? {
                println!(
                    "{:<10} captured {:.3}  winner in M0 {:.3}  specialized {:.3}",
                    p.name(),
                    s.captured_fraction,
                    s.winner_in_m0_fraction,
                    s.specialized_fraction
                );
            }
        }
        Command::Finetune { common, encoder } => {
            let (cfg, out) = common.resolve()?;
            let enc = encoder.as_deref().map(load_checkpoint).transpose()?.map(|(w, _, _)| w);
            if enc.is_none() && cfg.ordered_pipelines().iter().any(|p| p.is_pretrained()) {
                return Err(LabError::Argument("MRP pipelines need --encoder <checkpoint>".into()));
            }
            let out = common.prepare(&out)?;
            for (p, e) in run_finetune(&cfg, enc.as_ref(), &out)? {
                println!(
                    "{:<10} overall {:.3}  multi-view {:.3}  single-view {:.3}",
                    p.name(),
                    e.accuracy_overall,
                    e.accuracy_multiview,
                    e.accuracy_singleview
                );
            }
        }
        Command::Evaluate { common, model } => {
            let (cfg, out) = common.resolve()?;
            let (w, head, _) = load_checkpoint(&model)?;
            let head = head.ok_or_else(|| {
                LabError::Argument(format!("{} holds no classification head", model.display()))
            })?;
            let act = cfg.activation(cfg.ordered_pipelines()[0]);
            let out = common.prepare(&out)?;
            let e = run_evaluate(&cfg, &w, &head, &act, &out)?;
            println!(
                "overall {:.3}  multi-view {:.3}  single-view {:.3}",
                e.accuracy_overall, e.accuracy_multiview, e.accuracy_singleview
            );
        }
        Command::Compare(c) => {
            let (cfg, out) = c.resolve()?;
            let out = c.prepare(&out)?;
            let report = run_experiment(&cfg, &out)?;
            for s in &report.pipelines {
                println!(
                    "{:<10} overall {:.3}  multi-view {:.3}  single-view {:.3}",
                    s.pipeline.name(),
                    s.eval.accuracy_overall,
                    s.eval.accuracy_multiview,
                    s.eval.accuracy_singleview
                );
            }
            for g in &report.single_view_gaps {
                println!("single-view gap {} - supervised: {:+.3}", g.pipeline.name(), g.gap);
            }
        }
        Command::Accept { suite, out, policy } => {
            let suite = Suite::parse(&suite)?;
            let out = prepare_output_dir(&out.unwrap_or_else(|| PathBuf::from("acceptance")), policy.policy())?;
            eprintln!("writing to {}", out.display());
            let report = run_acceptance(suite, &out, &mut |r| println!("{}", r.line()))?;
            write_json(&out.join("acceptance.json"), &report)?;
            return Ok(report.all_pass());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
