//! Argument parsing and dispatch.

use std::ops::RangeInclusive;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gmope::trainer::EvalSplit;
use gmope::GmopeError;
use serde_json::Value;

use crate::commands::{
    default_out, load_compatible_checkpoint, param_table, parse_sweep, routing_report, run_ablate, run_eval,
    run_finetune, run_pretrain,
};
use crate::config::{config_error, parse_assignment, parse_value, ConfigError, ExperimentConfig, Preset};

#[derive(Debug, Parser)]
#[command(name = "gmope", version, about = "Mixture of prompted GNN experts: pretraining, fine-tuning, ablations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in starting point, applied beneath the file.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Dotted-path override, e.g. `train.lambda=0.5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Jointly pretrain experts and prompts on the configured dataset group.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default: `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training seed (default: `train.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Prompt-only fine-tuning of a pretrained checkpoint, one run per seed.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Pretrained `checkpoint.bin`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory (default: `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds as a list (`41,43`) or an inclusive range (`41..45`).
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Score a fine-tuned checkpoint, or summarize a routing log.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Fine-tuned `checkpoint.bin` to score.
        #[arg(long, required_unless_present = "routing")]
        checkpoint: Option<PathBuf>,
        /// Split to score.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// `routing.csv` to report expert utilization for.
        #[arg(long)]
        routing: Option<PathBuf>,
    },
    /// Cross-product sweep over configuration keys.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// `key=v1,v2,...` (repeatable).
        #[arg(long)]
        sweep: Vec<String>,
        /// Output directory (default: `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds per sweep point, as for `finetune`.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Print full versus prompt-only parameter counts.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
        /// Class count used to size a classification head.
        #[arg(long)]
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

/// `41..45`, `41..=45` or `41,42,43`.
pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let bad = || config_error(format!("cannot parse seeds '{raw}'"));
    let range = |a: &str, b: &str| -> Result<RangeInclusive<u64>> {
        Ok(a.trim().parse().map_err(|_| bad())?..=b.trim().parse().map_err(|_| bad())?)
    };
    let seeds: Vec<u64> = if let Some((a, b)) = raw.split_once("..=") {
        range(a, b)?.collect()
    } else if let Some((a, b)) = raw.split_once("..") {
        range(a, b)?.collect()
    } else {
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

impl ConfigArgs {
    fn document(&self) -> Result<Option<Value>> {
        let Some(path) = &self.config else { return Ok(None) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let doc = serde_json::from_str(&text)
            .map_err(|e| config_error(format!("config {} is not valid JSON: {e}", path.display())))?;
        Ok(Some(doc))
    }

    fn overrides(&self, extra: Vec<(String, Value)>) -> Result<Vec<(String, Value)>> {
        let mut out = Vec::new();
        for raw in &self.set {
            let (k, v) = parse_assignment(raw)?;
            out.push((k, parse_value(&v)));
        }
        out.extend(extra);
        Ok(out)
    }

    fn resolve(&self, extra: Vec<(String, Value)>) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::resolve(self.document()?, self.preset, &self.overrides(extra)?)?;
        config.materialize();
        Ok(config)
    }
}

fn out_override(out: &Option<PathBuf>) -> Vec<(String, Value)> {
    out.iter()
        .map(|p| ("output.dir".to_string(), Value::String(p.display().to_string())))
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, out, seed } => {
            let mut extra = out_override(&out);
            extra.extend(seed.map(|s| ("train.seed".to_string(), Value::from(s))));
            let config = config.resolve(extra)?;
            let dir = default_out(&config, out);
            let result = run_pretrain(&config, &dir)?;
            let last = result.log.metrics.last();
            println!(
                "pretrained {} experts for {} steps; final epoch loss {}; weight variance {:.6}; output in {}",
                result.state.spec.experts,
                result.state.provenance.steps,
                last.map_or("n/a".into(), |m| format!("{:.6}", m.loss)),
                result.utilization.weight_variance,
                dir.display()
            );
        }
        Command::Finetune {
            config,
            checkpoint,
            out,
            seeds,
        } => {
            let config = config.resolve(out_override(&out))?;
            let seeds = match seeds {
                Some(s) => parse_seeds(&s)?,
                None => config.eval.seeds.clone(),
            };
            let ckpt = load_compatible_checkpoint(&checkpoint)?;
            let dir = default_out(&config, out);
            let summary = run_finetune(&config, &ckpt, &seeds, &dir)?;
            for r in &summary.runs {
                println!(
                    "seed {}: best episode {}, val {} {:.4}, test {} {:.4}",
                    r.seed, r.best_episode, summary.metric, r.val, summary.metric, r.test
                );
            }
            println!(
                "{} {}: {:.4} ± {:.4} over {} runs; output in {}",
                summary.dataset,
                summary.metric,
                summary.mean,
                summary.std,
                summary.runs.len(),
                dir.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            routing,
        } => {
            if let Some(path) = routing {
                let report = routing_report(&path)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
            if let Some(path) = checkpoint {
                let config = config.resolve(Vec::new())?;
                let ckpt = load_compatible_checkpoint(&path)?;
                let split = match split {
                    SplitArg::Val => EvalSplit::Val,
                    SplitArg::Test => EvalSplit::Test,
                };
                let (dataset, metric, value) = run_eval(&config, &ckpt, split)?;
                println!("{dataset} {metric}: {value:.6}");
            }
        }
        Command::Ablate {
            config,
            sweep,
            out,
            seeds,
        } => {
            let axes = sweep.iter().map(|s| parse_sweep(s)).collect::<Result<Vec<_>>>()?;
            let seeds = seeds.map(|s| parse_seeds(&s)).transpose()?;
            let base = config.resolve(out_override(&out))?;
            let dir = default_out(&base, out.clone());
            let points = run_ablate(
                config.document()?,
                config.preset,
                &config.overrides(out_override(&out))?,
                &axes,
                seeds.as_deref(),
                &dir,
            )?;
            for p in &points {
                let point: Vec<String> = p.assignment.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!(
                    "{}: {} {:.4} ± {:.4}, pretrain weight variance {:.6}, fine-tune selection ratio {:.3}",
                    point.join(" "),
                    p.metric, p.mean, p.std, p.pretrain_weight_variance, p.finetune_selection_ratio
                );
            }
        }
        Command::Params { config, classes } => {
            let config = config.resolve(Vec::new())?;
            let t = param_table(&config, classes)?;
            println!("{:<34}{:>12}", "experts (M)", t.experts);
            println!("{:<34}{:>12}", "prompt width (d_p)", t.prompt_dim);
            println!("{:<34}{:>12}", "aligned width (d0)", t.aligned_dim);
            println!("{:<34}{:>12}", "full (all experts, prompted)", t.full);
            println!("{:<34}{:>12}", "full per expert (backbone)", t.backbone_per_expert);
            println!("{:<34}{:>12}", "task head", t.head);
            println!("{:<34}{:>12}", "prompt_only", t.prompt_only);
        }
    }
    Ok(())
}

/// 2 for configuration problems, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<GmopeError>().is_some_and(GmopeError::is_configuration) {
            return 2;
        }
    }
    1
}
