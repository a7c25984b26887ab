//! The five experiment commands.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gmope::experts::{EncoderConfig, ParamMode};
use gmope::metrics::{mean_std, read_routing_csv, utilization, UtilizationReport};
use gmope::trainer::{
    finetune, load_checkpoint, pretrain, save_checkpoint, select_best, Checkpoint, EvalSplit, MetricRecord, ModelSpec,
    RunLog, TaskKind, TaskSetup,
};
use gmope::ModelState64;
use serde::Serialize;
use serde_json::Value;

use crate::config::{config_error, parse_assignment, parse_value, write_resolved, ExperimentConfig};
use crate::data::{prepare, pretraining_group};
use crate::plots::{bar_chart, line_chart};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_log(log: &RunLog, dir: &Path) -> Result<()> {
    let metrics = dir.join("metrics.jsonl");
    let file = fs::File::create(&metrics).with_context(|| format!("creating {}", metrics.display()))?;
    log.write_metrics_jsonl(BufWriter::new(file))?;
    let routing = dir.join("routing.csv");
    let file = fs::File::create(&routing).with_context(|| format!("creating {}", routing.display()))?;
    log.write_routing_csv(BufWriter::new(file))?;
    Ok(())
}

fn write_prompts(state: &ModelState64, dir: &Path) -> Result<()> {
    let path = dir.join("prompts.txt");
    fs::write(&path, state.bank.to_text()).with_context(|| format!("writing {}", path.display()))
}

fn utilization_plot(report: &UtilizationReport, dir: &Path, stage: &str) -> Result<()> {
    let plots = dir.join("plots");
    create_dir(&plots)?;
    let labels: Vec<String> = (0..report.mean_weights.len()).map(|m| format!("expert {m}")).collect();
    bar_chart(
        &plots.join(format!("{stage}-mean-weights.svg")),
        &format!("{stage}: mean gate weight (variance {:.4})", report.weight_variance),
        "mean weight",
        &labels,
        &report.mean_weights,
    )?;
    let counts: Vec<f64> = report.selection_counts.iter().map(|&c| c as f64).collect();
    bar_chart(
        &plots.join(format!("{stage}-selections.svg")),
        &format!("{stage}: selections (min/max {:.3})", report.selection_ratio),
        "batches",
        &labels,
        &counts,
    )
}

/// Model architecture the configuration asks for.
pub fn requested_spec(config: &ExperimentConfig) -> Result<ModelSpec> {
    let d0 = config.aligned_dim()?;
    Ok(config.model.resolve(d0, config.dataset_names().len())?)
}

pub struct PretrainResult {
    pub state: ModelState64,
    pub log: RunLog,
    pub utilization: UtilizationReport,
}

/// Pretrain on the configured group and write every artifact to `out`.
pub fn run_pretrain(config: &ExperimentConfig, out: &Path) -> Result<PretrainResult> {
    create_dir(out)?;
    write_resolved(config, out)?;
    let spec = requested_spec(config)?;
    let group = pretraining_group(config, spec.aligned_dim)?;
    let state = ModelState64::init(spec, config.train.seed)?;
    let (state, log) = pretrain(state, &group, &config.objective, &config.router, &config.train)?;
    save_checkpoint(
        &Checkpoint {
            config: config.to_value(),
            state: state.clone(),
        },
        &out.join("checkpoint.bin"),
    )?;
    write_log(&log, out)?;
    write_prompts(&state, out)?;
    let report = utilization(&log.routing)?;
    if config.output.plots {
        utilization_plot(&report, out, "pretrain")?;
    }
    Ok(PretrainResult {
        state,
        log,
        utilization: report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_episode: usize,
    pub val: f64,
    pub test: f64,
    pub selection_ratio: f64,
    pub weight_variance: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneSummary {
    pub dataset: String,
    pub metric: &'static str,
    pub runs: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Serialize)]
struct SeedRecord<'a> {
    seed: u64,
    #[serde(flatten)]
    record: &'a MetricRecord,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    dataset: &'a str,
    strategy: &'a str,
    tuner: &'a str,
    metric: &'a str,
    mean: f64,
    std: f64,
    runs: usize,
}

fn write_summary(path: &Path, rows: &[SummaryRow<'_>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Prompt-only fine-tuning of `checkpoint`, one run per seed.
///
/// Every seed gets its own subdirectory. The top-level `checkpoint.bin` and
/// `routing.csv` belong to the seed with the best validation metric;
/// `metrics.jsonl` holds every seed's records tagged with the seed.
pub fn run_finetune(
    config: &ExperimentConfig,
    checkpoint: &Checkpoint<f64>,
    seeds: &[u64],
    out: &Path,
) -> Result<FinetuneSummary> {
    if seeds.is_empty() {
        return Err(config_error("no fine-tuning seeds given"));
    }
    create_dir(out)?;
    write_resolved(config, out)?;
    checkpoint.state.spec.check_compatible(&requested_spec(config)?)?;
    let name = config.eval_dataset()?;
    let dataset = prepare(config, &name, checkpoint.state.spec.aligned_dim, &checkpoint.state.projections)?;
    let task = TaskSetup::new(&dataset, &config.eval.task)?;
    let mut state = checkpoint.state.clone();
    state.projections.insert(name.clone(), dataset.projection.clone());

    let mut runs = Vec::new();
    let mut outcomes = Vec::new();
    let mut all_metrics = Vec::new();
    for &seed in seeds {
        let train = gmope::trainer::TrainConfig { seed, ..config.train };
        let outcome = finetune(state.clone(), &task, &config.router, &train)
            .with_context(|| format!("fine-tuning seed {seed}"))?;
        let dir = out.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        let mut seed_config = config.clone();
        seed_config.train.seed = seed;
        save_checkpoint(
            &Checkpoint {
                config: seed_config.to_value(),
                state: outcome.state.clone(),
            },
            &dir.join("checkpoint.bin"),
        )?;
        write_log(&outcome.log, &dir)?;
        write_prompts(&outcome.state, &dir)?;
        for record in &outcome.log.metrics {
            all_metrics.push(serde_json::to_string(&SeedRecord { seed, record })?);
        }
        runs.push(SeedResult {
            seed,
            best_episode: outcome.best_episode,
            val: outcome.best_val,
            test: outcome.test,
            selection_ratio: outcome.utilization.selection_ratio,
            weight_variance: outcome.utilization.weight_variance,
        });
        outcomes.push((seed, outcome));
    }
    let mut text = all_metrics.join("\n");
    text.push('\n');
    fs::write(out.join("metrics.jsonl"), text)?;

    let vals: Vec<f64> = runs.iter().map(|r| r.val).collect();
    let best = select_best(&vals).unwrap_or(0);
    let (best_seed, best_outcome) = &outcomes[best];
    let mut best_config = config.clone();
    best_config.train.seed = *best_seed;
    save_checkpoint(
        &Checkpoint {
            config: best_config.to_value(),
            state: best_outcome.state.clone(),
        },
        &out.join("checkpoint.bin"),
    )?;
    let routing = fs::File::create(out.join("routing.csv"))?;
    best_outcome.log.write_routing_csv(BufWriter::new(routing))?;
    if config.output.plots {
        utilization_plot(&best_outcome.utilization, out, "finetune")?;
    }

    let tests: Vec<f64> = runs.iter().map(|r| r.test).collect();
    let (mean, std) = mean_std(&tests)?;
    let metric = task.kind().metric_name();
    write_summary(
        &out.join("summary.csv"),
        &[SummaryRow {
            dataset: &name,
            strategy: config.strategy().as_str(),
            tuner: "prompt",
            metric,
            mean,
            std,
            runs: runs.len(),
        }],
    )?;
    let runs_path = out.join("runs.csv");
    let mut w = csv::Writer::from_path(&runs_path)?;
    for r in &runs {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(FinetuneSummary {
        dataset: name,
        metric,
        runs,
        mean,
        std,
    })
}

pub fn load_compatible_checkpoint(path: &Path) -> Result<Checkpoint<f64>> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Score a fine-tuned checkpoint on one split of the configured task.
pub fn run_eval(config: &ExperimentConfig, checkpoint: &Checkpoint<f64>, split: EvalSplit) -> Result<(String, &'static str, f64)> {
    checkpoint.state.spec.check_compatible(&requested_spec(config)?)?;
    let name = config.eval_dataset()?;
    let dataset = prepare(config, &name, checkpoint.state.spec.aligned_dim, &checkpoint.state.projections)?;
    let task = TaskSetup::new(&dataset, &config.eval.task)?;
    let value = task.evaluate(&checkpoint.state, &config.router, split)?;
    Ok((name, task.kind().metric_name(), value))
}

pub fn routing_report(path: &Path) -> Result<UtilizationReport> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(utilization(&read_routing_csv(file)?)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamTable {
    pub experts: usize,
    pub prompt_dim: usize,
    pub aligned_dim: usize,
    /// Every encoder parameter of every expert, prompted input width.
    pub full: usize,
    /// One expert's encoder on the unprompted width `d0`.
    pub backbone_per_expert: usize,
    pub prompt_only: usize,
    pub head: usize,
}

/// Parameter counts of the configured model. Head parameters enter the
/// prompt-only total only when `eval.include_heads` is set.
pub fn param_table(config: &ExperimentConfig, head_classes: Option<usize>) -> Result<ParamTable> {
    let spec = requested_spec(config)?;
    let state = ModelState64::init(spec, config.train.seed)?;
    let width = spec.encoder.output_dim;
    let head = match (config.task_kind(), head_classes) {
        (TaskKind::Link, _) => width * width,
        (_, Some(c)) => width * c + c,
        (_, None) => 0,
    };
    let backbone = EncoderConfig {
        input_dim: spec.aligned_dim,
        ..spec.encoder
    };
    let prompt_only = state.param_count(ParamMode::PromptOnly, false) + if config.eval.include_heads { head } else { 0 };
    Ok(ParamTable {
        experts: spec.experts,
        prompt_dim: spec.prompt_dim,
        aligned_dim: spec.aligned_dim,
        full: state.param_count(ParamMode::Full, false),
        backbone_per_expert: backbone.param_count(),
        prompt_only,
        head,
    })
}

/// One `--sweep key=v1,v2,...` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<Value>,
}

pub fn parse_sweep(raw: &str) -> Result<SweepAxis> {
    let (key, list) = parse_assignment(raw)?;
    let values: Vec<Value> = list
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(parse_value)
        .collect();
    if values.is_empty() {
        return Err(config_error(format!("sweep over '{key}' lists no values")));
    }
    Ok(SweepAxis { key, values })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub index: usize,
    pub assignment: BTreeMap<String, Value>,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub pretrain_weight_variance: f64,
    pub finetune_selection_ratio: f64,
}

fn cross_product(axes: &[SweepAxis]) -> Vec<Vec<(String, Value)>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::new();
        for p in &points {
            for v in &axis.values {
                let mut q = p.clone();
                q.push((axis.key.clone(), v.clone()));
                next.push(q);
            }
        }
        points = next;
    }
    points
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Cross-product sweep: pretrain and fine-tune every point.
///
/// Points whose `router.k` exceeds `model.experts` are skipped so an M x K
/// grid stays triangular.
pub fn run_ablate(
    base_doc: Option<Value>,
    preset: Option<crate::config::Preset>,
    overrides: &[(String, Value)],
    axes: &[SweepAxis],
    seeds: Option<&[u64]>,
    out: &Path,
) -> Result<Vec<SweepPoint>> {
    if axes.is_empty() {
        return Err(config_error("ablate needs at least one --sweep key=v1,v2,..."));
    }
    let mut configs = Vec::new();
    for assignment in cross_product(axes) {
        let mut all = overrides.to_vec();
        all.extend(assignment.iter().cloned());
        let mut config = ExperimentConfig::resolve(base_doc.clone(), preset, &all)?;
        config.materialize();
        let spec = requested_spec(&config)?;
        if config.router.k.is_some_and(|k| k > spec.experts) {
            log::warn!("skipping sweep point {assignment:?}: router.k exceeds model.experts");
            continue;
        }
        configs.push((assignment, config));
    }
    if configs.is_empty() {
        return Err(config_error("every sweep point was invalid"));
    }
    create_dir(out)?;
    let base = ExperimentConfig::resolve(base_doc, preset, overrides)?;
    write_resolved(&base, out)?;

    let mut points = Vec::new();
    for (index, (assignment, config)) in configs.into_iter().enumerate() {
        let dir = out.join(format!("point-{index:03}"));
        log::info!("sweep point {index}: {assignment:?}");
        let pre = run_pretrain(&config, &dir.join("pretrain"))?;
        let ckpt = Checkpoint {
            config: config.to_value(),
            state: pre.state,
        };
        let seed_list: Vec<u64> = seeds.map_or_else(|| config.eval.seeds.clone(), <[u64]>::to_vec);
        let fine = run_finetune(&config, &ckpt, &seed_list, &dir.join("finetune"))?;
        let ratios: Vec<f64> = fine.runs.iter().map(|r| r.selection_ratio).collect();
        points.push(SweepPoint {
            index,
            assignment: assignment.into_iter().collect(),
            metric: fine.metric.to_string(),
            mean: fine.mean,
            std: fine.std,
            pretrain_weight_variance: pre.utilization.weight_variance,
            finetune_selection_ratio: mean_std(&ratios)?.0,
        });
    }

    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    let mut header: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    header.extend(
        ["metric", "mean", "std", "pretrain_weight_variance", "finetune_selection_ratio"].map(String::from),
    );
    w.write_record(&header)?;
    for p in &points {
        let mut row: Vec<String> = axes.iter().map(|a| value_label(&p.assignment[&a.key])).collect();
        row.extend([
            p.metric.clone(),
            p.mean.to_string(),
            p.std.to_string(),
            p.pretrain_weight_variance.to_string(),
            p.finetune_selection_ratio.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;

    let dataset = base.eval_dataset()?;
    let labels: Vec<String> = points
        .iter()
        .map(|p| {
            let parts: Vec<String> = p.assignment.iter().map(|(k, v)| format!("{k}={}", value_label(v))).collect();
            format!("prompt[{}]", parts.join(";"))
        })
        .collect();
    let rows: Vec<SummaryRow<'_>> = points
        .iter()
        .zip(&labels)
        .map(|(p, label)| SummaryRow {
            dataset: &dataset,
            strategy: base.strategy().as_str(),
            tuner: label,
            metric: &p.metric,
            mean: p.mean,
            std: p.std,
            runs: seeds.map_or(base.eval.seeds.len(), <[u64]>::len),
        })
        .collect();
    write_summary(&out.join("summary.csv"), &rows)?;

    if base.output.plots {
        sweep_plots(axes, &points, &out.join("plots"))?;
    }
    Ok(points)
}

/// For each swept key: metric and utilization against the key's value, one
/// series per combination of the other keys.
fn sweep_plots(axes: &[SweepAxis], points: &[SweepPoint], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for axis in axes {
        let numeric = axis.values.iter().all(Value::is_number);
        let x_of = |v: &Value| -> f64 {
            if numeric {
                v.as_f64().unwrap_or(0.0)
            } else {
                axis.values.iter().position(|w| w == v).unwrap_or(0) as f64
            }
        };
        let mut groups: BTreeMap<String, Vec<&SweepPoint>> = BTreeMap::new();
        for p in points {
            let rest: Vec<String> = p
                .assignment
                .iter()
                .filter(|(k, _)| **k != axis.key)
                .map(|(k, v)| format!("{k}={}", value_label(v)))
                .collect();
            groups.entry(rest.join(", ")).or_default().push(p);
        }
        let series = |f: &dyn Fn(&SweepPoint) -> f64| -> Vec<(String, Vec<(f64, f64)>)> {
            groups
                .iter()
                .map(|(name, ps)| {
                    let label = if name.is_empty() { axis.key.clone() } else { name.clone() };
                    (label, ps.iter().map(|p| (x_of(&p.assignment[&axis.key]), f(p))).collect())
                })
                .collect()
        };
        let stem = axis.key.replace('.', "_");
        let metric = points.first().map_or("metric", |p| p.metric.as_str());
        line_chart(
            &dir.join(format!("{stem}.svg")),
            &format!("{metric} vs {}", axis.key),
            &axis.key,
            metric,
            &series(&|p| p.mean),
        )?;
        line_chart(
            &dir.join(format!("{stem}-weight-variance.svg")),
            &format!("pretrain weight variance vs {}", axis.key),
            &axis.key,
            "variance of expert mean weights",
            &series(&|p| p.pretrain_weight_variance),
        )?;
        line_chart(
            &dir.join(format!("{stem}-selection-ratio.svg")),
            &format!("fine-tune selection ratio vs {}", axis.key),
            &axis.key,
            "min / max selections",
            &series(&|p| p.finetune_selection_ratio),
        )?;
    }
    Ok(())
}

pub fn default_out(config: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| config.output.dir.clone())
}
