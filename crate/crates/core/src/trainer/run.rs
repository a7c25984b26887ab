use ndarray::Array1;

use super::config::{RouterConfig, TrainConfig};
use super::state::{MetricRecord, ModelState, PreparedDataset, Provenance, RunLog};
use super::task::{EvalSplit, TaskSetup};
use crate::error::{GmopeError, Result};
use crate::graph::{sample_batch, sample_graph_batch};
use crate::metrics::{utilization, RoutingRecord, UtilizationReport};
use crate::objectives::{
    finetune_objective, pretrain_objective, ModelGrads, ObjectiveConfig, PendingLoss, PreparedGraph, PretrainPlan,
    PromptedExpert,
};
use crate::optim::{Adam, AdamConfig};
use crate::router::{rawscore, route, RoutingDecision};
use crate::scalar::Scalar;

fn optimizer<T: Scalar>(train: &TrainConfig) -> Result<Adam<T>> {
    Adam::new(AdamConfig {
        learning_rate: train.learning_rate,
        weight_decay: train.weight_decay,
        ..AdamConfig::default()
    })
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossless()).collect()
}

fn routing_record<T: Scalar>(step: u64, stage: &str, dataset: &str, d: &RoutingDecision<T>) -> RoutingRecord {
    RoutingRecord {
        step,
        stage: stage.into(),
        dataset: dataset.into(),
        rawscores: to_f64(&d.rawscores),
        active: d.active.clone(),
        weights: to_f64(&d.weights),
    }
}

fn decide<T: Scalar>(pending: &[PendingLoss<T>], router: &RouterConfig, k: usize) -> Result<RoutingDecision<T>> {
    let per_sample: Vec<Vec<T>> = pending.iter().map(|p| p.per_sample.clone()).collect();
    route(
        &rawscore(&per_sample)?,
        router.mode,
        k,
        T::from_f64_lossy(router.temperature),
        router.score_direction,
    )
}

/// Prompt rows move when their expert was routed or the orthogonality term
/// contributes a gradient.
fn step_prompts<T: Scalar>(
    state: &mut ModelState<T>,
    grads: &ModelGrads<T>,
    decision: &RoutingDecision<T>,
    lambda: f64,
    opt: &mut Adam<T>,
) -> Result<()> {
    for m in 0..state.spec.experts {
        if decision.is_active(m) || (lambda > 0.0 && state.spec.experts > 1) {
            let mut row = state.bank.prompts().row(m).to_owned();
            opt.step(&format!("prompt.{m}"), &mut row, &grads.prompts.row(m).to_owned())?;
            state.bank.prompts_mut().row_mut(m).assign(&row);
        }
    }
    Ok(())
}

/// Interleave the per-epoch batches of every dataset round-robin.
fn schedule<T: Scalar>(datasets: &[PreparedDataset<T>], batch_size: usize) -> Vec<usize> {
    let counts: Vec<usize> = datasets
        .iter()
        .map(|d| {
            let items = if d.is_graph_level() { d.graphs.len() } else { d.graphs[0].node_count() };
            items.div_ceil(batch_size)
        })
        .collect();
    let rounds = counts.iter().copied().max().unwrap_or(0);
    let mut order = Vec::new();
    for r in 0..rounds {
        for (d, &c) in counts.iter().enumerate() {
            if r < c {
                order.push(d);
            }
        }
    }
    order
}

fn pretrain_batch<T: Scalar>(
    dataset: &PreparedDataset<T>,
    origin: usize,
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<PreparedGraph<T>>> {
    if dataset.is_graph_level() {
        let ids = sample_graph_batch(dataset.graphs.len(), batch_size.min(dataset.graphs.len()), seed, step)?;
        return Ok(ids.iter().map(|&g| dataset.graphs[g].clone()).collect());
    }
    let whole = &dataset.graphs[0];
    let n = whole.node_count();
    if batch_size >= n {
        return Ok(vec![whole.clone()]);
    }
    let batch = sample_batch(whole.graph(), origin, batch_size, seed, step)?;
    Ok(vec![PreparedGraph::new(batch.subgraph(whole.graph())?, whole.self_loops())])
}

/// Joint pretraining of experts and prompts over a group of datasets.
///
/// Each step samples a batch from one dataset, scores every expert on it,
/// routes, and updates the prompts, the routed experts and their DGI
/// discriminators. The final state is returned.
pub fn pretrain<T: Scalar>(
    mut state: ModelState<T>,
    datasets: &[PreparedDataset<T>],
    objective: &ObjectiveConfig,
    router: &RouterConfig,
    train: &TrainConfig,
) -> Result<(ModelState<T>, RunLog)> {
    train.validate()?;
    objective.validate()?;
    if !objective.strategy.is_pretraining() {
        return Err(GmopeError::Config(format!(
            "objective.strategy = {} is not a pretraining strategy",
            objective.strategy.as_str()
        )));
    }
    if datasets.is_empty() {
        return Err(GmopeError::Config("pretraining needs at least one dataset".into()));
    }
    for d in datasets {
        if d.aligned_dim() != state.spec.aligned_dim {
            return Err(GmopeError::Config(format!(
                "dataset '{}' is aligned to {} features but the model expects d0 = {}",
                d.name,
                d.aligned_dim(),
                state.spec.aligned_dim
            )));
        }
        state.projections.insert(d.name.clone(), d.projection.clone());
    }
    state.ensemble.set_frozen(false);
    let m = state.spec.experts;
    let k = router.k_for(m)?;
    let lambda = T::from_f64_lossy(train.lambda);
    let mut opt = optimizer::<T>(train)?;
    let mut log = RunLog::default();
    let mut step = 0u64;
    for epoch in 1..=train.epochs as u64 {
        let mut loss_sum = 0.0;
        let mut raw_sum = vec![0.0; m];
        let mut ortho = 0.0;
        let order = schedule(datasets, train.batch_size);
        for &d in &order {
            let dataset = &datasets[d];
            let batch = pretrain_batch(dataset, d, train.batch_size, train.seed, step)?;
            let plan = PretrainPlan::build(objective, &batch, dataset.is_graph_level(), train.seed, step)?;
            let pending = (0..m)
                .map(|e| {
                    let expert = PromptedExpert::new(state.ensemble.expert(e), state.bank.prompt(e));
                    plan.evaluate(expert, Some(&state.discriminators[e]))
                })
                .collect::<Result<Vec<_>>>()?;
            let decision = decide(&pending, router, k)?;
            let out = pretrain_objective(&plan, &pending, &state.ensemble, &state.bank, &decision, lambda)?;
            for &e in &decision.active {
                let grads = &out.grads.experts[e];
                let expert = state.ensemble.expert_mut(e)?;
                for l in 0..grads.weights.len() {
                    opt.step(&format!("expert.{e}.layer.{l}.weight"), &mut expert.weights_mut()[l], &grads.weights[l])?;
                    if !grads.biases[l].is_empty() {
                        opt.step(&format!("expert.{e}.layer.{l}.bias"), &mut expert.biases_mut()[l], &grads.biases[l])?;
                    }
                }
                if let Some(g) = &out.grads.discriminators[e] {
                    opt.step(&format!("discriminator.{e}"), &mut state.discriminators[e], g)?;
                }
            }
            step_prompts(&mut state, &out.grads, &decision, train.lambda, &mut opt)?;
            loss_sum += out.total.to_f64_lossless();
            ortho = out.ortho.to_f64_lossless();
            for (acc, r) in raw_sum.iter_mut().zip(&decision.rawscores) {
                *acc += r.to_f64_lossless();
            }
            log.routing.push(routing_record(step, "pretrain", &dataset.name, &decision));
            step += 1;
        }
        let n = order.len().max(1) as f64;
        log.metrics.push(MetricRecord {
            step: epoch,
            stage: "pretrain".into(),
            loss: loss_sum / n,
            ortho_loss: ortho,
            rawscores: raw_sum.iter().map(|r| r / n).collect(),
            val_metric: None,
        });
    }
    state.provenance = Provenance {
        stage: "pretrain".into(),
        strategy: Some(objective.strategy),
        steps: step,
    };
    Ok((state, log))
}

/// Index of the first maximum, or `None` for an empty or all-NaN sequence.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    /// State at the best validation episode.
    pub state: ModelState<T>,
    pub log: RunLog,
    /// 1-based episode whose parameters were kept.
    pub best_episode: usize,
    pub best_val: f64,
    pub test: f64,
    pub metric: &'static str,
    pub utilization: UtilizationReport,
}

/// Prompt-only adaptation on a downstream task.
///
/// Experts are frozen; prompts and a freshly initialized head are trained.
/// The parameters of the best validation episode are kept and scored on the
/// test split. Expert and projection bytes are compared before and after,
/// and any difference aborts with an invariant error.
pub fn finetune<T: Scalar>(
    mut state: ModelState<T>,
    task: &TaskSetup<T>,
    router: &RouterConfig,
    train: &TrainConfig,
) -> Result<FinetuneOutcome<T>> {
    train.validate()?;
    if train.episodes == 0 {
        return Err(GmopeError::Config("train.episodes must be positive".into()));
    }
    let m = state.spec.experts;
    let k = router.k_for(m)?;
    state.ensemble.set_frozen(true);
    let expert_bytes = state.ensemble.param_bytes();
    let projection_bytes = state.projection_bytes();
    state.head = Some(task.new_head(state.spec.encoder.output_dim, train.seed)?);
    let lambda = T::from_f64_lossy(train.lambda);
    let mut opt = optimizer::<T>(train)?;
    let mut log = RunLog::default();
    let mut best: Option<(usize, f64, ModelState<T>)> = None;
    for episode in 1..=train.episodes {
        let plan = task.episode_plan(episode as u64, train.batch_size, state.spec.pooling, train.seed)?;
        let head = state.head.as_ref().expect("head attached above");
        let pending = (0..m)
            .map(|e| plan.evaluate(PromptedExpert::new(state.ensemble.expert(e), state.bank.prompt(e)), head))
            .collect::<Result<Vec<_>>>()?;
        let decision = decide(&pending, router, k)?;
        let out = finetune_objective(&plan, &pending, &state.ensemble, &state.bank, head, &decision, lambda)?;
        if out.grads.expert_squared_norm() != T::zero() {
            return Err(GmopeError::Invariant("a frozen expert received a nonzero gradient".into()));
        }
        step_prompts(&mut state, &out.grads, &decision, train.lambda, &mut opt)?;
        if let Some(g) = &out.grads.head {
            let head = state.head.as_mut().expect("head attached above");
            opt.step("head.weight", &mut head.weight, &g.weight)?;
            if !g.bias.is_empty() {
                let mut bias: Array1<T> = head.bias.clone();
                opt.step("head.bias", &mut bias, &g.bias)?;
                head.bias = bias;
            }
        }
        log.routing.push(routing_record(episode as u64, "finetune", task.dataset(), &decision));
        let val = if episode % train.eval_every == 0 || episode == train.episodes {
            let v = task.evaluate(&state, router, EvalSplit::Val)?;
            if best.as_ref().is_none_or(|(_, b, _)| v > *b) {
                best = Some((episode, v, state.clone()));
            }
            Some(v)
        } else {
            None
        };
        log.metrics.push(MetricRecord {
            step: episode as u64,
            stage: "finetune".into(),
            loss: out.total.to_f64_lossless(),
            ortho_loss: out.ortho.to_f64_lossless(),
            rawscores: to_f64(&decision.rawscores),
            val_metric: val,
        });
    }
    let (best_episode, best_val, mut best_state) = best.expect("the last episode is always validated");
    if best_state.ensemble.param_bytes() != expert_bytes || best_state.projection_bytes() != projection_bytes {
        return Err(GmopeError::Invariant("expert or projection parameters changed during fine-tuning".into()));
    }
    let test = task.evaluate(&best_state, router, EvalSplit::Test)?;
    best_state.provenance = Provenance {
        stage: "finetune".into(),
        strategy: best_state.provenance.strategy,
        steps: best_episode as u64,
    };
    let utilization = utilization(&log.routing)?;
    Ok(FinetuneOutcome {
        state: best_state,
        log,
        best_episode,
        best_val,
        test,
        metric: task.kind().metric_name(),
        utilization,
    })
}
