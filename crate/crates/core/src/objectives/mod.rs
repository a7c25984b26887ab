//! Pretraining strategies, task losses and the two stage objectives.
//!
//! A training step runs in two phases. Every expert is first evaluated on the
//! same [`PretrainPlan`] or [`TaskPlan`] (same negatives, corruptions and
//! augmentations), producing a [`PendingLoss`] whose per-sample values feed the
//! router. The stage objective then weights those losses by the routing
//! decision and backpropagates only through experts with nonzero gate weight.

mod heads;
mod losses;

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use heads::{init_discriminator, HeadGrads, HeadKind, TaskHead};
pub use losses::{
    dgi_loss, dgi_summary, dgi_with_grad, edgepred_loss, gae_loss, graphcl_loss, graphcl_with_grad,
    link_bce_with_grad, softmax_cross_entropy_with_grad, softmax_rows, task_cross_entropy, ContrastiveGrad, DgiGrad,
    LossGrad, PROB_FLOOR,
};

use crate::error::{GmopeError, Result};
use crate::experts::{pool, pool_backward, EncoderGrads, ExpertEnsemble, ForwardCache, GcnEncoder, GraphEncoder, NormalizedAdjacency, Pooling};
use crate::graph::{sample_negative_edges, Graph};
use crate::prompt::{augment_with, ortho_loss, ortho_loss_gradient, PromptBank};
use crate::rng;
use crate::router::RoutingDecision;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "gae")]
    Gae,
    #[serde(rename = "dgi")]
    Dgi,
    #[serde(rename = "graphcl")]
    GraphCl,
    #[serde(rename = "edgepred")]
    EdgePred,
    #[serde(rename = "task_node")]
    TaskNode,
    #[serde(rename = "task_graph")]
    TaskGraph,
    #[serde(rename = "task_link")]
    TaskLink,
}

impl Strategy {
    pub fn is_pretraining(self) -> bool {
        matches!(self, Strategy::Gae | Strategy::Dgi | Strategy::GraphCl | Strategy::EdgePred)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Gae => "gae",
            Strategy::Dgi => "dgi",
            Strategy::GraphCl => "graphcl",
            Strategy::EdgePred => "edgepred",
            Strategy::TaskNode => "task_node",
            Strategy::TaskGraph => "task_graph",
            Strategy::TaskLink => "task_link",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub strategy: Strategy,
    pub negatives_per_positive: usize,
    pub edge_drop_rate: f64,
    pub feature_mask_rate: f64,
    pub contrastive_temperature: f64,
    /// Fraction of a batch's edges hidden from message passing and used as
    /// EdgePred targets.
    pub edge_holdout_rate: f64,
    pub pooling: Pooling,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            strategy: Strategy::Gae,
            negatives_per_positive: 1,
            edge_drop_rate: 0.2,
            feature_mask_rate: 0.2,
            contrastive_temperature: 0.2,
            edge_holdout_rate: 0.2,
            pooling: Pooling::Mean,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..1.0).contains(&r);
        if !rate_ok(self.edge_drop_rate) || !rate_ok(self.feature_mask_rate) || !rate_ok(self.edge_holdout_rate) {
            return Err(GmopeError::Config("objective rates must lie in [0, 1)".into()));
        }
        if !(self.contrastive_temperature > 0.0) || !self.contrastive_temperature.is_finite() {
            return Err(GmopeError::Config("objective.contrastive_temperature must be positive".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(GmopeError::Config("objective.negatives_per_positive must be at least 1".into()));
        }
        Ok(())
    }
}

/// A graph with aligned features and a precomputed normalized adjacency.
///
/// `graph` keeps the full edge set (used for negative sampling) while `adj`
/// and `features` may describe an augmented view of it.
#[derive(Debug, Clone)]
pub struct PreparedGraph<T> {
    graph: Arc<Graph<T>>,
    adj: Arc<NormalizedAdjacency<T>>,
    features: Arc<Array2<T>>,
    self_loops: bool,
}

impl<T: Scalar> PreparedGraph<T> {
    pub fn new(graph: Graph<T>, self_loops: bool) -> Self {
        let adj = NormalizedAdjacency::new(graph.node_count(), graph.edges(), self_loops);
        PreparedGraph {
            features: Arc::new(graph.features().clone()),
            graph: Arc::new(graph),
            adj: Arc::new(adj),
            self_loops,
        }
    }

    /// Same graph, message passing restricted to `edges`.
    pub fn with_message_edges(&self, edges: &[(usize, usize)]) -> Self {
        PreparedGraph {
            adj: Arc::new(NormalizedAdjacency::new(self.node_count(), edges, self.self_loops)),
            ..self.clone()
        }
    }

    pub fn with_view_features(&self, features: Array2<T>) -> Result<Self> {
        if features.dim() != self.features.dim() {
            return Err(GmopeError::arg("view features must keep the original shape"));
        }
        Ok(PreparedGraph {
            features: Arc::new(features),
            ..self.clone()
        })
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency<T> {
        &self.adj
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn self_loops(&self) -> bool {
        self.self_loops
    }
}

/// An expert paired with its prompt.
#[derive(Debug, Clone, Copy)]
pub struct PromptedExpert<'a, T> {
    pub encoder: &'a GcnEncoder<T>,
    pub prompt: ArrayView1<'a, T>,
}

impl<'a, T: Scalar> PromptedExpert<'a, T> {
    pub fn new(encoder: &'a GcnEncoder<T>, prompt: ArrayView1<'a, T>) -> Self {
        PromptedExpert { encoder, prompt }
    }

    pub fn forward(&self, view: &PreparedGraph<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        let x = augment_with(view.features(), self.prompt);
        self.encoder.forward(view.adjacency(), &x)
    }

    pub fn encode(&self, view: &PreparedGraph<T>) -> Result<Array2<T>> {
        Ok(self.forward(view)?.0)
    }
}

#[derive(Debug, Clone)]
enum Unit {
    Link {
        view: usize,
        pos: Vec<(usize, usize)>,
        neg: Vec<(usize, usize)>,
    },
    Dgi {
        real: usize,
        corrupt: usize,
    },
    ContrastNodes {
        a: usize,
        b: usize,
    },
    ContrastGraphs {
        a: Vec<usize>,
        b: Vec<usize>,
    },
}

/// Seed of the negative edges drawn for graph `graph` of pretraining step `step`.
pub fn negative_seed(seed: u64, step: u64, graph: usize) -> u64 {
    rng::mix(&[seed, 0x6e65, step, graph as u64])
}

/// Every random draw of one pretraining step, shared by all experts.
#[derive(Debug, Clone)]
pub struct PretrainPlan<T> {
    strategy: Strategy,
    views: Vec<PreparedGraph<T>>,
    units: Vec<Unit>,
    temperature: T,
    pooling: Pooling,
}

fn drop_edges<R: rand::Rng>(edges: &[(usize, usize)], rate: f64, rng: &mut R) -> Vec<(usize, usize)> {
    edges.iter().copied().filter(|_| rng.gen::<f64>() >= rate).collect()
}

fn mask_columns<T: Scalar, R: rand::Rng>(features: &Array2<T>, rate: f64, rng: &mut R) -> Array2<T> {
    let mut out = features.clone();
    for mut col in out.columns_mut() {
        if rng.gen::<f64>() < rate {
            col.fill(T::zero());
        }
    }
    out
}

impl<T: Scalar> PretrainPlan<T> {
    /// Draw negatives, corruptions or augmented views for `batch`.
    ///
    /// With `graph_level` set each graph is one sample; otherwise the batch
    /// must hold a single (sub)graph whose scored items are the samples.
    pub fn build(
        config: &ObjectiveConfig,
        batch: &[PreparedGraph<T>],
        graph_level: bool,
        seed: u64,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        if batch.is_empty() {
            return Err(GmopeError::arg("pretraining batch is empty"));
        }
        if !graph_level && batch.len() != 1 {
            return Err(GmopeError::arg("a node-level batch holds exactly one subgraph"));
        }
        let stream = |g: usize, purpose: u64| rng::stream(seed, rng::mix(&[0x57e9, step, g as u64, purpose]));
        let neg_seed = |g: usize| negative_seed(seed, step, g);
        let mut views = Vec::new();
        let mut units = Vec::new();
        match config.strategy {
            Strategy::Gae => {
                for (g, prepared) in batch.iter().enumerate() {
                    let pos = prepared.graph().edges().to_vec();
                    let Some(neg) = negatives(prepared.graph(), pos.len() * config.negatives_per_positive, neg_seed(g))?
                    else {
                        continue;
                    };
                    if pos.is_empty() {
                        continue;
                    }
                    views.push(prepared.clone());
                    units.push(Unit::Link {
                        view: views.len() - 1,
                        pos,
                        neg,
                    });
                }
            }
            Strategy::EdgePred => {
                for (g, prepared) in batch.iter().enumerate() {
                    let mut edges = prepared.graph().edges().to_vec();
                    if edges.is_empty() {
                        continue;
                    }
                    edges.shuffle(&mut stream(g, 1));
                    let hold = ((edges.len() as f64 * config.edge_holdout_rate).round() as usize).clamp(1, edges.len());
                    let pos: Vec<_> = edges[..hold].to_vec();
                    let Some(neg) = negatives(prepared.graph(), hold * config.negatives_per_positive, neg_seed(g))?
                    else {
                        continue;
                    };
                    views.push(prepared.with_message_edges(&edges[hold..]));
                    units.push(Unit::Link {
                        view: views.len() - 1,
                        pos,
                        neg,
                    });
                }
            }
            Strategy::Dgi => {
                for (g, prepared) in batch.iter().enumerate() {
                    let mut perm: Vec<usize> = (0..prepared.node_count()).collect();
                    perm.shuffle(&mut stream(g, 2));
                    let corrupted = prepared.features().select(ndarray::Axis(0), &perm);
                    views.push(prepared.clone());
                    views.push(prepared.with_view_features(corrupted)?);
                    units.push(Unit::Dgi {
                        real: views.len() - 2,
                        corrupt: views.len() - 1,
                    });
                }
            }
            Strategy::GraphCl => {
                let mut a = Vec::new();
                let mut b = Vec::new();
                for (g, prepared) in batch.iter().enumerate() {
                    for (side, list) in [(3u64, &mut a), (4u64, &mut b)] {
                        let mut rng = stream(g, side);
                        let kept = drop_edges(prepared.graph().edges(), config.edge_drop_rate, &mut rng);
                        let masked = mask_columns(prepared.features(), config.feature_mask_rate, &mut rng);
                        views.push(prepared.with_message_edges(&kept).with_view_features(masked)?);
                        list.push(views.len() - 1);
                    }
                }
                if graph_level {
                    units.push(Unit::ContrastGraphs { a, b });
                } else {
                    units.push(Unit::ContrastNodes { a: a[0], b: b[0] });
                }
            }
            other => {
                return Err(GmopeError::arg(format!("{} is not a pretraining strategy", other.as_str())));
            }
        }
        if units.is_empty() {
            return Err(GmopeError::Sampling("no graph in the batch can be scored by this strategy".into()));
        }
        Ok(PretrainPlan {
            strategy: config.strategy,
            views,
            units,
            temperature: T::from_f64_lossy(config.contrastive_temperature),
            pooling: config.pooling,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn views(&self) -> &[PreparedGraph<T>] {
        &self.views
    }

    /// Forward one expert and compute its loss; the backward pass is deferred.
    pub fn evaluate(&self, expert: PromptedExpert<'_, T>, discriminator: Option<&Array2<T>>) -> Result<PendingLoss<T>> {
        let mut fwd = Forwards::new(self.views.len());
        let mut unit_values = Vec::with_capacity(self.units.len());
        let mut unit_samples = Vec::new();
        let mut disc_grad = None;
        let scale = T::one() / T::from_usize_lossy(self.units.len());
        for unit in &self.units {
            match unit {
                Unit::Link { view, pos, neg } => {
                    let emb = fwd.embed(expert, &self.views, *view)?;
                    let lg = link_bce_with_grad(emb, pos, neg)?;
                    fwd.add_grad(*view, &lg.grad, scale);
                    unit_values.push(lg.value);
                    unit_samples = lg.per_sample;
                }
                Unit::Dgi { real, corrupt } => {
                    let w = discriminator.ok_or_else(|| GmopeError::State("DGI needs a discriminator".into()))?;
                    let h = fwd.embed(expert, &self.views, *real)?.clone();
                    let hc = fwd.embed(expert, &self.views, *corrupt)?;
                    let dg = dgi_with_grad(&h, hc, w)?;
                    fwd.add_grad(*real, &dg.grad_real, scale);
                    fwd.add_grad(*corrupt, &dg.grad_corrupt, scale);
                    let acc = disc_grad.get_or_insert_with(|| Array2::zeros(w.raw_dim()));
                    acc.scaled_add(scale, &dg.grad_weight);
                    unit_values.push(dg.value);
                    unit_samples = dg.per_sample;
                }
                Unit::ContrastNodes { a, b } => {
                    let za = fwd.embed(expert, &self.views, *a)?.clone();
                    let zb = fwd.embed(expert, &self.views, *b)?;
                    let cg = graphcl_with_grad(&za, zb, self.temperature)?;
                    fwd.add_grad(*a, &cg.grad_view1, scale);
                    fwd.add_grad(*b, &cg.grad_view2, scale);
                    unit_values.push(cg.value);
                    unit_samples = cg.per_sample;
                }
                Unit::ContrastGraphs { a, b } => {
                    let pooled = |fwd: &mut Forwards<T>, ids: &[usize]| -> Result<Array2<T>> {
                        let mut rows = Vec::with_capacity(ids.len());
                        for &v in ids {
                            rows.push(pool(fwd.embed(expert, &self.views, v)?, self.pooling)?);
                        }
                        stack_rows(&rows)
                    };
                    let za = pooled(&mut fwd, a)?;
                    let zb = pooled(&mut fwd, b)?;
                    let cg = graphcl_with_grad(&za, &zb, self.temperature)?;
                    for (ids, grad) in [(a, &cg.grad_view1), (b, &cg.grad_view2)] {
                        for (i, &v) in ids.iter().enumerate() {
                            let rows = self.views[v].node_count();
                            let g = pool_backward(&grad.row(i).to_owned(), rows, self.pooling);
                            fwd.add_grad(v, &g, scale);
                        }
                    }
                    unit_values.push(cg.value);
                    unit_samples = cg.per_sample;
                }
            }
        }
        let per_sample = if self.units.len() == 1 { unit_samples } else { unit_values };
        Ok(PendingLoss::finish(per_sample, fwd, disc_grad, None))
    }
}

fn negatives<T: Scalar>(graph: &Graph<T>, wanted: usize, seed: u64) -> Result<Option<Vec<(usize, usize)>>> {
    let n = graph.node_count();
    let available = (n * n.saturating_sub(1) / 2).saturating_sub(graph.edge_count());
    let count = wanted.min(available);
    if count == 0 {
        return Ok(None);
    }
    sample_negative_edges(graph, count, seed).map(Some)
}

fn stack_rows<T: Scalar>(rows: &[Array1<T>]) -> Result<Array2<T>> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// Lazily computed forward passes of one expert over the views of a plan.
struct Forwards<T> {
    outputs: Vec<Option<(Array2<T>, ForwardCache<T>)>>,
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Forwards<T> {
    fn new(views: usize) -> Self {
        Forwards {
            outputs: (0..views).map(|_| None).collect(),
            grads: (0..views).map(|_| None).collect(),
        }
    }

    fn embed(&mut self, expert: PromptedExpert<'_, T>, views: &[PreparedGraph<T>], v: usize) -> Result<&Array2<T>> {
        if self.outputs[v].is_none() {
            self.outputs[v] = Some(expert.forward(&views[v])?);
        }
        Ok(&self.outputs[v].as_ref().unwrap().0)
    }

    fn add_grad(&mut self, v: usize, grad: &Array2<T>, scale: T) {
        let slot = self.grads[v].get_or_insert_with(|| Array2::zeros(grad.raw_dim()));
        slot.scaled_add(scale, grad);
    }
}

/// One expert's loss on a plan, with everything needed for a later backward.
#[derive(Debug, Clone)]
pub struct PendingLoss<T> {
    pub value: T,
    pub per_sample: Vec<T>,
    parts: Vec<(usize, ForwardCache<T>, Array2<T>)>,
    discriminator_grad: Option<Array2<T>>,
    head_grad: Option<HeadGrads<T>>,
}

/// Gradients of one expert's branch, already scaled.
#[derive(Debug, Clone)]
pub struct BranchGrads<T> {
    pub encoder: EncoderGrads<T>,
    pub prompt: Array1<T>,
    pub discriminator: Option<Array2<T>>,
    pub head: Option<HeadGrads<T>>,
}

impl<T: Scalar> PendingLoss<T> {
    fn finish(
        per_sample: Vec<T>,
        fwd: Forwards<T>,
        discriminator_grad: Option<Array2<T>>,
        head_grad: Option<HeadGrads<T>>,
    ) -> Self {
        let value = per_sample.iter().copied().sum::<T>() / T::from_usize_lossy(per_sample.len().max(1));
        let parts = fwd
            .outputs
            .into_iter()
            .zip(fwd.grads)
            .enumerate()
            .filter_map(|(v, (out, g))| Some((v, out?.1, g?)))
            .collect();
        PendingLoss {
            value,
            per_sample,
            parts,
            discriminator_grad,
            head_grad,
        }
    }

    /// Backpropagate `scale * loss` through the expert that produced it.
    pub fn backward(&self, views: &[PreparedGraph<T>], encoder: &GcnEncoder<T>, scale: T) -> BranchGrads<T> {
        let mut grads = EncoderGrads::zeros_like(encoder);
        let width = encoder.config().input_dim;
        let mut prompt: Option<Array1<T>> = None;
        for (v, cache, d_emb) in &self.parts {
            let view = &views[*v];
            let (g, dx) = encoder.backward(view.adjacency(), cache, &(d_emb * scale));
            grads.accumulate(&g, T::one());
            let d0 = view.features().ncols();
            let cols = dx.slice(s![.., d0..width]).sum_axis(ndarray::Axis(0));
            match prompt.as_mut() {
                Some(p) => *p += &cols,
                None => prompt = Some(cols),
            }
        }
        let d_p = width - views.first().map_or(width, |v| v.features().ncols());
        BranchGrads {
            encoder: grads,
            prompt: prompt.unwrap_or_else(|| Array1::zeros(d_p)),
            discriminator: self.discriminator_grad.as_ref().map(|g| g * scale),
            head: self.head_grad.as_ref().map(|h| HeadGrads {
                weight: &h.weight * scale,
                bias: &h.bias * scale,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub enum TaskTargets {
    Node { rows: Vec<usize>, labels: Vec<usize> },
    Graph { labels: Vec<usize> },
    Link { pos: Vec<(usize, usize)>, neg: Vec<(usize, usize)> },
}

/// A supervised batch for downstream adaptation.
#[derive(Debug, Clone)]
pub struct TaskPlan<T> {
    views: Vec<PreparedGraph<T>>,
    targets: TaskTargets,
    pooling: Pooling,
}

impl<T: Scalar> TaskPlan<T> {
    pub fn node(graph: PreparedGraph<T>, rows: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        if rows.is_empty() || rows.len() != labels.len() || rows.iter().any(|&r| r >= graph.node_count()) {
            return Err(GmopeError::arg("node batch needs one in-range row per label"));
        }
        Ok(TaskPlan {
            views: vec![graph],
            targets: TaskTargets::Node { rows, labels },
            pooling: Pooling::Mean,
        })
    }

    pub fn graph(graphs: Vec<PreparedGraph<T>>, labels: Vec<usize>, pooling: Pooling) -> Result<Self> {
        if graphs.is_empty() || graphs.len() != labels.len() {
            return Err(GmopeError::arg("graph batch needs one label per graph"));
        }
        Ok(TaskPlan {
            views: graphs,
            targets: TaskTargets::Graph { labels },
            pooling,
        })
    }

    pub fn link(graph: PreparedGraph<T>, pos: Vec<(usize, usize)>, neg: Vec<(usize, usize)>) -> Result<Self> {
        if pos.is_empty() || neg.is_empty() {
            return Err(GmopeError::arg("link batch needs positive and negative pairs"));
        }
        Ok(TaskPlan {
            views: vec![graph],
            targets: TaskTargets::Link { pos, neg },
            pooling: Pooling::Mean,
        })
    }

    pub fn views(&self) -> &[PreparedGraph<T>] {
        &self.views
    }

    pub fn targets(&self) -> &TaskTargets {
        &self.targets
    }

    pub fn evaluate(&self, expert: PromptedExpert<'_, T>, head: &TaskHead<T>) -> Result<PendingLoss<T>> {
        let mut fwd = Forwards::new(self.views.len());
        let (per_sample, head_grad) = match &self.targets {
            TaskTargets::Node { rows, labels } => {
                let h = fwd.embed(expert, &self.views, 0)?.clone();
                let logits = head.forward(&h)?;
                let lg = softmax_cross_entropy_with_grad(&logits, rows, labels)?;
                let (hg, dh) = head.backward(&h, &lg.grad);
                fwd.add_grad(0, &dh, T::one());
                (lg.per_sample, hg)
            }
            TaskTargets::Graph { labels } => {
                let mut rows = Vec::with_capacity(self.views.len());
                for v in 0..self.views.len() {
                    rows.push(pool(fwd.embed(expert, &self.views, v)?, self.pooling)?);
                }
                let pooled = stack_rows(&rows)?;
                let logits = head.forward(&pooled)?;
                let all: Vec<usize> = (0..labels.len()).collect();
                let lg = softmax_cross_entropy_with_grad(&logits, &all, labels)?;
                let (hg, dpooled) = head.backward(&pooled, &lg.grad);
                for v in 0..self.views.len() {
                    let g = pool_backward(&dpooled.row(v).to_owned(), self.views[v].node_count(), self.pooling);
                    fwd.add_grad(v, &g, T::one());
                }
                (lg.per_sample, hg)
            }
            TaskTargets::Link { pos, neg } => {
                let h = fwd.embed(expert, &self.views, 0)?.clone();
                let z = head.forward(&h)?;
                let lg = link_bce_with_grad(&z, pos, neg)?;
                let (hg, dh) = head.backward(&h, &lg.grad);
                fwd.add_grad(0, &dh, T::one());
                (lg.per_sample, hg)
            }
        };
        Ok(PendingLoss::finish(per_sample, fwd, None, Some(head_grad)))
    }
}

/// `(1/(B·M)) Σ_i Σ_m g_m L_{m,i}` over per-sample losses of every expert.
pub fn weighted_loss<T: Scalar>(per_sample: &[Vec<T>], weights: &[T]) -> Result<T> {
    let m = per_sample.len();
    if m == 0 || weights.len() != m {
        return Err(GmopeError::arg("need one loss vector and one gate weight per expert"));
    }
    let b = per_sample[0].len();
    if b == 0 || per_sample.iter().any(|s| s.len() != b) {
        return Err(GmopeError::arg("every expert must score the same non-empty batch"));
    }
    let mut total = T::zero();
    for (losses, &g) in per_sample.iter().zip(weights) {
        if g != T::zero() {
            total += g * losses.iter().copied().sum::<T>();
        }
    }
    Ok(total / T::from_usize_lossy(b * m))
}

/// Gradients for every trainable tensor of the model.
#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub experts: Vec<EncoderGrads<T>>,
    pub prompts: Array2<T>,
    pub discriminators: Vec<Option<Array2<T>>>,
    pub head: Option<HeadGrads<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    fn zeros(ensemble: &ExpertEnsemble<T>, bank: &PromptBank<T>) -> Self {
        ModelGrads {
            experts: ensemble.experts().iter().map(EncoderGrads::zeros_like).collect(),
            prompts: Array2::zeros(bank.prompts().raw_dim()),
            discriminators: vec![None; ensemble.len()],
            head: None,
        }
    }

    pub fn expert_squared_norm(&self) -> T {
        self.experts.iter().map(EncoderGrads::squared_norm).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue<T> {
    pub total: T,
    pub weighted: T,
    pub ortho: T,
    pub grads: ModelGrads<T>,
}

fn check_stage<T: Scalar>(
    pending: &[PendingLoss<T>],
    ensemble: &ExpertEnsemble<T>,
    bank: &PromptBank<T>,
    decision: &RoutingDecision<T>,
    lambda: T,
) -> Result<()> {
    if lambda < T::zero() || !lambda.is_finite() {
        return Err(GmopeError::arg("orthogonality weight must be a finite non-negative number"));
    }
    let m = ensemble.len();
    if pending.len() != m || bank.experts() != m || decision.experts() != m {
        return Err(GmopeError::arg("ensemble, prompt bank, losses and routing disagree on M"));
    }
    Ok(())
}

fn add_ortho<T: Scalar>(bank: &PromptBank<T>, lambda: T, grads: &mut ModelGrads<T>) -> Result<T> {
    let ortho = ortho_loss(bank)?;
    if lambda > T::zero() {
        grads.prompts.scaled_add(lambda, &ortho_loss_gradient(bank)?);
    }
    Ok(ortho)
}

/// Joint pretraining objective: `λ·L_ortho + (1/(B·M)) Σ_i Σ_m g_m L_pre`.
///
/// Experts with zero gate weight are not backpropagated.
pub fn pretrain_objective<T: Scalar>(
    plan: &PretrainPlan<T>,
    pending: &[PendingLoss<T>],
    ensemble: &ExpertEnsemble<T>,
    bank: &PromptBank<T>,
    decision: &RoutingDecision<T>,
    lambda: T,
) -> Result<ObjectiveValue<T>> {
    check_stage(pending, ensemble, bank, decision, lambda)?;
    let per_sample: Vec<Vec<T>> = pending.iter().map(|p| p.per_sample.clone()).collect();
    let weighted = weighted_loss(&per_sample, &decision.weights)?;
    let mut grads = ModelGrads::zeros(ensemble, bank);
    let m = T::from_usize_lossy(ensemble.len());
    for (i, p) in pending.iter().enumerate() {
        let g = decision.weights[i];
        if g == T::zero() {
            continue;
        }
        let branch = p.backward(plan.views(), ensemble.expert(i), g / m);
        if !ensemble.is_frozen(i) {
            grads.experts[i] = branch.encoder;
        }
        grads.prompts.row_mut(i).scaled_add(T::one(), &branch.prompt);
        grads.discriminators[i] = branch.discriminator;
    }
    let ortho = add_ortho(bank, lambda, &mut grads)?;
    Ok(ObjectiveValue {
        total: lambda * ortho + weighted,
        weighted,
        ortho,
        grads,
    })
}

/// Prompt-only adaptation objective: `λ·L_ortho + (1/(B·M)) Σ_i Σ_m g_m L_task`.
///
/// Gradients reach prompts and the shared head only; expert gradients stay
/// identically zero.
pub fn finetune_objective<T: Scalar>(
    plan: &TaskPlan<T>,
    pending: &[PendingLoss<T>],
    ensemble: &ExpertEnsemble<T>,
    bank: &PromptBank<T>,
    head: &TaskHead<T>,
    decision: &RoutingDecision<T>,
    lambda: T,
) -> Result<ObjectiveValue<T>> {
    if !ensemble.all_frozen() {
        return Err(GmopeError::State("fine-tuning requires a frozen expert ensemble".into()));
    }
    check_stage(pending, ensemble, bank, decision, lambda)?;
    let per_sample: Vec<Vec<T>> = pending.iter().map(|p| p.per_sample.clone()).collect();
    let weighted = weighted_loss(&per_sample, &decision.weights)?;
    let mut grads = ModelGrads::zeros(ensemble, bank);
    let mut head_grads = HeadGrads::zeros_like(head);
    let m = T::from_usize_lossy(ensemble.len());
    for (i, p) in pending.iter().enumerate() {
        let g = decision.weights[i];
        if g == T::zero() {
            continue;
        }
        let branch = p.backward(plan.views(), ensemble.expert(i), g / m);
        grads.prompts.row_mut(i).scaled_add(T::one(), &branch.prompt);
        if let Some(h) = branch.head {
            head_grads.accumulate(&h, T::one());
        }
    }
    grads.head = Some(head_grads);
    let ortho = add_ortho(bank, lambda, &mut grads)?;
    Ok(ObjectiveValue {
        total: lambda * ortho + weighted,
        weighted,
        ortho,
        grads,
    })
}
