use ndarray::{Array1, Array2};
use rand::seq::index;

use super::config::{RouterConfig, TaskConfig, TaskKind};
use super::state::{ModelState, PreparedDataset};
use crate::aggregation::{aggregate, ExpertPrediction};
use crate::error::{GmopeError, Result};
use crate::experts::{pool, Pooling};
use crate::graph::{make_split, sample_negative_edges, Granularity, Graph, GraphCollection};
use crate::metrics::{accuracy, auc};
use crate::objectives::{
    link_bce_with_grad, softmax_cross_entropy_with_grad, softmax_rows, PreparedGraph, PromptedExpert, TaskHead,
    TaskPlan,
};
use crate::rng;
use crate::router::{rawscore, route, RoutingDecision};
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Clone)]
struct Partition<I> {
    train: Vec<I>,
    val: Vec<I>,
    test: Vec<I>,
}

#[derive(Debug, Clone)]
enum TaskData<T> {
    Node {
        graph: PreparedGraph<T>,
        labels: Vec<usize>,
        split: Partition<usize>,
    },
    Graph {
        graphs: Vec<PreparedGraph<T>>,
        labels: Vec<usize>,
        split: Partition<usize>,
    },
    Link {
        /// Message-passing graph holding the training edges only.
        message: PreparedGraph<T>,
        /// Full edge set, used so negatives never hit a held-out edge.
        full: Graph<T>,
        pos: Partition<(usize, usize)>,
        neg: Partition<(usize, usize)>,
    },
}

/// A downstream task: split, episode sampling and evaluation.
#[derive(Debug, Clone)]
pub struct TaskSetup<T> {
    kind: TaskKind,
    dataset: String,
    classes: usize,
    negatives_per_positive: usize,
    data: TaskData<T>,
}

fn pick<I: Copy>(items: &[I], ids: &[usize]) -> Vec<I> {
    ids.iter().map(|&i| items[i]).collect()
}

fn partition<I: Copy>(items: &[I], split: &crate::graph::Split) -> Partition<I> {
    Partition {
        train: pick(items, &split.train),
        val: pick(items, &split.val),
        test: pick(items, &split.test),
    }
}

impl<T: Scalar> TaskSetup<T> {
    pub fn new(dataset: &PreparedDataset<T>, config: &TaskConfig) -> Result<Self> {
        // Splits only need sizes, so a featureless stand-in collection suffices.
        let shape = GraphCollection::new(
            dataset.name.clone(),
            dataset.domain,
            dataset.graphs.iter().map(|g| g.graph().clone()).collect(),
            None,
            None,
        )?;
        let (data, classes) = match config.kind {
            TaskKind::Node => {
                if dataset.is_graph_level() {
                    return Err(GmopeError::Config(format!("'{}' has many graphs; node tasks need one", dataset.name)));
                }
                let classes = dataset
                    .node_classes
                    .ok_or_else(|| GmopeError::Config(format!("'{}' has no node labels", dataset.name)))?;
                let graph = dataset.graphs[0].clone();
                let labels = graph.graph().node_labels().unwrap_or_default().to_vec();
                let split = make_split(&shape, Granularity::Node, config.ratios, config.split_seed)?;
                let ids: Vec<usize> = (0..graph.node_count()).collect();
                (
                    TaskData::Node {
                        split: partition(&ids, &split),
                        graph,
                        labels,
                    },
                    classes,
                )
            }
            TaskKind::Graph => {
                let classes = dataset
                    .graph_classes
                    .ok_or_else(|| GmopeError::Config(format!("'{}' has no graph labels", dataset.name)))?;
                let labels = dataset
                    .graphs
                    .iter()
                    .map(|g| g.graph().graph_label().ok_or_else(|| GmopeError::Config("unlabeled graph".into())))
                    .collect::<Result<Vec<_>>>()?;
                let split = make_split(&shape, Granularity::Graph, config.ratios, config.split_seed)?;
                let ids: Vec<usize> = (0..labels.len()).collect();
                (
                    TaskData::Graph {
                        split: partition(&ids, &split),
                        graphs: dataset.graphs.clone(),
                        labels,
                    },
                    classes,
                )
            }
            TaskKind::Link => {
                if dataset.is_graph_level() {
                    return Err(GmopeError::Config(format!("'{}' has many graphs; link tasks need one", dataset.name)));
                }
                let prepared = &dataset.graphs[0];
                let full = prepared.graph().clone();
                let split = make_split(&shape, Granularity::Edge, config.ratios, config.split_seed)?;
                let pos = partition(full.edges(), &split);
                let total = (pos.train.len() + pos.val.len() + pos.test.len()) * config.negatives_per_positive;
                let mut all_neg = sample_negative_edges(&full, total, rng::mix(&[config.split_seed, 0x11e9]))?;
                let k = config.negatives_per_positive;
                let test_neg = all_neg.split_off(all_neg.len() - pos.test.len() * k);
                let val_neg = all_neg.split_off(all_neg.len() - pos.val.len() * k);
                let message = PreparedGraph::new(full.with_edges(pos.train.iter().copied())?, prepared.self_loops());
                (
                    TaskData::Link {
                        message,
                        full,
                        neg: Partition {
                            train: all_neg,
                            val: val_neg,
                            test: test_neg,
                        },
                        pos,
                    },
                    0,
                )
            }
        };
        Ok(TaskSetup {
            kind: config.kind,
            dataset: dataset.name.clone(),
            classes,
            negatives_per_positive: config.negatives_per_positive,
            data,
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn dataset(&self) -> &str {
        &self.dataset
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// The dataset as pretraining may see it: held-out edges of a link task
    /// are removed so they never leak into pretraining.
    pub fn pretraining_view(&self, dataset: &PreparedDataset<T>) -> Result<PreparedDataset<T>> {
        match &self.data {
            TaskData::Link { pos, .. } => dataset.with_edges(&pos.train),
            _ => Ok(dataset.clone()),
        }
    }

    pub fn new_head(&self, width: usize, seed: u64) -> Result<TaskHead<T>> {
        match self.kind {
            TaskKind::Link => TaskHead::link(width),
            TaskKind::Node | TaskKind::Graph => TaskHead::classifier(width, self.classes, rng::mix(&[seed, 0x4ead])),
        }
    }

    /// Training batch of episode `episode`, drawn from the training split.
    pub fn episode_plan(&self, episode: u64, batch_size: usize, pooling: Pooling, seed: u64) -> Result<TaskPlan<T>> {
        let mut rng = rng::stream(seed, rng::mix(&[0xe915, episode]));
        let mut choose = |n: usize| -> Vec<usize> {
            let mut ids = index::sample(&mut rng, n, batch_size.min(n)).into_vec();
            ids.sort_unstable();
            ids
        };
        match &self.data {
            TaskData::Node { graph, labels, split } => {
                let rows = pick(&split.train, &choose(split.train.len()));
                let y = rows.iter().map(|&r| labels[r]).collect();
                TaskPlan::node(graph.clone(), rows, y)
            }
            TaskData::Graph { graphs, labels, split } => {
                let ids = pick(&split.train, &choose(split.train.len()));
                TaskPlan::graph(
                    ids.iter().map(|&g| graphs[g].clone()).collect(),
                    ids.iter().map(|&g| labels[g]).collect(),
                    pooling,
                )
            }
            TaskData::Link { message, full, pos, .. } => {
                let batch = pick(&pos.train, &choose(pos.train.len()));
                let neg = sample_negative_edges(
                    full,
                    batch.len() * self.negatives_per_positive,
                    rng::mix(&[seed, 0x6e65, episode]),
                )?;
                TaskPlan::link(message.clone(), batch, neg)
            }
        }
    }

    /// Per-expert head outputs for every sample: class logits per node or
    /// per graph, or transformed node embeddings for link scoring.
    fn outputs(&self, state: &ModelState<T>, head: &TaskHead<T>, m: usize) -> Result<Array2<T>> {
        let expert = PromptedExpert::new(state.ensemble.expert(m), state.bank.prompt(m));
        match &self.data {
            TaskData::Node { graph, .. } => head.forward(&expert.encode(graph)?),
            TaskData::Link { message, .. } => head.forward(&expert.encode(message)?),
            TaskData::Graph { graphs, .. } => {
                let mut pooled = Array2::zeros((graphs.len(), state.spec.encoder.output_dim));
                for (i, g) in graphs.iter().enumerate() {
                    pooled.row_mut(i).assign(&pool(&expert.encode(g)?, state.spec.pooling)?);
                }
                head.forward(&pooled)
            }
        }
    }

    /// Training-split loss of one expert from its outputs.
    fn train_loss(&self, outputs: &Array2<T>) -> Result<Vec<T>> {
        Ok(match &self.data {
            TaskData::Node { labels, split, .. } | TaskData::Graph { labels, split, .. } => {
                let y: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
                softmax_cross_entropy_with_grad(outputs, &split.train, &y)?.per_sample
            }
            TaskData::Link { pos, neg, .. } => link_bce_with_grad(outputs, &pos.train, &neg.train)?.per_sample,
        })
    }

    /// Route on the training split, aggregate the active experts by
    /// confidence and score the requested split.
    pub fn evaluate(&self, state: &ModelState<T>, router: &RouterConfig, split: EvalSplit) -> Result<f64> {
        let head = state
            .head
            .as_ref()
            .ok_or_else(|| GmopeError::State("evaluation needs a task head".into()))?;
        let m = state.spec.experts;
        let outputs = (0..m).map(|e| self.outputs(state, head, e)).collect::<Result<Vec<_>>>()?;
        let losses = outputs.iter().map(|o| self.train_loss(o)).collect::<Result<Vec<_>>>()?;
        let decision = inference_route(&losses, router, m)?;
        let empty = Array1::<T>::zeros(0);
        match &self.data {
            TaskData::Node { labels, split: part, .. } | TaskData::Graph { labels, split: part, .. } => {
                let ids = if split == EvalSplit::Val { &part.val } else { &part.test };
                let probs: Vec<Array2<T>> = outputs.iter().map(softmax_rows).collect();
                let mut predicted = Vec::with_capacity(ids.len());
                for &i in ids {
                    let preds = probs
                        .iter()
                        .map(|p| ExpertPrediction::new(empty.clone(), p.row(i).to_owned()))
                        .collect::<Result<Vec<_>>>()?;
                    predicted.push(aggregate(&preds, &decision.active)?.predicted_class());
                }
                let truth: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
                accuracy(&predicted, &truth)
            }
            TaskData::Link { pos, neg, .. } => {
                let (p, n) = match split {
                    EvalSplit::Val => (&pos.val, &neg.val),
                    EvalSplit::Test => (&pos.test, &neg.test),
                };
                let mut scores = Vec::with_capacity(p.len() + n.len());
                let mut labels = Vec::with_capacity(p.len() + n.len());
                for (pairs, label) in [(p, true), (n, false)] {
                    for &(u, v) in pairs.iter() {
                        let preds = outputs
                            .iter()
                            .map(|z| {
                                let prob = sigmoid(z.row(u).dot(&z.row(v)));
                                ExpertPrediction::new(empty.clone(), Array1::from(vec![prob, T::one() - prob]))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        scores.push(aggregate(&preds, &decision.active)?.distribution[0].to_f64_lossless());
                        labels.push(label);
                    }
                }
                auc(&scores, &labels)
            }
        }
    }
}

/// Active set used at inference: top-K of the training-split losses.
fn inference_route<T: Scalar>(losses: &[Vec<T>], router: &RouterConfig, m: usize) -> Result<RoutingDecision<T>> {
    let scores = rawscore(losses)?;
    route(
        &scores,
        router.mode,
        router.k_for(m)?,
        T::from_f64_lossy(router.temperature),
        router.score_direction,
    )
}
