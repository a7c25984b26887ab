use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::config::ModelSpec;
use crate::alignment::{apply_projection, fit_projection, Projection};
use crate::error::{GmopeError, Result};
use crate::experts::{count_params, ExpertEnsemble, ParamMode};
use crate::graph::{Domain, GraphCollection};
use crate::metrics::{write_routing_csv, RoutingRecord};
use crate::objectives::{init_discriminator, PreparedGraph, Strategy, TaskHead};
use crate::prompt::PromptBank;
use crate::rng;
use crate::scalar::Scalar;

/// A dataset after feature alignment, ready for message passing.
#[derive(Debug, Clone)]
pub struct PreparedDataset<T> {
    pub name: String,
    pub domain: Domain,
    pub projection: Projection<T>,
    pub graphs: Vec<PreparedGraph<T>>,
    pub node_classes: Option<usize>,
    pub graph_classes: Option<usize>,
}

impl<T: Scalar> PreparedDataset<T> {
    /// Many small graphs (graph-level samples) versus one large graph.
    pub fn is_graph_level(&self) -> bool {
        self.graphs.len() > 1
    }

    pub fn aligned_dim(&self) -> usize {
        self.projection.target_dim()
    }

    /// Copy of a single-graph dataset whose graph keeps only `edges`.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        if self.graphs.len() != 1 {
            return Err(GmopeError::arg("edge restriction needs a single-graph dataset"));
        }
        let g = &self.graphs[0];
        let restricted = g.graph().with_edges(edges.iter().copied())?;
        Ok(PreparedDataset {
            graphs: vec![PreparedGraph::new(restricted, g.self_loops())],
            ..self.clone()
        })
    }
}

fn pad_columns<T: Scalar>(features: &Array2<T>, width: usize) -> Array2<T> {
    if features.ncols() >= width {
        return features.clone();
    }
    let mut out = Array2::zeros((features.nrows(), width));
    out.slice_mut(s![.., ..features.ncols()]).assign(features);
    out
}

/// Project every graph of `collection` to width `d0`.
///
/// The projection is fitted on the stacked features of the whole dataset
/// unless one is supplied (for example from a checkpoint). Datasets with fewer
/// than `d0` raw columns are zero-padded first, so the trailing basis columns
/// come out as flagged padding.
pub fn align_collection<T: Scalar>(
    collection: &GraphCollection<T>,
    d0: usize,
    self_loops: bool,
    projection: Option<Projection<T>>,
) -> Result<PreparedDataset<T>> {
    let width = collection.feature_dim().max(d0);
    let projection = match projection {
        Some(p) => {
            if p.target_dim() != d0 || p.source_dim() != width {
                return Err(GmopeError::Manifest(format!(
                    "stored projection for '{}' maps {} -> {}, dataset needs {} -> {}",
                    collection.name,
                    p.source_dim(),
                    p.target_dim(),
                    width,
                    d0
                )));
            }
            p
        }
        None => fit_projection(&pad_columns(&collection.stacked_features(), width), d0)?,
    };
    let graphs = collection
        .graphs
        .iter()
        .map(|g| {
            let aligned = apply_projection(&pad_columns(g.features(), width), &projection)?;
            Ok(PreparedGraph::new(g.with_features(aligned)?, self_loops))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedDataset {
        name: collection.name.clone(),
        domain: collection.domain,
        projection,
        graphs,
        node_classes: collection.node_classes,
        graph_classes: collection.graph_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// `init`, `pretrain` or `finetune`.
    pub stage: String,
    pub strategy: Option<Strategy>,
    pub steps: u64,
}

/// Everything a stage reads or produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub spec: ModelSpec,
    pub ensemble: ExpertEnsemble<T>,
    pub bank: PromptBank<T>,
    /// Bilinear DGI discriminator of each expert (unused by other strategies).
    pub discriminators: Vec<Array2<T>>,
    pub head: Option<TaskHead<T>>,
    pub projections: BTreeMap<String, Projection<T>>,
    pub provenance: Provenance,
}

impl<T: Scalar> ModelState<T> {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let ensemble = ExpertEnsemble::build(spec.experts, spec.encoder, rng::mix(&[seed, 0xe7]))?;
        let bank = PromptBank::init(spec.experts, spec.prompt_dim, rng::mix(&[seed, 0x9b]))?;
        let discriminators = (0..spec.experts)
            .map(|m| init_discriminator(spec.encoder.output_dim, m, seed))
            .collect();
        Ok(ModelState {
            spec,
            ensemble,
            bank,
            discriminators,
            head: None,
            projections: BTreeMap::new(),
            provenance: Provenance {
                stage: "init".into(),
                strategy: None,
                steps: 0,
            },
        })
    }

    pub fn head_params(&self) -> usize {
        self.head.as_ref().map_or(0, TaskHead::param_count)
    }

    pub fn param_count(&self, mode: ParamMode, include_heads: bool) -> usize {
        count_params(&self.ensemble, &self.bank, self.head_params(), mode, include_heads)
    }

    /// Little-endian bytes of every projection, for freeze checks.
    pub fn projection_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in &self.projections {
            out.extend(name.as_bytes());
            for v in p.basis().iter().chain(p.singular_values().iter()) {
                out.extend(v.to_f64_lossless().to_le_bytes());
            }
        }
        out
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: String,
    pub loss: f64,
    pub ortho_loss: f64,
    pub rawscores: Vec<f64>,
    pub val_metric: Option<f64>,
}

/// Metric stream and routing log of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub metrics: Vec<MetricRecord>,
    pub routing: Vec<RoutingRecord>,
}

impl RunLog {
    pub fn write_metrics_jsonl<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        for record in &self.metrics {
            serde_json::to_writer(&mut writer, record)?;
            writer.write_all(b"\n")?;
        }
        writer.flush()
    }

    pub fn write_routing_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_routing_csv(writer, &self.routing)
    }
}
