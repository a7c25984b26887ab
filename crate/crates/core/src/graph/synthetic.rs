//! Stochastic block model corpora for experiments that need no downloads.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Domain, Graph, GraphCollection};
use crate::error::{GmopeError, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureGenerator {
    /// Block mean drawn from `N(0, separation²)` per coordinate plus unit noise.
    Gaussian { separation: f64 },
    /// Each block owns a slice of the coordinates; owned entries fire with
    /// probability `on`, the rest with `off`.
    SparseBinary { on: f64, off: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmSpec {
    pub graphs: usize,
    pub nodes: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub generator: FeatureGenerator,
}

impl SbmSpec {
    fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if self.graphs == 0 || self.nodes < self.blocks || self.blocks < 2 || self.feature_dim == 0 {
            return Err(GmopeError::arg("SBM needs graphs, at least two blocks and a node per block"));
        }
        if !p_ok(self.p_in) || !p_ok(self.p_out) {
            return Err(GmopeError::arg("SBM edge probabilities must lie in [0, 1]"));
        }
        if let FeatureGenerator::SparseBinary { on, off } = self.generator {
            if !p_ok(on) || !p_ok(off) || self.feature_dim < self.blocks {
                return Err(GmopeError::arg("sparse generator needs probabilities and a coordinate per block"));
            }
        }
        Ok(())
    }
}

/// A family of SBM graphs. Node labels are block ids. Graph `g` is labeled
/// `g % 2`; odd graphs use half the within-block density, so graph labels
/// are recoverable from structure.
pub fn sbm_collection<T: Scalar>(name: &str, domain: Domain, spec: &SbmSpec, seed: u64) -> Result<GraphCollection<T>> {
    spec.validate()?;
    let mut family_rng = rng::stream(seed, rng::mix(&[0x5b3, 0]));
    let means: Vec<Vec<f64>> = match spec.generator {
        FeatureGenerator::Gaussian { separation } => (0..spec.blocks)
            .map(|_| {
                (0..spec.feature_dim)
                    .map(|_| separation * family_rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect(),
        FeatureGenerator::SparseBinary { .. } => Vec::new(),
    };
    let mut graphs = Vec::with_capacity(spec.graphs);
    for g in 0..spec.graphs {
        let mut rng = rng::stream(seed, rng::mix(&[0x5b3, 1 + g as u64]));
        let labels: Vec<usize> = (0..spec.nodes).map(|v| v * spec.blocks / spec.nodes).collect();
        let p_in = if g % 2 == 1 { spec.p_in / 2.0 } else { spec.p_in };
        let mut edges = Vec::new();
        for u in 0..spec.nodes {
            for v in (u + 1)..spec.nodes {
                let p = if labels[u] == labels[v] { p_in } else { spec.p_out };
                if rng.gen::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
        let mut features = Array2::<T>::zeros((spec.nodes, spec.feature_dim));
        for (v, &b) in labels.iter().enumerate() {
            for j in 0..spec.feature_dim {
                let x = match spec.generator {
                    FeatureGenerator::Gaussian { .. } => means[b][j] + rng.sample::<f64, _>(StandardNormal),
                    FeatureGenerator::SparseBinary { on, off } => {
                        let owner = j * spec.blocks / spec.feature_dim;
                        let p = if owner == b { on } else { off };
                        if rng.gen::<f64>() < p {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                features[[v, j]] = T::from_f64_lossy(x);
            }
        }
        let graph = Graph::new(spec.nodes, edges, features)?
            .with_node_labels(labels)?
            .with_graph_label(g % 2);
        graphs.push(graph);
    }
    GraphCollection::new(name, domain, graphs, Some(spec.blocks), Some(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(generator: FeatureGenerator) -> SbmSpec {
        SbmSpec {
            graphs: 2,
            nodes: 60,
            blocks: 3,
            p_in: 0.3,
            p_out: 0.01,
            feature_dim: 12,
            generator,
        }
    }

    #[test]
    fn deterministic_and_assortative() {
        let s = spec(FeatureGenerator::Gaussian { separation: 2.0 });
        let a = sbm_collection::<f64>("a", Domain::Citation, &s, 7).unwrap();
        assert_eq!(a, sbm_collection::<f64>("a", Domain::Citation, &s, 7).unwrap());
        let g = &a.graphs[0];
        let labels = g.node_labels().unwrap();
        let within = g.edges().iter().filter(|(u, v)| labels[*u] == labels[*v]).count();
        assert!(within * 2 > g.edge_count());
        assert!(a.graphs[1].edge_count() < a.graphs[0].edge_count());
        assert_eq!(a.graphs[1].graph_label(), Some(1));
    }

    #[test]
    fn sparse_features_are_binary() {
        let s = spec(FeatureGenerator::SparseBinary { on: 0.6, off: 0.05 });
        let c = sbm_collection::<f32>("b", Domain::Product, &s, 1).unwrap();
        assert!(c.graphs[0].features().iter().all(|&x| x == 0.0 || x == 1.0));
        assert!(sbm_collection::<f32>("b", Domain::Product, &SbmSpec { blocks: 1, ..s }, 1).is_err());
    }
}
