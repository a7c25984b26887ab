//! Graph data model, splits and sampling.

mod datasets;
mod sampling;
mod split;
mod synthetic;

use std::collections::HashSet;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GmopeError, Result};
use crate::scalar::Scalar;

pub use datasets::{load_dataset, DatasetId, DatasetStats, ProcessedManifest};
pub use sampling::{sample_batch, sample_graph_batch, sample_negative_edges, GraphBatch};
pub use split::{make_split, Granularity, Split, SplitRatios};
pub use synthetic::{sbm_collection, FeatureGenerator, SbmSpec};

/// Undirected graph with dense node features.
///
/// Edges are stored once as `(min, max)` pairs, deduplicated and sorted;
/// self-loops in the input are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph<T> {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    features: Array2<T>,
    node_labels: Option<Vec<usize>>,
    graph_label: Option<usize>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Array2<T>,
    ) -> Result<Self> {
        if features.nrows() != node_count {
            return Err(GmopeError::arg(format!(
                "feature matrix has {} rows but graph has {} nodes",
                features.nrows(),
                node_count
            )));
        }
        let mut canon = Vec::new();
        for (u, v) in edges {
            if u >= node_count || v >= node_count {
                return Err(GmopeError::arg(format!(
                    "edge ({u}, {v}) out of range for {node_count} nodes"
                )));
            }
            if u != v {
                canon.push((u.min(v), u.max(v)));
            }
        }
        canon.sort_unstable();
        canon.dedup();
        Ok(Graph {
            node_count,
            edges: canon,
            features,
            node_labels: None,
            graph_label: None,
        })
    }

    /// Graph without informative features: a single constant-1 column.
    pub fn featureless(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Self::new(node_count, edges, Array2::from_elem((node_count, 1), T::one()))
    }

    pub fn with_node_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.node_count {
            return Err(GmopeError::arg(format!(
                "{} node labels for {} nodes",
                labels.len(),
                self.node_count
            )));
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn with_graph_label(mut self, label: usize) -> Self {
        self.graph_label = Some(label);
        self
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    pub fn graph_label(&self) -> Option<usize> {
        self.graph_label
    }

    pub fn edge_set(&self) -> HashSet<(usize, usize)> {
        self.edges.iter().copied().collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    /// Labels must lie in `[0, classes)`.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(labels) = &self.node_labels {
            if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(GmopeError::arg(format!("node label {bad} outside [0, {classes})")));
            }
        }
        Ok(())
    }

    /// Same nodes and features, different edge set. Used to hide held-out
    /// edges from message passing.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = Graph::new(self.node_count, edges, self.features.clone())?;
        g.node_labels = self.node_labels.clone();
        g.graph_label = self.graph_label;
        Ok(g)
    }

    /// Replace the feature matrix, keeping structure and labels.
    pub fn with_features<U: Scalar>(&self, features: Array2<U>) -> Result<Graph<U>> {
        if features.nrows() != self.node_count {
            return Err(GmopeError::arg("replacement features have wrong row count"));
        }
        Ok(Graph {
            node_count: self.node_count,
            edges: self.edges.clone(),
            features,
            node_labels: self.node_labels.clone(),
            graph_label: self.graph_label,
        })
    }

    /// Subgraph induced by `nodes`, relabelled to `0..nodes.len()` in the
    /// given order.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Self> {
        let mut index = vec![usize::MAX; self.node_count];
        for (i, &n) in nodes.iter().enumerate() {
            if n >= self.node_count {
                return Err(GmopeError::arg(format!("node {n} out of range")));
            }
            index[n] = i;
        }
        let edges = self
            .edges
            .iter()
            .filter(|(u, v)| index[*u] != usize::MAX && index[*v] != usize::MAX)
            .map(|(u, v)| (index[*u], index[*v]));
        let features = self.features.select(Axis(0), nodes);
        let mut g = Graph::new(nodes.len(), edges, features)?;
        g.node_labels = self
            .node_labels
            .as_ref()
            .map(|l| nodes.iter().map(|&n| l[n]).collect());
        g.graph_label = self.graph_label;
        Ok(g)
    }

    /// Cast the feature matrix to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Graph<U> {
        Graph {
            node_count: self.node_count,
            edges: self.edges.clone(),
            features: self.features.mapv(|v| U::from_f64_lossy(v.to_f64_lossless())),
            node_labels: self.node_labels.clone(),
            graph_label: self.graph_label,
        }
    }
}

/// Which family of datasets a collection belongs to. Determines the default
/// alignment width and prompt size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Citation,
    Product,
    Molecular,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Citation => "citation",
            Domain::Product => "product",
            Domain::Molecular => "molecular",
        }
    }

    /// Default aligned feature width per domain group.
    pub fn default_aligned_dim(self) -> usize {
        match self {
            Domain::Citation => 196,
            Domain::Product => 256,
            Domain::Molecular => 16,
        }
    }
}

/// One dataset: a single large graph (node/edge tasks) or many small graphs
/// (graph classification).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphCollection<T> {
    pub name: String,
    pub domain: Domain,
    pub graphs: Vec<Graph<T>>,
    pub node_classes: Option<usize>,
    pub graph_classes: Option<usize>,
}

impl<T: Scalar> GraphCollection<T> {
    pub fn new(
        name: impl Into<String>,
        domain: Domain,
        graphs: Vec<Graph<T>>,
        node_classes: Option<usize>,
        graph_classes: Option<usize>,
    ) -> Result<Self> {
        if graphs.is_empty() {
            return Err(GmopeError::arg("graph collection must not be empty"));
        }
        let dim = graphs[0].feature_dim();
        if graphs.iter().any(|g| g.feature_dim() != dim) {
            return Err(GmopeError::arg("graphs in a collection must share a feature width"));
        }
        if let Some(c) = node_classes {
            for g in &graphs {
                g.check_labels(c)?;
            }
        }
        if let Some(c) = graph_classes {
            if let Some(l) = graphs.iter().filter_map(|g| g.graph_label).find(|&l| l >= c) {
                return Err(GmopeError::arg(format!("graph label {l} outside [0, {c})")));
            }
        }
        Ok(GraphCollection {
            name: name.into(),
            domain,
            graphs,
            node_classes,
            graph_classes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs[0].feature_dim()
    }

    pub fn total_nodes(&self) -> usize {
        self.graphs.iter().map(Graph::node_count).sum()
    }

    pub fn total_edges(&self) -> usize {
        self.graphs.iter().map(Graph::edge_count).sum()
    }

    /// Row-stack of every graph's features, used to fit the alignment.
    pub fn stacked_features(&self) -> Array2<T> {
        if self.graphs.len() == 1 {
            return self.graphs[0].features().clone();
        }
        let views: Vec<_> = self.graphs.iter().map(|g| g.features().view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("feature widths checked at construction")
    }

    pub fn cast<U: Scalar>(&self) -> GraphCollection<U> {
        GraphCollection {
            name: self.name.clone(),
            domain: self.domain,
            graphs: self.graphs.iter().map(Graph::cast).collect(),
            node_classes: self.node_classes,
            graph_classes: self.graph_classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn edges_are_canonicalized() {
        let g = Graph::<f64>::featureless(3, vec![(1, 0), (0, 1), (2, 2), (2, 1)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert!(g.has_edge(1, 0));
        assert!(!g.has_edge(0, 2));
    }

    #[test]
    fn rejects_out_of_range_edges_and_bad_features() {
        assert!(Graph::<f64>::featureless(2, vec![(0, 2)]).is_err());
        assert!(Graph::new(3, vec![], array![[1.0f64], [2.0]]).is_err());
    }

    #[test]
    fn label_range_is_checked() {
        let g = Graph::<f64>::featureless(2, vec![(0, 1)])
            .unwrap()
            .with_node_labels(vec![0, 3])
            .unwrap();
        assert!(g.check_labels(3).is_err());
        assert!(g.check_labels(4).is_ok());
        assert!(GraphCollection::new("x", Domain::Citation, vec![g], Some(2), None).is_err());
    }

    #[test]
    fn induced_subgraph_relabels() {
        let feats = array![[0.0f64], [1.0], [2.0], [3.0]];
        let g = Graph::new(4, vec![(0, 1), (1, 2), (2, 3)], feats).unwrap();
        let sub = g.induced_subgraph(&[3, 2, 0]).unwrap();
        assert_eq!(sub.edges(), &[(0, 1)]);
        assert_eq!(sub.features()[[0, 0]], 3.0);
    }
}
