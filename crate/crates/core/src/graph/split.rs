use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::GraphCollection;
use crate::error::{GmopeError, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Node,
    Edge,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(GmopeError::Split(format!("ratios must be positive, got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(GmopeError::Split(format!("ratios must sum to 1, got {parts:?}")));
        }
        Ok(())
    }

    /// Partition sizes for `n` items: rounded proportions, every part at
    /// least one item.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        if n < 3 {
            return Err(GmopeError::Split(format!("need at least 3 items to split, got {n}")));
        }
        let mut sizes = [
            (self.train * n as f64).round() as usize,
            (self.val * n as f64).round() as usize,
            0,
        ];
        sizes[0] = sizes[0].min(n);
        sizes[1] = sizes[1].min(n - sizes[0]);
        sizes[2] = n - sizes[0] - sizes[1];
        for i in 0..3 {
            if sizes[i] == 0 {
                let donor = (0..3).max_by_key(|&j| (sizes[j], usize::MAX - j)).unwrap();
                sizes[donor] -= 1;
                sizes[i] = 1;
            }
        }
        Ok((sizes[0], sizes[1], sizes[2]))
    }
}

/// Disjoint train/val/test partition of node, edge or graph indices.
/// Edge indices refer to positions in the (canonical) edge list of the
/// collection's first graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub granularity: Granularity,
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

pub fn make_split<T: Scalar>(
    collection: &GraphCollection<T>,
    granularity: Granularity,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Split> {
    let n = match granularity {
        Granularity::Graph => collection.graphs.len(),
        Granularity::Node | Granularity::Edge => {
            if collection.graphs.len() != 1 {
                return Err(GmopeError::Split(format!(
                    "{granularity:?}-level split needs a single-graph dataset, '{}' has {} graphs",
                    collection.name,
                    collection.graphs.len()
                )));
            }
            let g = &collection.graphs[0];
            if granularity == Granularity::Node {
                g.node_count()
            } else {
                g.edge_count()
            }
        }
    };
    split_indices(n, granularity, ratios, seed)
}

pub(crate) fn split_indices(
    n: usize,
    granularity: Granularity,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Split> {
    let (n_train, n_val, _) = ratios.sizes(n)?;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, rng::mix(&[0x5911, granularity as u64]));
    idx.shuffle(&mut rng);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split {
        granularity,
        seed,
        train: idx,
        val,
        test,
    })
}
