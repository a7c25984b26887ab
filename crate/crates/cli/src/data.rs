//! Dataset loading and alignment for a configured group.

use std::collections::BTreeMap;

use anyhow::{Context, Result};
use gmope::alignment::Projection;
use gmope::graph::{load_dataset, sbm_collection, GraphCollection};
use gmope::trainer::{align_collection, PreparedDataset, TaskSetup};

use crate::config::ExperimentConfig;

pub fn load_collection(config: &ExperimentConfig, name: &str) -> Result<GraphCollection<f64>> {
    if let Some(s) = config.data.synthetic.iter().find(|s| s.name == name) {
        return sbm_collection(&s.name, s.domain, &s.sbm, s.seed)
            .with_context(|| format!("generating synthetic dataset '{name}'"));
    }
    let cache = config.cache_dir();
    load_dataset(name, &cache).with_context(|| format!("loading dataset '{name}' from {}", cache.display()))
}

/// Align one dataset, reusing a stored projection when there is one.
pub fn prepare(
    config: &ExperimentConfig,
    name: &str,
    d0: usize,
    stored: &BTreeMap<String, Projection<f64>>,
) -> Result<PreparedDataset<f64>> {
    let collection = load_collection(config, name)?;
    let dataset = align_collection(&collection, d0, config.model.self_loops, stored.get(name).cloned())
        .with_context(|| format!("aligning dataset '{name}'"))?;
    Ok(dataset)
}

/// The pretraining group. When the downstream dataset is part of the group
/// and the task holds out edges, those edges are removed first.
pub fn pretraining_group(config: &ExperimentConfig, d0: usize) -> Result<Vec<PreparedDataset<f64>>> {
    let eval_name = config.eval_dataset().ok();
    config
        .dataset_names()
        .into_iter()
        .map(|name| {
            let dataset = prepare(config, name, d0, &BTreeMap::new())?;
            if eval_name.as_deref() == Some(name) {
                let task = TaskSetup::new(&dataset, &config.eval.task)
                    .with_context(|| format!("building the downstream task on '{name}'"))?;
                return Ok(task.pretraining_view(&dataset)?);
            }
            Ok(dataset)
        })
        .collect()
}
