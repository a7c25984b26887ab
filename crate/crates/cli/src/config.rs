//! Experiment configuration: sections, presets, dotted overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gmope::graph::{DatasetId, Domain, SbmSpec};
use gmope::objectives::{ObjectiveConfig, Strategy};
use gmope::router::RouterMode;
use gmope::trainer::{ModelConfig, RouterConfig, TaskConfig, TaskKind, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// Environment variable that overrides the default dataset cache location.
pub const CACHE_ENV: &str = "GMOPE_CACHE_DIR";
const DEFAULT_CACHE: &str = "data";

/// A problem with the user's configuration (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    ConfigError(message.into()).into()
}

/// An SBM dataset generated on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataset {
    pub name: String,
    pub domain: Domain,
    pub seed: u64,
    pub sbm: SbmSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Benchmark datasets of the pretraining group, by name.
    pub datasets: Vec<String>,
    pub synthetic: Vec<SyntheticDataset>,
    /// Dataset cache root; `$GMOPE_CACHE_DIR` or `./data` when unset.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    /// Shared feature width `d0`; the domain default when unset.
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Downstream dataset; the first dataset of the group when unset.
    pub dataset: Option<String>,
    pub task: TaskConfig,
    /// Fine-tuning seeds; one run each.
    pub seeds: Vec<u64>,
    /// Count task-head parameters in the prompt-only total.
    pub include_heads: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dataset: None,
            task: TaskConfig::default(),
            seeds: (41..=45).collect(),
            include_heads: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/latest"),
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Named starting point applied beneath the file's own values.
    pub preset: Option<Preset>,
    pub data: DataConfig,
    pub alignment: AlignmentConfig,
    pub model: ModelConfig,
    pub router: RouterConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Citation,
    Product,
    Molecular,
}

impl Preset {
    fn overlay(self) -> Value {
        match self {
            Preset::Citation => json!({
                "data": {"datasets": ["cora", "citeseer", "pubmed"]},
                "alignment": {"dim": 196},
                "model": {"experts": 3, "prompt_dim": 64},
                "router": {"mode": "soft", "k": null},
                "objective": {"strategy": "gae"},
                "eval": {"dataset": "cora", "task": {"kind": "link"}},
            }),
            Preset::Product => json!({
                "data": {"datasets": ["photo", "computers"]},
                "alignment": {"dim": 256},
                "model": {"experts": 2, "prompt_dim": 85},
                "router": {"mode": "soft", "k": null},
                "objective": {"strategy": "gae"},
                "eval": {"dataset": "photo", "task": {"kind": "node"}},
            }),
            Preset::Molecular => json!({
                "data": {"datasets": ["proteins", "dd", "nci109"]},
                "alignment": {"dim": 16},
                "model": {"experts": 3, "prompt_dim": 4},
                "router": {"mode": "hard", "k": 1},
                "objective": {"strategy": "graphcl"},
                "eval": {"dataset": "proteins", "task": {"kind": "graph"}},
            }),
        }
    }
}

/// Short names accepted in `--set` and `--sweep` keys.
const KEY_ALIASES: &[(&str, &str)] = &[
    ("model.M", "model.experts"),
    ("model.d_p", "model.prompt_dim"),
    ("router.K", "router.k"),
    ("router.tau", "router.temperature"),
    ("alignment.d0", "alignment.dim"),
];

pub fn canonical_key(key: &str) -> &str {
    KEY_ALIASES
        .iter()
        .find(|(alias, _)| *alias == key)
        .map_or(key, |(_, canonical)| canonical)
}

/// Interpret an override value as JSON when it parses, else as a string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Split `key=value`.
pub fn parse_assignment(raw: &str) -> Result<(String, String)> {
    match raw.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((canonical_key(k.trim()).to_string(), v.trim().to_string())),
        _ => Err(config_error(format!("override '{raw}' is not of the form key=value"))),
    }
}

/// Set a dotted path inside a JSON document, creating objects on the way.
pub fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(config_error(format!(
                "cannot set '{key}': '{}' is not a section",
                parts[..i].join(".")
            )));
        }
        let map = cur.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Recursively overlay `top` onto `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Resolve a configuration document: defaults, then the preset named in
    /// the document (or `preset`), then the document, then `overrides`.
    pub fn resolve(document: Option<Value>, preset: Option<Preset>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut user = document.unwrap_or_else(|| Value::Object(Map::new()));
        if !user.is_object() {
            return Err(config_error("configuration document must be a JSON object"));
        }
        if let Some(p) = preset {
            set_path(&mut user, "preset", serde_json::to_value(p)?)?;
        }
        for (key, value) in overrides {
            set_path(&mut user, key, value.clone())?;
        }
        let preset = match user.get("preset") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value::<Preset>(v.clone())
                    .map_err(|e| config_error(format!("preset: {e}")))?,
            ),
        };
        let mut doc = Value::Object(Map::new());
        if let Some(p) = preset {
            merge(&mut doc, p.overlay());
        }
        merge(&mut doc, user);
        let config: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            config_error(format!("invalid configuration at '{path}': {}", e.inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path, preset: Option<Preset>, overrides: &[(String, Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| config_error(format!("config {} is not valid JSON: {e}", path.display())))?;
        Self::resolve(Some(doc), preset, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: gmope::Result<()>| r.map_err(|e| config_error(e.to_string()));
        wrap(self.train.validate())?;
        wrap(self.objective.validate())?;
        if !self.objective.strategy.is_pretraining() {
            return Err(config_error(format!(
                "objective.strategy: {} is not a pretraining strategy",
                self.objective.strategy.as_str()
            )));
        }
        for name in &self.data.datasets {
            name.parse::<DatasetId>().map_err(|e| config_error(format!("data.datasets: {e}")))?;
        }
        let mut names: Vec<&str> = self.dataset_names();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_error("data: dataset names must be unique"));
        }
        if let Some(d) = &self.eval.dataset {
            if !self.dataset_names().contains(&d.as_str()) && d.parse::<DatasetId>().is_err() {
                return Err(config_error(format!("eval.dataset: '{d}' is neither in data.datasets nor data.synthetic")));
            }
        }
        if self.router.mode == RouterMode::Hard && self.router.k.is_none() {
            log::info!("router.mode = hard with router.k unset selects every expert");
        }
        Ok(())
    }

    /// Group members in configuration order: benchmarks, then synthetic.
    pub fn dataset_names(&self) -> Vec<&str> {
        self.data
            .datasets
            .iter()
            .map(String::as_str)
            .chain(self.data.synthetic.iter().map(|s| s.name.as_str()))
            .collect()
    }

    pub fn eval_dataset(&self) -> Result<String> {
        match &self.eval.dataset {
            Some(d) => Ok(d.clone()),
            None => self
                .dataset_names()
                .first()
                .map(|s| s.to_string())
                .ok_or_else(|| config_error("data: no datasets configured")),
        }
    }

    pub fn domain_of(&self, name: &str) -> Result<Domain> {
        if let Some(s) = self.data.synthetic.iter().find(|s| s.name == name) {
            return Ok(s.domain);
        }
        name.parse::<DatasetId>()
            .map(DatasetId::domain)
            .map_err(|e| config_error(e.to_string()))
    }

    /// `d0`: explicit, or the default of the group's single domain.
    pub fn aligned_dim(&self) -> Result<usize> {
        if let Some(d) = self.alignment.dim {
            return Ok(d);
        }
        let mut domains = Vec::new();
        for name in self.dataset_names() {
            let d = self.domain_of(name)?;
            if !domains.contains(&d) {
                domains.push(d);
            }
        }
        match domains[..] {
            [d] => Ok(d.default_aligned_dim()),
            [] => Err(config_error("alignment.dim: unset and no datasets to infer it from")),
            _ => Err(config_error("alignment.dim: datasets span several domains; set it explicitly")),
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.data
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE))
    }

    /// Fill every environment-dependent default so the echoed document
    /// reproduces the run on its own.
    pub fn materialize(&mut self) {
        self.data.cache_dir = Some(self.cache_dir());
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("configuration serializes")
    }

    pub fn task_kind(&self) -> TaskKind {
        self.eval.task.kind
    }

    pub fn strategy(&self) -> Strategy {
        self.objective.strategy
    }
}

pub fn write_resolved(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let path = dir.join("resolved-config.json");
    let text = serde_json::to_string_pretty(&config.to_value())?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(doc: Value, sets: &[&str]) -> Result<ExperimentConfig> {
        let overrides: Vec<(String, Value)> = sets
            .iter()
            .map(|s| {
                let (k, v) = parse_assignment(s).unwrap();
                (k, parse_value(&v))
            })
            .collect();
        ExperimentConfig::resolve(Some(doc), None, &overrides)
    }

    #[test]
    fn defaults_and_presets() {
        let c = resolve(json!({"preset": "citation"}), &[]).unwrap();
        assert_eq!(c.model.experts, Some(3));
        assert_eq!(c.model.prompt_dim, Some(64));
        assert_eq!(c.aligned_dim().unwrap(), 196);
        assert_eq!(c.train.epochs, 150);
        let m = resolve(json!({"preset": "molecular"}), &[]).unwrap();
        assert_eq!(m.router.k, Some(1));
        assert_eq!(m.eval_dataset().unwrap(), "proteins");
    }

    #[test]
    fn overrides_win_over_file_and_preset() {
        let c = resolve(
            json!({"preset": "citation", "train": {"lambda": 0.5}}),
            &["train.lambda=1.0", "model.M=2", "router.K=1", "router.mode=hard"],
        )
        .unwrap();
        assert_eq!(c.train.lambda, 1.0);
        assert_eq!(c.model.experts, Some(2));
        assert_eq!(c.router.k, Some(1));
        assert_eq!(c.router.mode, RouterMode::Hard);
        assert_eq!(c.to_value()["train"]["lambda"], json!(1.0));
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = resolve(json!({"train": {"lamda": 1.0}}), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train") && msg.contains("lamda"), "{msg}");
        assert!(err.downcast_ref::<ConfigError>().is_some());
        let err = resolve(json!({"bogus": 1}), &[]).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn resolved_document_round_trips() {
        let mut c = resolve(json!({"preset": "product"}), &["train.seed=43"]).unwrap();
        c.materialize();
        let again = ExperimentConfig::resolve(Some(c.to_value()), None, &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn bad_assignments_are_rejected() {
        assert!(parse_assignment("novalue").is_err());
        assert!(resolve(json!({}), &["train.lambda=-1"]).is_err());
        assert!(resolve(json!({}), &["data.datasets=[\"nope\"]"]).is_err());
        assert!(resolve(json!({"train": 3}), &["train.lambda=1"]).is_err());
    }
}
