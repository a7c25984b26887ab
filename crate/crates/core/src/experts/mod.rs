//! Expert encoders, the M-expert ensemble, readout and parameter accounting.

mod adjacency;
mod gcn;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use adjacency::NormalizedAdjacency;
pub use gcn::{Activation, EncoderConfig, EncoderGrads, ForwardCache, GcnEncoder, GraphEncoder};

use crate::error::{GmopeError, Result};
use crate::prompt::PromptBank;
use crate::scalar::Scalar;

/// `M` independently initialized encoders sharing one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEnsemble<T> {
    config: EncoderConfig,
    experts: Vec<GcnEncoder<T>>,
    frozen: Vec<bool>,
}

impl<T: Scalar> ExpertEnsemble<T> {
    /// Expert `m` draws from the stream `seed ^ m`.
    pub fn build(experts: usize, config: EncoderConfig, seed: u64) -> Result<Self> {
        if experts == 0 {
            return Err(GmopeError::arg("ensemble needs at least one expert"));
        }
        let experts = (0..experts)
            .map(|m| GcnEncoder::init(config, seed ^ m as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpertEnsemble {
            frozen: vec![false; experts.len()],
            config,
            experts,
        })
    }

    pub fn from_experts(config: EncoderConfig, experts: Vec<GcnEncoder<T>>) -> Result<Self> {
        if experts.is_empty() || experts.iter().any(|e| *e.config() != config) {
            return Err(GmopeError::arg("experts must be non-empty and share one configuration"));
        }
        Ok(ExpertEnsemble {
            frozen: vec![false; experts.len()],
            config,
            experts,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn expert(&self, m: usize) -> &GcnEncoder<T> {
        &self.experts[m]
    }

    pub fn experts(&self) -> &[GcnEncoder<T>] {
        &self.experts
    }

    /// Mutable access for an optimizer step. Frozen experts are refused.
    pub fn expert_mut(&mut self, m: usize) -> Result<&mut GcnEncoder<T>> {
        if self.frozen[m] {
            return Err(GmopeError::State(format!("expert {m} is frozen")));
        }
        Ok(&mut self.experts[m])
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen.iter_mut().for_each(|f| *f = frozen);
    }

    pub fn set_expert_frozen(&mut self, m: usize, frozen: bool) {
        self.frozen[m] = frozen;
    }

    pub fn is_frozen(&self, m: usize) -> bool {
        self.frozen[m]
    }

    pub fn all_frozen(&self) -> bool {
        self.frozen.iter().all(|&f| f)
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(|e| e.param_count()).sum()
    }

    /// Parameters in checkpoint naming order: `expert.<m>.layer.<l>.weight|bias`.
    pub fn named_params(&self) -> Vec<(String, ArrayView2<'_, T>)> {
        let mut out = Vec::new();
        for (m, e) in self.experts.iter().enumerate() {
            for (l, (w, b)) in e.weights.iter().zip(&e.biases).enumerate() {
                out.push((format!("expert.{m}.layer.{l}.weight"), w.view()));
                if self.config.bias {
                    out.push((format!("expert.{m}.layer.{l}.bias"), b.view().insert_axis(Axis(0))));
                }
            }
        }
        out
    }

    /// Little-endian bytes of every parameter, for byte-level freeze checks.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.named_params()
            .iter()
            .flat_map(|(_, a)| a.iter().flat_map(|v| v.to_f64_lossless().to_le_bytes()).collect::<Vec<_>>())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Sum,
}

/// Graph readout over node embeddings.
pub fn pool<T: Scalar>(embeddings: &Array2<T>, method: Pooling) -> Result<Array1<T>> {
    if embeddings.nrows() == 0 {
        return Err(GmopeError::arg("cannot pool an empty embedding matrix"));
    }
    let sum = embeddings.sum_axis(Axis(0));
    Ok(match method {
        Pooling::Sum => sum,
        Pooling::Mean => sum / T::from_usize_lossy(embeddings.nrows()),
    })
}

/// Gradient of [`pool`] with respect to the node embeddings.
pub fn pool_backward<T: Scalar>(grad: &Array1<T>, rows: usize, method: Pooling) -> Array2<T> {
    let g = match method {
        Pooling::Sum => grad.clone(),
        Pooling::Mean => grad / T::from_usize_lossy(rows),
    };
    g.broadcast((rows, g.len())).expect("row broadcast").to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMode {
    Full,
    PromptOnly,
}

/// Trainable parameter count of a model state.
///
/// `Full` counts every encoder weight and bias across all experts plus any
/// attached heads. `PromptOnly` counts `M * d_p`, plus the heads only when
/// `include_heads` is set.
pub fn count_params<T: Scalar>(
    ensemble: &ExpertEnsemble<T>,
    bank: &PromptBank<T>,
    head_params: usize,
    mode: ParamMode,
    include_heads: bool,
) -> usize {
    match mode {
        ParamMode::Full => ensemble.param_count() + head_params,
        ParamMode::PromptOnly => bank.param_count() + if include_heads { head_params } else { 0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(layers: usize, input: usize, hidden: usize, output: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            input_dim: input,
            hidden_dim: hidden,
            output_dim: output,
            bias: true,
            activation: Activation::Relu,
            self_loops: true,
        }
    }

    #[test]
    fn ensemble_determinism_and_distinct_experts() {
        let c = cfg(2, 6, 4, 3);
        let a = ExpertEnsemble::<f64>::build(3, c, 41).unwrap();
        assert_eq!(a, ExpertEnsemble::build(3, c, 41).unwrap());
        assert_ne!(a.expert(0), a.expert(1));
        assert!(ExpertEnsemble::<f64>::build(0, c, 41).is_err());
    }

    #[test]
    fn citation_preset_counts() {
        let single = cfg(3, 196, 64, 64);
        assert_eq!(single.param_count(), 196 * 64 + 64 * 64 + 64 * 64 + 3 * 64);
        assert_eq!(single.param_count(), 20_928);
        let ens = ExpertEnsemble::<f64>::build(3, single, 1).unwrap();
        assert_eq!(ens.param_count(), 62_784);
        let prompted = ExpertEnsemble::<f64>::build(3, cfg(3, 196 + 64, 64, 64), 1).unwrap();
        let bank = PromptBank::<f64>::init(3, 64, 1).unwrap();
        assert_eq!(count_params(&prompted, &bank, 0, ParamMode::PromptOnly, false), 192);
        assert_eq!(count_params(&prompted, &bank, 448, ParamMode::PromptOnly, false), 192);
        assert_eq!(count_params(&prompted, &bank, 448, ParamMode::PromptOnly, true), 640);
        assert_eq!(
            count_params(&prompted, &bank, 0, ParamMode::Full, false),
            3 * cfg(3, 260, 64, 64).param_count()
        );
    }

    #[test]
    fn prompt_only_count_ignores_encoder_size() {
        let bank = PromptBank::<f64>::init(3, 4, 1).unwrap();
        for c in [cfg(1, 20, 8, 8), cfg(3, 20, 128, 64), cfg(5, 20, 256, 256)] {
            let ens = ExpertEnsemble::<f64>::build(3, c, 1).unwrap();
            assert_eq!(count_params(&ens, &bank, 0, ParamMode::PromptOnly, false), 12);
        }
    }

    #[test]
    fn pooling() {
        let one = array![[1.0f64, -2.0]];
        assert_eq!(pool(&one, Pooling::Mean).unwrap(), array![1.0, -2.0]);
        assert_eq!(pool(&one, Pooling::Sum).unwrap(), array![1.0, -2.0]);
        let copies = array![[3.0f64, 1.0], [3.0, 1.0], [3.0, 1.0]];
        assert_eq!(pool(&copies, Pooling::Mean).unwrap(), array![3.0, 1.0]);
        let rows = array![[1.0f64, 2.0], [0.5, -1.0], [4.0, 0.0]];
        assert_eq!(pool(&rows, Pooling::Sum).unwrap(), array![5.5, 1.0]);
        assert!(pool(&Array2::<f64>::zeros((0, 2)), Pooling::Mean).is_err());
    }

    #[test]
    fn frozen_experts_refuse_mutation() {
        let mut ens = ExpertEnsemble::<f64>::build(2, cfg(1, 3, 2, 2), 0).unwrap();
        ens.set_frozen(true);
        assert!(ens.all_frozen());
        assert!(matches!(ens.expert_mut(0), Err(GmopeError::State(_))));
        ens.set_expert_frozen(1, false);
        assert!(ens.expert_mut(1).is_ok());
    }

    #[test]
    fn named_params_follow_namespace() {
        let ens = ExpertEnsemble::<f64>::build(2, cfg(2, 3, 2, 2), 0).unwrap();
        let names: Vec<String> = ens.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "expert.0.layer.0.weight");
        assert_eq!(names[1], "expert.0.layer.0.bias");
        assert_eq!(names.last().unwrap(), "expert.1.layer.1.bias");
        assert_eq!(names.len(), 8);
    }
}
