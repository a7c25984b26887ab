use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adjacency::NormalizedAdjacency;
use crate::error::{GmopeError, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    #[serde(alias = "identity")]
    Linear,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                T::one() - t * t
            }
            Activation::Linear => T::one(),
        }
    }
}

/// Shared architecture of every expert. `activation` is applied after each
/// hidden layer; the output layer is linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub bias: bool,
    pub activation: Activation,
    pub self_loops: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(GmopeError::Config("encoder needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(GmopeError::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }

    /// `(in, out)` of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let input = if l == 0 { self.input_dim } else { self.hidden_dim };
                let output = if l + 1 == self.layers { self.output_dim } else { self.hidden_dim };
                (input, output)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + if self.bias { o } else { 0 })
            .sum()
    }
}

/// Gradients of one encoder, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: Scalar> EncoderGrads<T> {
    pub fn zeros_like(enc: &GcnEncoder<T>) -> Self {
        EncoderGrads {
            weights: enc.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: enc.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &EncoderGrads<T>, scale: T) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(scale, b);
        }
    }

    pub fn squared_norm(&self) -> T {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .map(|&v| v * v)
            .sum()
    }
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    inputs: Vec<Array2<T>>,
    pre_activations: Vec<Array2<T>>,
}

/// Message-passing encoder interface. GCN is the shipped implementation.
pub trait GraphEncoder<T: Scalar> {
    fn config(&self) -> &EncoderConfig;

    fn forward(&self, adj: &NormalizedAdjacency<T>, x: &Array2<T>) -> Result<(Array2<T>, ForwardCache<T>)>;

    /// Parameter gradients and the gradient with respect to the input.
    fn backward(
        &self,
        adj: &NormalizedAdjacency<T>,
        cache: &ForwardCache<T>,
        grad_out: &Array2<T>,
    ) -> (EncoderGrads<T>, Array2<T>);

    fn param_count(&self) -> usize {
        self.config().param_count()
    }
}

/// Graph convolutional encoder: `H_{l+1} = act(Â H_l W_l + b_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnEncoder<T> {
    config: EncoderConfig,
    pub(crate) weights: Vec<Array2<T>>,
    pub(crate) biases: Vec<Array1<T>>,
}

impl<T: Scalar> GcnEncoder<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, (i, o)) in config.layer_dims().into_iter().enumerate() {
            let mut rng = rng::stream(seed, rng::mix(&[0x6c61, l as u64]));
            let a = (6.0 / (i + o) as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((i, o), || T::from_f64_lossy(rng.gen_range(-a..a))));
            biases.push(Array1::zeros(if config.bias { o } else { 0 }));
        }
        Ok(GcnEncoder {
            config,
            weights,
            biases,
        })
    }

    pub fn from_parts(config: EncoderConfig, weights: Vec<Array2<T>>, biases: Vec<Array1<T>>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let ok = weights.len() == dims.len()
            && biases.len() == dims.len()
            && weights.iter().zip(&dims).all(|(w, &(i, o))| w.dim() == (i, o))
            && biases
                .iter()
                .zip(&dims)
                .all(|(b, &(_, o))| b.len() == if config.bias { o } else { 0 });
        if !ok {
            return Err(GmopeError::arg("encoder parameters do not match the configuration"));
        }
        Ok(GcnEncoder {
            config,
            weights,
            biases,
        })
    }

    pub fn weights(&self) -> &[Array2<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<T>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<T>] {
        &mut self.biases
    }

    /// Forward pass without keeping intermediates.
    pub fn encode(&self, adj: &NormalizedAdjacency<T>, x: &Array2<T>) -> Result<Array2<T>> {
        Ok(self.forward(adj, x)?.0)
    }
}

impl<T: Scalar> GraphEncoder<T> for GcnEncoder<T> {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn forward(&self, adj: &NormalizedAdjacency<T>, x: &Array2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        if x.ncols() != self.config.input_dim {
            return Err(GmopeError::arg(format!(
                "encoder expects {} input features, got {}",
                self.config.input_dim,
                x.ncols()
            )));
        }
        if x.nrows() != adj.node_count() {
            return Err(GmopeError::arg("feature rows disagree with adjacency size"));
        }
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.weights.len()),
            pre_activations: Vec::with_capacity(self.weights.len()),
        };
        for (l, w) in self.weights.iter().enumerate() {
            let mut z = adj.propagate(h.dot(w).view());
            if self.config.bias {
                z += &self.biases[l];
            }
            let act = if l == last { Activation::Linear } else { self.config.activation };
            let next = z.mapv(|v| act.apply(v));
            cache.inputs.push(h);
            cache.pre_activations.push(z);
            h = next;
        }
        Ok((h, cache))
    }

    fn backward(
        &self,
        adj: &NormalizedAdjacency<T>,
        cache: &ForwardCache<T>,
        grad_out: &Array2<T>,
    ) -> (EncoderGrads<T>, Array2<T>) {
        let layers = self.weights.len();
        let mut grads = EncoderGrads::zeros_like(self);
        let mut upstream = grad_out.clone();
        for l in (0..layers).rev() {
            let act = if l == layers - 1 { Activation::Linear } else { self.config.activation };
            let mut dz = upstream;
            if act != Activation::Linear {
                dz.zip_mut_with(&cache.pre_activations[l], |g, &z| *g *= act.derivative(z));
            }
            if self.config.bias {
                grads.biases[l] = dz.sum_axis(Axis(0));
            }
            let propagated = adj.propagate(dz.view());
            grads.weights[l] = cache.inputs[l].t().dot(&propagated);
            upstream = propagated.dot(&self.weights[l].t());
        }
        (grads, upstream)
    }
}
