//! Small trainable heads on top of expert embeddings.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{GmopeError, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Affine map to class logits.
    Classifier,
    /// Square map applied to both endpoints before the inner-product decoder.
    Link,
}

/// Task head shared by all experts.
///
/// A classifier computes `h W + b`; a link head computes `z = h W` and scores
/// a pair by `<z_u, z_v>`. The link head starts at the identity so a freshly
/// attached head reproduces the pretrained inner-product decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead<T> {
    kind: HeadKind,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> HeadGrads<T> {
    pub fn zeros_like(head: &TaskHead<T>) -> Self {
        HeadGrads {
            weight: Array2::zeros(head.weight.raw_dim()),
            bias: Array1::zeros(head.bias.len()),
        }
    }

    pub fn accumulate(&mut self, other: &HeadGrads<T>, scale: T) {
        self.weight.scaled_add(scale, &other.weight);
        self.bias.scaled_add(scale, &other.bias);
    }
}

impl<T: Scalar> TaskHead<T> {
    pub fn classifier(input: usize, classes: usize, seed: u64) -> Result<Self> {
        if input == 0 || classes < 2 {
            return Err(GmopeError::arg("classifier needs a positive width and at least two classes"));
        }
        let mut rng = rng::stream(seed, 0x4ead);
        let a = (6.0 / (input + classes) as f64).sqrt();
        Ok(TaskHead {
            kind: HeadKind::Classifier,
            weight: Array2::from_shape_simple_fn((input, classes), || T::from_f64_lossy(rng.gen_range(-a..a))),
            bias: Array1::zeros(classes),
        })
    }

    pub fn link(input: usize) -> Result<Self> {
        if input == 0 {
            return Err(GmopeError::arg("link head needs a positive width"));
        }
        Ok(TaskHead {
            kind: HeadKind::Link,
            weight: Array2::eye(input),
            bias: Array1::zeros(0),
        })
    }

    pub fn from_parts(kind: HeadKind, weight: Array2<T>, bias: Array1<T>) -> Result<Self> {
        let ok = match kind {
            HeadKind::Classifier => bias.len() == weight.ncols(),
            HeadKind::Link => bias.is_empty() && weight.is_square(),
        };
        if !ok {
            return Err(GmopeError::arg("head parameters have inconsistent shapes"));
        }
        Ok(TaskHead { kind, weight, bias })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Logits for a classifier, transformed embeddings for a link head.
    pub fn forward(&self, h: &Array2<T>) -> Result<Array2<T>> {
        if h.ncols() != self.input_dim() {
            return Err(GmopeError::arg(format!(
                "head expects width {}, got {}",
                self.input_dim(),
                h.ncols()
            )));
        }
        let mut out = h.dot(&self.weight);
        if self.kind == HeadKind::Classifier {
            out += &self.bias;
        }
        Ok(out)
    }

    /// Parameter gradients and the gradient with respect to `h`.
    pub fn backward(&self, h: &Array2<T>, grad_out: &Array2<T>) -> (HeadGrads<T>, Array2<T>) {
        let bias = match self.kind {
            HeadKind::Classifier => grad_out.sum_axis(ndarray::Axis(0)),
            HeadKind::Link => Array1::zeros(0),
        };
        let grads = HeadGrads {
            weight: h.t().dot(grad_out),
            bias,
        };
        (grads, grad_out.dot(&self.weight.t()))
    }
}

/// Bilinear discriminator weights, one square matrix per expert.
pub fn init_discriminator<T: Scalar>(width: usize, expert: usize, seed: u64) -> Array2<T> {
    let mut rng = rng::stream(seed, rng::mix(&[0xd61, expert as u64]));
    let a = (3.0 / width as f64).sqrt();
    Array2::from_shape_simple_fn((width, width), || T::from_f64_lossy(rng.gen_range(-a..a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn classifier_forward_backward_shapes() {
        let head = TaskHead::<f64>::classifier(3, 2, 1).unwrap();
        assert_eq!(head.param_count(), 8);
        let h = array![[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]];
        let out = head.forward(&h).unwrap();
        assert_eq!(out.dim(), (2, 2));
        let (g, dh) = head.backward(&h, &Array2::ones((2, 2)));
        assert_eq!(g.bias, array![2.0, 2.0]);
        assert_eq!(dh.dim(), (2, 3));
        assert!(head.forward(&Array2::zeros((1, 4))).is_err());
    }

    #[test]
    fn link_head_starts_at_identity() {
        let head = TaskHead::<f64>::link(2).unwrap();
        let h = array![[1.0, 2.0]];
        assert_eq!(head.forward(&h).unwrap(), h);
        assert_eq!(head.param_count(), 4);
    }
}
