//! Truncated-SVD feature alignment.
//!
//! Each dataset's raw feature matrix `X` (|V| x D) is projected onto its top
//! `d0` right-singular vectors, giving a shared width across datasets. The
//! projection is fitted once before training and frozen; it carries no
//! trainable parameters.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{GmopeError, Result};
use crate::linalg::symmetric_eigen;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection<T> {
    /// D x d0. Columns are orthonormal except zero-padded trailing columns.
    basis: Array2<T>,
    /// Length d0, descending; zero for padded columns.
    singular_values: Array1<T>,
    /// Number of leading non-padded columns.
    rank: usize,
}

impl<T: Scalar> Projection<T> {
    pub fn basis(&self) -> &Array2<T> {
        &self.basis
    }

    pub fn singular_values(&self) -> &Array1<T> {
        &self.singular_values
    }

    pub fn source_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn target_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Columns `rank..d0` are zero padding.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_padded(&self, column: usize) -> bool {
        column >= self.rank
    }

    pub fn trainable_params(&self) -> usize {
        0
    }

    /// Rebuild from stored parts (checkpoint loading).
    pub fn from_parts(basis: Array2<T>, singular_values: Array1<T>, rank: usize) -> Result<Self> {
        if singular_values.len() != basis.ncols() || rank > basis.ncols() {
            return Err(GmopeError::arg("projection parts have inconsistent shapes"));
        }
        Ok(Projection {
            basis,
            singular_values,
            rank,
        })
    }
}

/// Fit the top-`d0` right-singular subspace of `features`.
pub fn fit_projection<T: Scalar>(features: &Array2<T>, d0: usize) -> Result<Projection<T>> {
    let (n, dim) = features.dim();
    if d0 == 0 {
        return Err(GmopeError::arg("target dimension must be at least 1"));
    }
    if n == 0 || dim == 0 {
        return Err(GmopeError::arg("feature matrix is empty"));
    }
    if d0 > dim {
        return Err(GmopeError::arg(format!(
            "cannot project {dim} features up to {d0} dimensions"
        )));
    }

    // Right singular vectors come from whichever Gram matrix is smaller.
    let (sigma, mut right): (Vec<T>, Array2<T>) = if dim <= n {
        let gram = features.t().dot(features);
        let (vals, vecs) = symmetric_eigen(&gram);
        let sigma = vals.iter().take(d0).map(|&l| l.max(T::zero()).sqrt()).collect();
        (sigma, vecs.slice(ndarray::s![.., ..d0]).to_owned())
    } else {
        let gram = features.dot(&features.t());
        let (vals, left) = symmetric_eigen(&gram);
        let k = d0.min(n);
        let sigma: Vec<T> = vals.iter().take(k).map(|&l| l.max(T::zero()).sqrt()).collect();
        let mut right = Array2::zeros((dim, d0));
        for (i, &s) in sigma.iter().enumerate() {
            if s > T::zero() {
                let col = features.t().dot(&left.column(i)) / s;
                right.column_mut(i).assign(&col);
            }
        }
        let mut padded = sigma;
        padded.resize(d0, T::zero());
        (padded, right)
    };

    let sigma_max = sigma.first().copied().unwrap_or_else(T::zero);
    let tol = sigma_max * T::from_usize_lossy(n.max(dim)) * T::epsilon().sqrt();
    let rank = sigma.iter().take_while(|&&s| s > tol && s > T::zero()).count();

    let mut singular_values = Array1::zeros(d0);
    for j in 0..d0 {
        if j >= rank {
            right.column_mut(j).fill(T::zero());
            continue;
        }
        singular_values[j] = sigma[j];
        let mut col = right.column_mut(j);
        let norm = col.dot(&col).sqrt();
        col.mapv_inplace(|v| v / norm);
        // Sign convention: largest-magnitude entry is nonnegative.
        let mut best = 0;
        for i in 1..dim {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < T::zero() {
            col.mapv_inplace(|v| -v);
        }
    }
    Ok(Projection {
        basis: right,
        singular_values,
        rank,
    })
}

pub fn apply_projection<T: Scalar>(features: &Array2<T>, proj: &Projection<T>) -> Result<Array2<T>> {
    if features.ncols() != proj.source_dim() {
        return Err(GmopeError::arg(format!(
            "features have {} columns, projection expects {}",
            features.ncols(),
            proj.source_dim()
        )));
    }
    Ok(features.dot(&proj.basis))
}

/// Squared Frobenius norm.
pub fn energy<T: Scalar>(m: &Array2<T>) -> T {
    m.iter().map(|&v| v * v).sum()
}

/// Max deviation of `basisᵀ·basis` from the identity on the non-padded
/// block (and from zero elsewhere).
pub fn orthonormality_error<T: Scalar>(proj: &Projection<T>) -> T {
    let g = proj.basis.t().dot(&proj.basis);
    let mut worst = T::zero();
    for ((i, j), &v) in g.indexed_iter() {
        let target = if i == j && i < proj.rank { T::one() } else { T::zero() };
        worst = worst.max((v - target).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Project twice through the zero-padded square extension of the basis.
    fn reproject_padded<T: Scalar>(features: &Array2<T>, proj: &Projection<T>) -> Result<Array2<T>> {
        let once = apply_projection(features, proj)?;
        let mut padded = Array2::zeros((once.nrows(), proj.source_dim()));
        padded.slice_mut(ndarray::s![.., ..proj.target_dim()]).assign(&once);
        apply_projection(&padded, proj)
    }

    #[test]
    fn identity_features() {
        let x = Array2::<f64>::eye(3);
        let p = fit_projection(&x, 2).unwrap();
        assert_eq!(p.rank(), 2);
        assert!((p.singular_values()[0] - 1.0).abs() < 1e-12);
        assert!((p.singular_values()[1] - 1.0).abs() < 1e-12);
        // Each column is a coordinate axis.
        for j in 0..2 {
            let col = p.basis().column(j);
            assert_eq!(col.iter().filter(|v| v.abs() > 1e-9).count(), 1);
        }
        assert!(orthonormality_error(&p) < 1e-6);
    }

    #[test]
    fn rank_one_is_padded() {
        let x = array![[1.0f64, 2.0, 3.0], [2.0, 4.0, 6.0]];
        let p = fit_projection(&x, 2).unwrap();
        assert_eq!(p.rank(), 1);
        assert!(p.is_padded(1));
        assert_eq!(p.singular_values()[1], 0.0);
        assert!(p.basis().column(1).iter().all(|&v| v == 0.0));
        assert!(orthonormality_error(&p) < 1e-6);
    }

    #[test]
    fn rejects_upsampling_and_empty() {
        let x = Array2::<f64>::ones((4, 2));
        assert!(matches!(fit_projection(&x, 3), Err(GmopeError::Argument(_))));
        assert!(fit_projection(&x, 0).is_err());
        assert!(fit_projection(&Array2::<f64>::zeros((0, 3)), 1).is_err());
    }

    #[test]
    fn apply_checks_width_and_is_linear() {
        let x = array![[1.0f64, 0.0, 2.0], [0.0, 1.0, 1.0], [3.0, 1.0, 0.0]];
        let p = fit_projection(&x, 2).unwrap();
        assert!(apply_projection(&Array2::<f64>::zeros((2, 2)), &p).is_err());
        let z = apply_projection(&Array2::<f64>::zeros((5, 3)), &p).unwrap();
        assert_eq!(z.dim(), (5, 2));
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_rank_preserves_energy() {
        let x = array![[1.0f64, 0.5, 2.0], [0.0, 1.0, 1.0], [3.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
        let p = fit_projection(&x, 3).unwrap();
        let y = apply_projection(&x, &p).unwrap();
        assert!((energy(&y).sqrt() - energy(&x).sqrt()).abs() < 1e-5);
    }

    #[test]
    fn wide_matrix_uses_row_gram() {
        let x = array![[1.0f64, 0.0, 2.0, 0.0, 1.0], [0.0, 1.0, 1.0, 3.0, 0.0]];
        let p = fit_projection(&x, 3).unwrap();
        assert_eq!(p.rank(), 2);
        assert!(orthonormality_error(&p) < 1e-9);
        let y = apply_projection(&x, &p).unwrap();
        assert!((energy(&y) - energy(&x)).abs() < 1e-9);
    }

    #[test]
    fn no_trainable_parameters() {
        let p = fit_projection(&Array2::<f64>::eye(4), 2).unwrap();
        assert_eq!(p.trainable_params(), 0);
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let x = array![[-3.0f64, 0.1], [-1.0, 0.2], [0.5, -0.3]];
        let p = fit_projection(&x, 2).unwrap();
        for j in 0..2 {
            let col = p.basis().column(j);
            let best = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(best >= 0.0);
        }
        assert_eq!(p, fit_projection(&x, 2).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn reprojection_never_gains_energy(seed in 0u64..200, n in 3usize..15, d in 2usize..8) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, 5);
            let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0f64));
            let d0 = 1 + seed as usize % d;
            let p = fit_projection(&x, d0).unwrap();
            let once = apply_projection(&x, &p).unwrap();
            let twice = reproject_padded(&x, &p).unwrap();
            proptest::prop_assert!(energy(&twice) <= energy(&once) * (1.0 + 1e-12) + 1e-12);
            proptest::prop_assert!(orthonormality_error(&p) < 1e-6);
        }
    }
}
