//! Loss functions and their gradients with respect to embeddings.
//!
//! Each `*_with_grad` variant returns the mean loss, the per-sample terms it
//! averages, and the gradient of the mean.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{GmopeError, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub per_sample: Vec<T>,
    pub grad: Array2<T>,
}

fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::from_usize_lossy(v.len())
}

fn check_pairs(n: usize, pairs: &[(usize, usize)], what: &str) -> Result<()> {
    if pairs.is_empty() {
        return Err(GmopeError::arg(format!("{what} edge set is empty")));
    }
    if pairs.iter().any(|&(u, v)| u >= n || v >= n) {
        return Err(GmopeError::arg(format!("{what} edge endpoint out of range")));
    }
    Ok(())
}

/// Binary cross-entropy of `sigmoid(<z_u, z_v>)`: positives labeled 1,
/// negatives 0, averaged over all scored pairs.
pub fn link_bce_with_grad<T: Scalar>(
    embeddings: &Array2<T>,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
) -> Result<LossGrad<T>> {
    let n = embeddings.nrows();
    check_pairs(n, pos, "positive")?;
    check_pairs(n, neg, "negative")?;
    let total = T::from_usize_lossy(pos.len() + neg.len());
    let mut grad = Array2::zeros(embeddings.raw_dim());
    let mut per_sample = Vec::with_capacity(pos.len() + neg.len());
    for (pairs, label) in [(pos, true), (neg, false)] {
        for &(u, v) in pairs {
            let (zu, zv) = (embeddings.row(u), embeddings.row(v));
            let s = zu.dot(&zv);
            let (loss, dlds) = if label {
                (softplus(-s), sigmoid(s) - T::one())
            } else {
                (softplus(s), sigmoid(s))
            };
            per_sample.push(loss);
            let coeff = dlds / total;
            let (zu, zv) = (zu.to_owned(), zv.to_owned());
            grad.row_mut(u).scaled_add(coeff, &zv);
            grad.row_mut(v).scaled_add(coeff, &zu);
        }
    }
    Ok(LossGrad {
        value: mean(&per_sample),
        per_sample,
        grad,
    })
}

/// Reconstruction loss of a graph autoencoder.
pub fn gae_loss<T: Scalar>(embeddings: &Array2<T>, pos: &[(usize, usize)], neg: &[(usize, usize)]) -> Result<T> {
    Ok(link_bce_with_grad(embeddings, pos, neg)?.value)
}

/// Supervised link prediction on held-out edges; same functional form as
/// [`gae_loss`].
pub fn edgepred_loss<T: Scalar>(embeddings: &Array2<T>, pos: &[(usize, usize)], neg: &[(usize, usize)]) -> Result<T> {
    Ok(link_bce_with_grad(embeddings, pos, neg)?.value)
}

/// Output of [`dgi_with_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct DgiGrad<T> {
    pub value: T,
    pub per_sample: Vec<T>,
    pub grad_real: Array2<T>,
    pub grad_corrupt: Array2<T>,
    pub grad_weight: Array2<T>,
}

/// `sigmoid(mean of rows)`.
pub fn dgi_summary<T: Scalar>(embeddings: &Array2<T>) -> Array1<T> {
    embeddings
        .mean_axis(Axis(0))
        .expect("non-empty embeddings")
        .mapv(sigmoid)
}

/// Bilinear discriminator `D(h, s) = sigmoid(hᵀ W s)`; real pairs labeled 1,
/// corrupted pairs 0.
pub fn dgi_loss<T: Scalar>(
    real: &Array2<T>,
    corrupt: &Array2<T>,
    summary: ArrayView1<'_, T>,
    weight: &Array2<T>,
) -> Result<T> {
    Ok(dgi_core(real, corrupt, summary, weight)?.0)
}

#[allow(clippy::type_complexity)]
fn dgi_core<T: Scalar>(
    real: &Array2<T>,
    corrupt: &Array2<T>,
    summary: ArrayView1<'_, T>,
    weight: &Array2<T>,
) -> Result<(T, Vec<T>, Array1<T>, Array1<T>, Array1<T>)> {
    let d = real.ncols();
    if real.nrows() == 0 || real.dim() != corrupt.dim() || summary.len() != d || weight.dim() != (d, d) {
        return Err(GmopeError::arg("DGI inputs have mismatched dimensions"));
    }
    let ws = weight.dot(&summary);
    let real_logits = real.dot(&ws);
    let corrupt_logits = corrupt.dot(&ws);
    let per_sample: Vec<T> = real_logits
        .iter()
        .zip(corrupt_logits.iter())
        .map(|(&r, &c)| (softplus(-r) + softplus(c)) / T::lit(2.0))
        .collect();
    Ok((mean(&per_sample), per_sample, ws, real_logits, corrupt_logits))
}

/// DGI loss with gradients; the summary is recomputed from `real` so its
/// dependence on the real embeddings is included.
pub fn dgi_with_grad<T: Scalar>(real: &Array2<T>, corrupt: &Array2<T>, weight: &Array2<T>) -> Result<DgiGrad<T>> {
    let n = real.nrows();
    if n == 0 {
        return Err(GmopeError::arg("DGI needs at least one node"));
    }
    let pre_summary = real.mean_axis(Axis(0)).unwrap();
    let summary = pre_summary.mapv(sigmoid);
    let (value, per_sample, ws, rl, cl) = dgi_core(real, corrupt, summary.view(), weight)?;
    let scale = T::one() / T::from_usize_lossy(2 * n);
    let dr: Array1<T> = rl.mapv(|r| (sigmoid(r) - T::one()) * scale);
    let dc: Array1<T> = cl.mapv(|c| sigmoid(c) * scale);
    // d/dh_i = dr_i * W s ; d/dW = Σ (dr_i h_i + dc_i h~_i) sᵀ ; d/ds = Wᵀ Σ(...)
    let mut grad_real = Array2::zeros(real.raw_dim());
    let mut grad_corrupt = Array2::zeros(corrupt.raw_dim());
    for i in 0..n {
        grad_real.row_mut(i).scaled_add(dr[i], &ws);
        grad_corrupt.row_mut(i).scaled_add(dc[i], &ws);
    }
    let mixed = real.t().dot(&dr) + corrupt.t().dot(&dc);
    let grad_weight = outer(&mixed, &summary);
    let grad_summary = weight.t().dot(&mixed);
    let grad_pre = &grad_summary * &summary.mapv(|s| s * (T::one() - s));
    let per_row = grad_pre / T::from_usize_lossy(n);
    grad_real += &per_row.broadcast(real.raw_dim()).unwrap();
    Ok(DgiGrad {
        value,
        per_sample,
        grad_real,
        grad_corrupt,
        grad_weight,
    })
}

fn outer<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &x) in a.iter().enumerate() {
        out.row_mut(i).scaled_add(x, b);
    }
    out
}

/// Output of [`graphcl_with_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad<T> {
    pub value: T,
    pub per_sample: Vec<T>,
    pub grad_view1: Array2<T>,
    pub grad_view2: Array2<T>,
}

fn normalize_rows<T: Scalar>(z: &Array2<T>) -> Result<(Array2<T>, Array1<T>)> {
    let norms: Array1<T> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.iter().any(|&n| !(n > T::zero())) {
        return Err(GmopeError::NumericDomain("cannot normalize a zero embedding".into()));
    }
    let mut u = z.clone();
    for (mut row, &n) in u.rows_mut().into_iter().zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    Ok((u, norms))
}

/// NT-Xent: `-log softmax_j(sim(z1_i, z2_j)/t)[i]`, mean over `i`, with
/// cosine similarity.
pub fn graphcl_loss<T: Scalar>(view1: &Array2<T>, view2: &Array2<T>, temperature: T) -> Result<T> {
    Ok(graphcl_with_grad(view1, view2, temperature)?.value)
}

pub fn graphcl_with_grad<T: Scalar>(view1: &Array2<T>, view2: &Array2<T>, temperature: T) -> Result<ContrastiveGrad<T>> {
    let b = view1.nrows();
    if view1.dim() != view2.dim() {
        return Err(GmopeError::arg("contrastive views differ in shape"));
    }
    if b < 2 {
        return Err(GmopeError::arg("contrastive loss needs a batch of at least 2"));
    }
    if !(temperature > T::zero()) {
        return Err(GmopeError::arg("contrastive temperature must be positive"));
    }
    let (u, nu) = normalize_rows(view1)?;
    let (v, nv) = normalize_rows(view2)?;
    let logits = u.dot(&v.t()) / temperature;
    let mut per_sample = Vec::with_capacity(b);
    let mut dlogits = Array2::zeros((b, b));
    let bt = T::from_usize_lossy(b);
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        per_sample.push(max + total.ln() - row[i]);
        for j in 0..b {
            let p = exps[j] / total;
            dlogits[[i, j]] = (p - if i == j { T::one() } else { T::zero() }) / bt;
        }
    }
    let du = dlogits.dot(&v) / temperature;
    let dv = dlogits.t().dot(&u) / temperature;
    Ok(ContrastiveGrad {
        value: mean(&per_sample),
        per_sample,
        grad_view1: normalize_backward(&u, &nu, &du),
        grad_view2: normalize_backward(&v, &nv, &dv),
    })
}

/// Back through `u = z/|z|`: `dz = (du - u (u·du)) / |z|`.
fn normalize_backward<T: Scalar>(u: &Array2<T>, norms: &Array1<T>, du: &Array2<T>) -> Array2<T> {
    let mut dz = du.clone();
    for i in 0..u.nrows() {
        let proj = u.row(i).dot(&du.row(i));
        let mut row = dz.row_mut(i);
        row.scaled_add(-proj, &u.row(i));
        row.mapv_inplace(|x| x / norms[i]);
    }
    dz
}

/// Mean `-log p[label]` over rows of a probability matrix.
pub fn task_cross_entropy<T: Scalar>(probabilities: &Array2<T>, labels: &[usize]) -> Result<T> {
    if probabilities.nrows() != labels.len() || labels.is_empty() {
        return Err(GmopeError::arg("need one label per prediction row"));
    }
    let floor = T::lit(PROB_FLOOR);
    let mut total = T::zero();
    for (row, &y) in probabilities.rows().into_iter().zip(labels) {
        if y >= row.len() {
            return Err(GmopeError::arg(format!("label {y} outside [0, {})", row.len())));
        }
        total += -row[y].max(floor).ln();
    }
    Ok(total / T::from_usize_lossy(labels.len()))
}

pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp());
        let total: T = row.iter().copied().sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

/// Softmax cross-entropy over the selected rows of `logits`; gradient is
/// zero on rows not listed in `rows`.
pub fn softmax_cross_entropy_with_grad<T: Scalar>(
    logits: &Array2<T>,
    rows: &[usize],
    labels: &[usize],
) -> Result<LossGrad<T>> {
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(GmopeError::arg("need one label per selected row"));
    }
    let c = logits.ncols();
    let floor = T::lit(PROB_FLOOR);
    let scale = T::one() / T::from_usize_lossy(rows.len());
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut per_sample = Vec::with_capacity(rows.len());
    for (&r, &y) in rows.iter().zip(labels) {
        if y >= c || r >= logits.nrows() {
            return Err(GmopeError::arg(format!("row {r} / label {y} out of range")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let p_y = exps[y] / total;
        per_sample.push(-p_y.max(floor).ln());
        for j in 0..c {
            let p = exps[j] / total;
            grad[[r, j]] += (p - if j == y { T::one() } else { T::zero() }) * scale;
        }
    }
    Ok(LossGrad {
        value: mean(&per_sample),
        per_sample,
        grad,
    })
}
