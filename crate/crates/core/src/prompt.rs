//! Per-expert prompt vectors and the soft orthogonality regularizer.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{GmopeError, Result};
use crate::rng;
use crate::scalar::Scalar;

/// `M` learnable prompts of width `d_p`, one per expert (row `m` is `p_m`).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank<T> {
    prompts: Array2<T>,
    pub trainable: bool,
    init_seed: u64,
}

impl<T: Scalar> PromptBank<T> {
    /// Rows drawn i.i.d. uniform with mean 0 and standard deviation
    /// `1/sqrt(d_p)`, so each prompt has roughly unit norm.
    pub fn init(experts: usize, width: usize, seed: u64) -> Result<Self> {
        if experts == 0 || width == 0 {
            return Err(GmopeError::arg("prompt bank needs M >= 1 and d_p >= 1"));
        }
        let half_width = (3.0 / width as f64).sqrt();
        let mut prompts = Array2::zeros((experts, width));
        for m in 0..experts {
            let mut rng = rng::stream(seed, rng::mix(&[0x9207, m as u64]));
            loop {
                for v in prompts.row_mut(m).iter_mut() {
                    *v = T::from_f64_lossy(rng.gen_range(-half_width..half_width));
                }
                if prompts.row(m).iter().any(|v| *v != T::zero()) {
                    break;
                }
            }
        }
        Ok(PromptBank {
            prompts,
            trainable: true,
            init_seed: seed,
        })
    }

    pub fn from_matrix(prompts: Array2<T>, init_seed: u64) -> Result<Self> {
        if prompts.nrows() == 0 || prompts.ncols() == 0 {
            return Err(GmopeError::arg("prompt bank needs M >= 1 and d_p >= 1"));
        }
        Ok(PromptBank {
            prompts,
            trainable: true,
            init_seed,
        })
    }

    pub fn experts(&self) -> usize {
        self.prompts.nrows()
    }

    pub fn width(&self) -> usize {
        self.prompts.ncols()
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn prompts(&self) -> &Array2<T> {
        &self.prompts
    }

    pub fn prompts_mut(&mut self) -> &mut Array2<T> {
        &mut self.prompts
    }

    pub fn prompt(&self, m: usize) -> ArrayView1<'_, T> {
        self.prompts.row(m)
    }

    pub fn param_count(&self) -> usize {
        self.prompts.len()
    }

    /// One whitespace-separated row per prompt.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.prompts.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{:e}", v.to_f64_lossless())).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// `[X | 1 p_mᵀ]`: the prompt of expert `m` appended to every row.
pub fn augment<T: Scalar>(aligned: &Array2<T>, bank: &PromptBank<T>, m: usize) -> Result<Array2<T>> {
    if m >= bank.experts() {
        return Err(GmopeError::arg(format!("expert index {m} out of range for {} prompts", bank.experts())));
    }
    Ok(augment_with(aligned, bank.prompt(m)))
}

pub(crate) fn augment_with<T: Scalar>(aligned: &Array2<T>, prompt: ArrayView1<'_, T>) -> Array2<T> {
    let (n, d0) = aligned.dim();
    let mut out = Array2::zeros((n, d0 + prompt.len()));
    out.slice_mut(s![.., ..d0]).assign(aligned);
    out.slice_mut(s![.., d0..]).assign(&prompt.broadcast((n, prompt.len())).expect("row broadcast"));
    out
}

fn norms<T: Scalar>(bank: &PromptBank<T>) -> Result<Array1<T>> {
    let norms: Array1<T> = bank.prompts.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(m) = norms.iter().position(|&n| !(n > T::zero()) || !n.is_finite()) {
        return Err(GmopeError::NumericDomain(format!("prompt {m} has zero or non-finite norm")));
    }
    Ok(norms)
}

/// Mean over ordered pairs `m != n` of `exp(cos(p_m, p_n))`; zero when
/// there is a single prompt.
pub fn ortho_loss<T: Scalar>(bank: &PromptBank<T>) -> Result<T> {
    let m = bank.experts();
    if m < 2 {
        return Ok(T::zero());
    }
    let norms = norms(bank)?;
    let p = &bank.prompts;
    let mut total = T::zero();
    for a in 0..m {
        for b in (a + 1)..m {
            let cos = p.row(a).dot(&p.row(b)) / (norms[a] * norms[b]);
            total += cos.exp();
        }
    }
    Ok(total * T::lit(2.0) / T::from_usize_lossy(m * (m - 1)))
}

/// Analytic gradient of [`ortho_loss`] with respect to every prompt entry.
pub fn ortho_loss_gradient<T: Scalar>(bank: &PromptBank<T>) -> Result<Array2<T>> {
    let m = bank.experts();
    let mut grad = Array2::zeros(bank.prompts.raw_dim());
    if m < 2 {
        return Ok(grad);
    }
    let norms = norms(bank)?;
    let p = &bank.prompts;
    let scale = T::lit(2.0) / T::from_usize_lossy(m * (m - 1));
    for a in 0..m {
        for b in (a + 1)..m {
            let (pa, pb) = (p.row(a), p.row(b));
            let inv = T::one() / (norms[a] * norms[b]);
            let cos = pa.dot(&pb) * inv;
            let w = scale * cos.exp();
            // d cos / d p_a = p_b/(|a||b|) - cos p_a/|a|^2
            let ga = (&pb * inv - &pa * (cos / (norms[a] * norms[a]))) * w;
            let gb = (&pa * inv - &pb * (cos / (norms[b] * norms[b]))) * w;
            grad.row_mut(a).scaled_add(T::one(), &ga);
            grad.row_mut(b).scaled_add(T::one(), &gb);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bank(rows: Array2<f64>) -> PromptBank<f64> {
        PromptBank::from_matrix(rows, 0).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_nonzero() {
        let a = PromptBank::<f64>::init(3, 64, 41).unwrap();
        assert_eq!(a, PromptBank::init(3, 64, 41).unwrap());
        assert_ne!(a, PromptBank::init(3, 64, 42).unwrap());
        assert!(a.prompts().rows().into_iter().all(|r| r.iter().any(|&v| v != 0.0)));
        assert_eq!(PromptBank::<f64>::init(1, 8, 1).unwrap().experts(), 1);
        assert!(PromptBank::<f64>::init(0, 8, 1).is_err());
    }

    #[test]
    fn init_row_norms_near_one() {
        for seed in 0..100 {
            for width in [16usize, 64] {
                let b = PromptBank::<f64>::init(4, width, seed).unwrap();
                for r in b.prompts().rows() {
                    let n = r.dot(&r).sqrt();
                    assert!((0.5..=2.0).contains(&n), "seed {seed} width {width} norm {n}");
                }
            }
        }
    }

    #[test]
    fn augment_shapes_and_locality() {
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64);
        let b = bank(array![[1.0, 2.0], [3.0, -1.0]]);
        let a0 = augment(&x, &b, 0).unwrap();
        let a1 = augment(&x, &b, 1).unwrap();
        assert_eq!(a0.dim(), (5, 6));
        for r in a0.rows() {
            assert_eq!(r.slice(s![4..]).to_vec(), vec![1.0, 2.0]);
        }
        assert_eq!(a0.slice(s![.., ..4]), a1.slice(s![.., ..4]));
        assert!(a0.slice(s![.., 4..]).iter().zip(a1.slice(s![.., 4..])).all(|(a, b)| a != b));
        assert!(augment(&x, &b, 2).is_err());
        let zero = bank(array![[0.0, 0.0]]);
        let z = augment(&x, &zero, 0).unwrap();
        assert_eq!(z.slice(s![.., ..4]), x);
        assert!(z.slice(s![.., 4..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_values() {
        let e = std::f64::consts::E;
        assert!((ortho_loss(&bank(array![[1.0, 0.0], [1.0, 0.0]])).unwrap() - e).abs() < 1e-12);
        assert!((ortho_loss(&bank(array![[1.0, 0.0], [0.0, 3.0]])).unwrap() - 1.0).abs() < 1e-12);
        assert!((ortho_loss(&bank(Array2::eye(3))).unwrap() - 1.0).abs() < 1e-12);
        let h = 0.5f64.sqrt();
        let v = ortho_loss(&bank(array![[1.0, 0.0], [h, h]])).unwrap();
        assert!((v - 2.028115).abs() < 1e-6);
        assert!((v - h.exp()).abs() < 1e-12);
    }

    #[test]
    fn single_prompt_and_zero_rows() {
        assert_eq!(ortho_loss(&bank(array![[1.0, 2.0]])).unwrap(), 0.0);
        assert_eq!(ortho_loss_gradient(&bank(array![[1.0, 2.0]])).unwrap(), array![[0.0, 0.0]]);
        let z = bank(array![[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(ortho_loss(&z), Err(GmopeError::NumericDomain(_))));
        assert!(ortho_loss_gradient(&z).is_err());
    }

    #[test]
    fn gradient_orthogonal_to_own_prompt() {
        let b = bank(array![[2.0, 0.0, 1.0], [2.0, 0.0, 1.0], [0.3, 1.0, -0.2]]);
        let g = ortho_loss_gradient(&b).unwrap();
        for m in 0..3 {
            assert!(g.row(m).dot(&b.prompt(m)).abs() < 1e-12);
        }
    }

    #[test]
    fn text_dump_has_one_line_per_prompt() {
        let b = PromptBank::<f64>::init(3, 4, 1).unwrap();
        assert_eq!(b.to_text().lines().count(), 3);
    }
}
