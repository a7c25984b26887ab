//! Structure-aware routing: experts are scored by their objective value on
//! the current batch, the top-K are activated, and gate weights are either a
//! temperature softmax over the active set (soft) or uniform `1/K` (hard).

use serde::{Deserialize, Serialize};

use crate::error::{GmopeError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterMode {
    Soft,
    Hard,
}

/// How a raw score (a loss) becomes a routing score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDirection {
    /// Lower loss routes more weight (`score = -rawscore`).
    #[default]
    PreferLow,
    /// Higher raw score routes more weight (`score = rawscore`).
    PreferHigh,
}

impl ScoreDirection {
    fn score<T: Scalar>(self, raw: T) -> T {
        match self {
            ScoreDirection::PreferLow => -raw,
            ScoreDirection::PreferHigh => raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision<T> {
    pub rawscores: Vec<T>,
    /// Active expert indices, ascending.
    pub active: Vec<usize>,
    /// Gate weights over all `M` experts; zero outside `active`.
    pub weights: Vec<T>,
    pub mode: RouterMode,
    pub temperature: Option<T>,
}

impl<T: Scalar> RoutingDecision<T> {
    pub fn experts(&self) -> usize {
        self.weights.len()
    }

    pub fn is_active(&self, m: usize) -> bool {
        self.active.binary_search(&m).is_ok()
    }

    /// Gate weight 1 on a single expert; used when `M = 1` or for fixed routing.
    pub fn single(experts: usize, chosen: usize, rawscores: Vec<T>) -> Self {
        let mut weights = vec![T::zero(); experts];
        weights[chosen] = T::one();
        RoutingDecision {
            rawscores,
            active: vec![chosen],
            weights,
            mode: RouterMode::Hard,
            temperature: None,
        }
    }
}

/// Mean per-sample objective value of every expert on one batch.
/// `per_sample[m]` holds expert `m`'s per-sample losses.
pub fn rawscore<T: Scalar>(per_sample: &[Vec<T>]) -> Result<Vec<T>> {
    if per_sample.is_empty() {
        return Err(GmopeError::arg("no experts to score"));
    }
    per_sample
        .iter()
        .map(|losses| {
            if losses.is_empty() {
                Err(GmopeError::arg("cannot score an empty batch"))
            } else {
                Ok(losses.iter().copied().sum::<T>() / T::from_usize_lossy(losses.len()))
            }
        })
        .collect()
}

/// Indices of the `k` best routing scores; ties go to the lower index.
/// Returned ascending.
pub fn top_k<T: Scalar>(rawscores: &[T], k: usize, direction: ScoreDirection) -> Result<Vec<usize>> {
    let m = rawscores.len();
    if k == 0 || k > m {
        return Err(GmopeError::arg(format!("K = {k} outside [1, {m}]")));
    }
    if rawscores.iter().any(|s| s.is_nan()) {
        return Err(GmopeError::NumericDomain("routing score is NaN".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (direction.score(rawscores[a]), direction.score(rawscores[b]));
        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
    });
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn soft_route<T: Scalar>(
    rawscores: &[T],
    k: usize,
    temperature: T,
    direction: ScoreDirection,
) -> Result<RoutingDecision<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(GmopeError::arg("temperature must be positive and finite"));
    }
    let active = top_k(rawscores, k, direction)?;
    let scores: Vec<T> = active.iter().map(|&i| direction.score(rawscores[i]) / temperature).collect();
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let mut weights = vec![T::zero(); rawscores.len()];
    for (&i, &e) in active.iter().zip(&exps) {
        weights[i] = e / total;
    }
    Ok(RoutingDecision {
        rawscores: rawscores.to_vec(),
        active,
        weights,
        mode: RouterMode::Soft,
        temperature: Some(temperature),
    })
}

pub fn hard_route<T: Scalar>(rawscores: &[T], k: usize, direction: ScoreDirection) -> Result<RoutingDecision<T>> {
    let active = top_k(rawscores, k, direction)?;
    let w = T::one() / T::from_usize_lossy(k);
    let mut weights = vec![T::zero(); rawscores.len()];
    for &i in &active {
        weights[i] = w;
    }
    Ok(RoutingDecision {
        rawscores: rawscores.to_vec(),
        active,
        weights,
        mode: RouterMode::Hard,
        temperature: None,
    })
}

pub fn route<T: Scalar>(
    rawscores: &[T],
    mode: RouterMode,
    k: usize,
    temperature: T,
    direction: ScoreDirection,
) -> Result<RoutingDecision<T>> {
    match mode {
        RouterMode::Soft => soft_route(rawscores, k, temperature, direction),
        RouterMode::Hard => hard_route(rawscores, k, direction),
    }
}
