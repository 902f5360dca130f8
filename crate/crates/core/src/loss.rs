//! Per-sample losses and the empirical CVaR tail objective.
//!
//! Cross-entropy (multiclass) and binary cross-entropy (multilabel) are
//! computed per sample in `f64` with the usual log-sum-exp / softplus
//! stabilizations. The CVaR objective at tail level α replaces the plain
//! mean: with per-sample losses ℓ and threshold λ,
//!
//! ```text
//! L(λ) = λ + (1/(α·b)) · Σ_i max(ℓ_i − λ, 0)
//! ```
//!
//! minimized over λ. `L` is convex piecewise-linear in λ; the minimizer
//! is found by subgradient-driven binary search and canonicalized to the
//! k-th largest loss, k = ⌈α·b⌉. Only the k largest losses ("hard"
//! samples) then carry gradient weight 1/(α·b); the rest are ignored.
//!
//! α may be 1: the active set is the whole batch, every weight is 1/b,
//! and the objective reduces to the mean loss.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("label out of range at row {row}: value {value}, limit {limit}")]
    LabelOutOfRange {
        row: usize,
        value: usize,
        limit: usize,
    },
    #[error("label not binary at row {row}, unit {unit}: {value}")]
    LabelNotBinary { row: usize, unit: usize, value: u8 },
    #[error("empty loss vector")]
    EmptyLosses,
    #[error("size mismatch: solution for batch of {expected}, gradients for {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("alpha must lie in (0, 1], got {alpha}")]
    InvalidAlpha { alpha: f64 },
    #[error("tolerance must be positive, got {tolerance}")]
    InvalidTolerance { tolerance: f64 },
}

/// Hinge function: `max(0, a)`.
pub fn hinge(a: f64) -> f64 {
    a.max(0.0)
}

/// Per-sample cross-entropy and its logit gradient.
///
/// Returns `(losses, grads)` where `losses[i] = -log softmax(logits_i)[y_i]`
/// and `grads` row i is `softmax(logits_i) - onehot(y_i)` — the gradient of
/// the *individual* loss; CVaR weighting is applied separately.
pub fn cross_entropy(
    logits: ArrayView2<'_, f64>,
    labels: &[u16],
) -> Result<(Vec<f64>, Array2<f64>), LossError> {
    let (b, k) = logits.dim();
    assert_eq!(labels.len(), b, "one label per logit row");
    let mut losses = Vec::with_capacity(b);
    let mut grads = Array2::zeros((b, k));
    for i in 0..b {
        let y = labels[i] as usize;
        if y >= k {
            return Err(LossError::LabelOutOfRange {
                row: i,
                value: y,
                limit: k,
            });
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        losses.push(lse - row[y]);
        for j in 0..k {
            let p = (row[j] - lse).exp();
            grads[[i, j]] = p - if j == y { 1.0 } else { 0.0 };
        }
    }
    Ok((losses, grads))
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-sample binary cross-entropy, averaged over the m units, and its
/// logit gradient `(sigmoid(z) - y) / m`.
pub fn binary_cross_entropy(
    logits: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, u8>,
) -> Result<(Vec<f64>, Array2<f64>), LossError> {
    let (b, m) = logits.dim();
    assert_eq!(labels.dim(), (b, m), "labels must match logit shape");
    let mut losses = Vec::with_capacity(b);
    let mut grads = Array2::zeros((b, m));
    let m_f = m as f64;
    for i in 0..b {
        let mut acc = 0.0;
        for j in 0..m {
            let y = labels[[i, j]];
            if y > 1 {
                return Err(LossError::LabelNotBinary {
                    row: i,
                    unit: j,
                    value: y,
                });
            }
            let z = logits[[i, j]];
            let y_f = f64::from(y);
            // max(z,0) - z*y + log(1 + exp(-|z|))
            acc += z.max(0.0) - z * y_f + (-z.abs()).exp().ln_1p();
            grads[[i, j]] = (sigmoid(z) - y_f) / m_f;
        }
        losses.push(acc / m_f);
    }
    Ok((losses, grads))
}

/// Tail level and λ-search controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvarConfig {
    /// Tail level in (0, 1]; 1 recovers the mean loss.
    pub alpha: f64,
    /// Absolute bracket-width tolerance for the binary search.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl CvarConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            tolerance: 1e-9,
            max_iterations: 200,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.alpha.is_nan() || self.alpha <= 0.0 || self.alpha > 1.0 {
            return Err(LossError::InvalidAlpha { alpha: self.alpha });
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(LossError::InvalidTolerance {
                tolerance: self.tolerance,
            });
        }
        Ok(())
    }
}

impl Default for CvarConfig {
    fn default() -> Self {
        Self::with_alpha(0.3)
    }
}

/// Solved minibatch CVaR: threshold, objective value, and the active set
/// carrying nonzero gradient weight.
#[derive(Debug, Clone, PartialEq)]
pub struct CvarSolution {
    /// λ*: the k-th largest loss, k = ⌈α·b⌉ (bracket midpoint if the
    /// search hit its iteration cap).
    pub lambda: f64,
    /// Objective value at λ*.
    pub objective: f64,
    /// Indices of the k largest losses, ascending; ties at the boundary
    /// broken by ascending sample index.
    pub active: Vec<usize>,
    /// Gradient weight on each active sample: 1/(α·b).
    pub weight: f64,
    /// Batch size the solution was computed over.
    pub batch_size: usize,
    /// False only if the binary search hit `max_iterations` first.
    pub converged: bool,
}

impl CvarSolution {
    /// Dense weight vector: 1/(α·b) on the active set, 0 elsewhere.
    pub fn per_sample_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.batch_size];
        for &i in &self.active {
            w[i] = self.weight;
        }
        w
    }
}

/// Number of samples in the CVaR tail: ⌈α·b⌉, clamped to [1, b].
pub fn active_count(alpha: f64, b: usize) -> usize {
    ((alpha * b as f64).ceil() as usize).clamp(1, b)
}

/// Evaluates `λ + (1/(α·b)) Σ_i max(ℓ_i − λ, 0)`.
pub fn cvar_objective(losses: &[f64], lambda: f64, alpha: f64) -> f64 {
    debug_assert!(alpha > 0.0 && alpha <= 1.0);
    let b = losses.len() as f64;
    let sum: f64 = losses.iter().map(|&l| hinge(l - lambda)).sum();
    lambda + sum / (alpha * b)
}

/// Minimizes the CVaR objective over λ by binary search on the
/// subgradient `1 − #{ℓ_i > λ}/(α·b)`, then canonicalizes λ* to the
/// exact k-th largest loss.
///
/// On plateaus (integral α·b) the search is steered toward the right
/// edge, which is where the k-th largest loss sits. If the iteration cap
/// is hit first the bracket midpoint is returned with `converged: false`.
pub fn cvar_lambda_search(losses: &[f64], config: &CvarConfig) -> Result<CvarSolution, LossError> {
    config.validate()?;
    let b = losses.len();
    if b == 0 {
        return Err(LossError::EmptyLosses);
    }
    let alpha = config.alpha;
    let k = active_count(alpha, b);
    let ab = alpha * b as f64;

    let mut lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut converged = hi - lo < config.tolerance;
    let mut iterations = 0;
    while !converged {
        if iterations >= config.max_iterations {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let above = losses.iter().filter(|&&l| l > mid).count() as f64;
        let subgradient = 1.0 - above / ab;
        if subgradient > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
        converged = hi - lo < config.tolerance;
    }

    // Deterministic top-k: loss descending, index ascending on ties.
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&a, &c| {
        losses[c]
            .partial_cmp(&losses[a])
            .expect("losses must not be NaN")
            .then(a.cmp(&c))
    });
    let mut active: Vec<usize> = order[..k].to_vec();
    active.sort_unstable();

    let lambda = if converged {
        losses[order[k - 1]]
    } else {
        0.5 * (lo + hi)
    };
    let objective = cvar_objective(losses, lambda, alpha);
    Ok(CvarSolution {
        lambda,
        objective,
        active,
        weight: 1.0 / ab,
        batch_size: b,
        converged,
    })
}

/// Assembles the batch logit gradient `Σ_i w_i · g_i` from per-sample
/// individual-loss gradients: rows on the active set scaled by 1/(α·b),
/// all other rows zero.
pub fn cvar_weights_to_logit_grad(
    solution: &CvarSolution,
    per_sample: ArrayView2<'_, f64>,
) -> Result<Array2<f64>, LossError> {
    if per_sample.nrows() != solution.batch_size {
        return Err(LossError::SizeMismatch {
            expected: solution.batch_size,
            got: per_sample.nrows(),
        });
    }
    let mut out = Array2::zeros(per_sample.dim());
    for &i in &solution.active {
        for j in 0..per_sample.ncols() {
            out[[i, j]] = solution.weight * per_sample[[i, j]];
        }
    }
    Ok(out)
}
