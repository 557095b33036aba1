use crate::decomposer::{factoring_saves, BlockId, Linear, LowRankFactors};
use crate::error::{Result, SlimError};
use crate::linalg::{cholesky, solve_lower_transposed, svd, CholeskyFactor, DampingPolicy, Matrix, SvdResult};

/// SVD of `Lᵀ·W` where `L·Lᵀ` is the (damped) input Gram of `W`.
///
/// With `y = x·W` and `G = Σ xᵀx`, the data-weighted error of any
/// replacement `W'` is `‖X(W − W')‖² = ‖Lᵀ(W − W')‖²`, so dropping the
/// trailing triplets of this SVD costs exactly their squared singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedSvd {
    pub component: Option<BlockId>,
    pub chol: CholeskyFactor,
    pub svd: SvdResult,
    pub full_rank: usize,
}

impl WhitenedSvd {
    pub fn sigma_sq(&self) -> Vec<f64> {
        self.svd.sigma_sq()
    }

    /// `Σ_{i≥k} σᵢ²` (zero-based), the squared loss of keeping `k` triplets.
    pub fn truncation_loss_sq(&self, k: usize) -> f64 {
        self.svd.sigma.iter().skip(k).map(|s| s * s).sum()
    }

    pub fn d_in(&self) -> usize {
        self.svd.u.rows()
    }

    pub fn d_out(&self) -> usize {
        self.svd.vt.cols()
    }
}

pub fn whiten_and_decompose(w: &Matrix, gram: &Matrix, policy: &DampingPolicy) -> Result<WhitenedSvd> {
    if gram.shape() != (w.rows(), w.rows()) {
        return Err(SlimError::shape(format!(
            "weight {}x{} needs a {}x{} gram, got {}x{}",
            w.rows(),
            w.cols(),
            w.rows(),
            w.rows(),
            gram.rows(),
            gram.cols()
        )));
    }
    let chol = cholesky(gram, policy)?;
    let whitened = chol.l.tr_matmul(w)?;
    let svd = svd(&whitened)?;
    let full_rank = w.rows().min(w.cols());
    Ok(WhitenedSvd {
        component: None,
        chol,
        svd,
        full_rank,
    })
}

/// Rank-`k` factors `A = L⁻ᵀ U_k √Σ_k`, `B = √Σ_k V_kᵀ`.
pub fn truncate(ws: &WhitenedSvd, k: usize) -> Result<LowRankFactors> {
    if k == 0 || k > ws.full_rank {
        return Err(SlimError::input(format!("rank {k} outside 1..={}", ws.full_rank)));
    }
    let root: Vec<f64> = ws.svd.sigma[..k].iter().map(|s| s.sqrt()).collect();
    let mut us = ws.svd.u.first_columns(k).expect("k ≥ 1");
    for r in 0..us.rows() {
        for (v, s) in us.row_mut(r).iter_mut().zip(&root) {
            *v *= s;
        }
    }
    let a = solve_lower_transposed(&ws.chol, &us)?;
    let mut b = ws.svd.vt.first_rows(k).expect("k ≥ 1");
    for (r, s) in root.iter().enumerate() {
        for v in b.row_mut(r) {
            *v *= s;
        }
    }
    LowRankFactors::new(a, b)
}

/// Factors at rank `k`, or `w` itself when factoring would not shrink it
/// and `dense_fallback` is set.
pub fn factor_or_dense(w: &Matrix, ws: &WhitenedSvd, k: usize, dense_fallback: bool) -> Result<Linear> {
    if dense_fallback && !factoring_saves(w.rows(), w.cols(), k) {
        if k == 0 || k > ws.full_rank {
            return Err(SlimError::input(format!("rank {k} outside 1..={}", ws.full_rank)));
        }
        return Ok(Linear::Dense(w.clone()));
    }
    Ok(Linear::Factored(truncate(ws, k)?))
}

/// `‖X(W − W')‖_F²` evaluated directly on the activations.
pub fn data_weighted_loss_sq(x: &Matrix, w: &Matrix, w_approx: &Matrix) -> Result<f64> {
    let diff = x.matmul(&w.sub(w_approx)?)?;
    Ok(diff.data().iter().map(|v| v * v).sum())
}
