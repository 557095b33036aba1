//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of the working copy are rotated pairwise until every pair is
//! orthogonal to within a relative tolerance; the column norms are then the
//! singular values and the accumulated rotations the right singular vectors.
//! The method is deterministic and delivers high relative accuracy for the
//! small singular values, which the truncation-loss identities depend on.

use crate::error::{Result, SlimError};
use crate::linalg::Matrix;

pub const MAX_SWEEPS: usize = 100;

/// `a = u · diag(sigma) · vt`, with `r = min(m, n)` triplets in descending
/// order. The largest-magnitude entry of each column of `u` is nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_rank(self.sigma.len())
            .expect("full reconstruction of a nonempty svd")
    }

    /// `U_k Σ_k V_kᵀ`; `None` for `k = 0`.
    pub fn reconstruct_rank(&self, k: usize) -> Option<Matrix> {
        let k = k.min(self.sigma.len());
        let mut us = self.u.first_columns(k)?;
        for r in 0..us.rows() {
            for (v, s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *v *= s;
            }
        }
        let vt = self.vt.first_rows(k)?;
        Some(us.matmul(&vt).expect("conforming svd factors"))
    }

    pub fn sigma_sq(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s * s).collect()
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_all_finite() {
        return Err(SlimError::NonFinite("svd input"));
    }
    if a.rows() >= a.cols() {
        svd_tall(a)
    } else {
        // a = (aᵀ)ᵀ = (U Σ Vᵀ)ᵀ = V Σ Uᵀ
        let t = svd_tall(&a.transpose())?;
        let mut out = SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

fn svd_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let tol = (m as f64) * f64::EPSILON;
    let mut converged = false;
    let mut worst = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        worst = 0.0f64;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                worst = worst.max(ratio);
                if ratio <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SlimError::Convergence {
            sweeps: MAX_SWEEPS,
            residual: worst,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| scaled_norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal singular values keep their column order
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > 0.0 {
            for r in 0..m {
                u[(r, k)] = cols[src][r] / s;
            }
        } else {
            missing.push(k);
        }
        vt.row_mut(k).copy_from_slice(&vcols[src]);
    }
    complete_basis(&mut u, &missing);

    let mut out = SvdResult { u, sigma, vt };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn scaled_norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    scale * v.iter().map(|x| (x / scale) * (x / scale)).sum::<f64>().sqrt()
}

/// Fills the listed (zero-singular-value) columns of `u` with unit vectors
/// orthogonal to every other column, by Gram–Schmidt on coordinate axes.
fn complete_basis(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|c| !missing.contains(c)).collect();
    for &slot in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for axis in 0..m {
            let mut v = vec![0.0; m];
            v[axis] = 1.0;
            for _pass in 0..2 {
                for &c in &filled {
                    let dot: f64 = (0..m).map(|r| u[(r, c)] * v[r]).sum();
                    for (r, x) in v.iter_mut().enumerate() {
                        *x -= dot * u[(r, c)];
                    }
                }
            }
            let norm = scaled_norm(&v);
            if best.as_ref().is_none_or(|(b, _)| norm > *b + 1e-12) {
                best = Some((norm, v));
            }
        }
        let (norm, v) = best.expect("at least one axis");
        for r in 0..m {
            u[(r, slot)] = v[r] / norm;
        }
        filled.push(slot);
    }
}

fn fix_signs(s: &mut SvdResult) {
    for k in 0..s.sigma.len() {
        let mut pivot = 0.0f64;
        let mut pivot_val = 0.0;
        for r in 0..s.u.rows() {
            let v = s.u[(r, k)];
            if v.abs() > pivot {
                pivot = v.abs();
                pivot_val = v;
            }
        }
        if pivot_val < 0.0 {
            for r in 0..s.u.rows() {
                s.u[(r, k)] = -s.u[(r, k)];
            }
            for x in s.vt.row_mut(k) {
                *x = -*x;
            }
        }
    }
}
