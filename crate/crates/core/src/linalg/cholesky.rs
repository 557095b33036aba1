use crate::error::{Result, SlimError};
use crate::linalg::Matrix;

/// Escalating diagonal loads tried in order until factorization succeeds.
///
/// Each rung is multiplied by `trace(G)/dim` so the loading is
/// scale-equivariant. Calibration Grams built from fewer tokens than their
/// dimension are singular and need one of the non-zero rungs.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingPolicy {
    pub ladder: Vec<f64>,
}

impl DampingPolicy {
    pub fn new(ladder: Vec<f64>) -> Result<Self> {
        if ladder.is_empty() || ladder.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SlimError::config(
                "damping ladder must be a nonempty list of nonnegative numbers",
            ));
        }
        Ok(DampingPolicy { ladder })
    }

    /// Only the undamped attempt; factorization of a singular Gram fails.
    pub fn none() -> Self {
        DampingPolicy { ladder: vec![0.0] }
    }
}

impl Default for DampingPolicy {
    fn default() -> Self {
        DampingPolicy {
            ladder: vec![0.0, 1e-10, 1e-8, 1e-6, 1e-4],
        }
    }
}

/// Lower-triangular `L` with `L·Lᵀ = G + damping_applied·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub l: Matrix,
    pub damping_applied: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// `L·Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.l.matmul_tr(&self.l).expect("square factor")
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

pub fn cholesky(g: &Matrix, policy: &DampingPolicy) -> Result<CholeskyFactor> {
    if !g.is_square() {
        return Err(SlimError::shape(format!(
            "cholesky of non-square {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    let n = g.rows();
    let scale = g.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            let asym = (g[(i, j)] - g[(j, i)]).abs();
            if asym > SYMMETRY_TOL * scale {
                return Err(SlimError::shape(format!(
                    "cholesky input asymmetric at ({i},{j}) by {asym:.3e}"
                )));
            }
        }
    }

    let mut mean_diag = g.trace() / n as f64;
    if mean_diag <= 0.0 {
        // an all-zero Gram still gets a usable ridge
        mean_diag = 1.0;
    }
    let max_diag = (0..n).map(|i| g[(i, i)]).fold(mean_diag, f64::max);

    for &rung in &policy.ladder {
        let lambda = rung * mean_diag;
        if let Some(l) = factor(g, lambda, max_diag + lambda) {
            return Ok(CholeskyFactor {
                l,
                damping_applied: lambda,
            });
        }
    }
    Err(SlimError::Singular(format!(
        "{n}x{n} Gram not positive definite at maximum damping {:.1e}",
        policy.ladder.iter().cloned().fold(0.0, f64::max) * mean_diag
    )))
}

/// Plain Cholesky–Banachiewicz on `G + λI`; `None` when a pivot falls below
/// the rounding floor relative to the largest diagonal.
fn factor(g: &Matrix, lambda: f64, max_diag: f64) -> Option<Matrix> {
    let n = g.rows();
    let floor = 16.0 * n as f64 * f64::EPSILON * max_diag;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let li = &l.row(i)[..j];
            let lj = &l.row(j)[..j];
            let dot: f64 = li.iter().zip(lj).map(|(a, b)| a * b).sum();
            if i == j {
                let pivot = g[(i, i)] + lambda - dot;
                if !(pivot > floor) {
                    return None;
                }
                l[(i, i)] = pivot.sqrt();
            } else {
                l[(i, j)] = (g[(i, j)] - dot) / l[(j, j)];
            }
        }
    }
    Some(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factor_is_identity() {
        let f = cholesky(&Matrix::identity(4), &DampingPolicy::default()).unwrap();
        assert_eq!(f.l, Matrix::identity(4));
        assert_eq!(f.damping_applied, 0.0);
    }

    #[test]
    fn two_by_two_by_hand() {
        let g = Matrix::from_rows(&[[4.0, 2.0], [2.0, 5.0]]);
        let f = cholesky(&g, &DampingPolicy::default()).unwrap();
        assert_eq!(f.l, Matrix::from_rows(&[[2.0, 0.0], [1.0, 2.0]]));
        assert!(f.reconstruct().rel_frobenius_diff(&g) < 1e-12);
    }

    #[test]
    fn rank_one_gram_needs_damping() {
        let g = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        let f = cholesky(&g, &DampingPolicy::default()).unwrap();
        assert!(f.damping_applied > 0.0);
        let damped = g.add(&Matrix::identity(2).scale(f.damping_applied)).unwrap();
        assert!(f.reconstruct().rel_frobenius_diff(&damped) < 1e-8);
        assert!(matches!(
            cholesky(&g, &DampingPolicy::none()),
            Err(SlimError::Singular(_))
        ));
    }

    #[test]
    fn zero_gram_is_loaded_by_ladder() {
        let f = cholesky(&Matrix::zeros(3, 3), &DampingPolicy::default()).unwrap();
        assert!(f.damping_applied > 0.0);
    }

    #[test]
    fn rejects_nonsquare_and_asymmetric() {
        let p = DampingPolicy::default();
        assert!(matches!(cholesky(&Matrix::zeros(2, 3), &p), Err(SlimError::Shape(_))));
        let g = Matrix::from_rows(&[[2.0, 1.0], [0.0, 2.0]]);
        assert!(matches!(cholesky(&g, &p), Err(SlimError::Shape(_))));
    }

    #[test]
    fn indefinite_fails_at_max_damping() {
        let g = Matrix::from_rows(&[[1.0, 0.0], [0.0, -1.0]]);
        assert!(matches!(
            cholesky(&g, &DampingPolicy::default()),
            Err(SlimError::Singular(_))
        ));
    }

    #[test]
    fn factor_is_lower_with_positive_diagonal() {
        let m = Matrix::from_fn(6, 4, |r, c| ((r * 5 + c * 3) % 7) as f64 - 3.0);
        let g = m.tr_matmul(&m).unwrap().add(&Matrix::identity(4)).unwrap();
        let f = cholesky(&g, &DampingPolicy::default()).unwrap();
        for i in 0..4 {
            assert!(f.l[(i, i)] > 0.0);
            for j in i + 1..4 {
                assert_eq!(f.l[(i, j)], 0.0);
            }
        }
        assert_eq!(f.damping_applied, 0.0);
        assert!(f.reconstruct().rel_frobenius_diff(&g) < 1e-12);
    }
}
