use crate::error::{Result, SlimError};
use crate::linalg::{CholeskyFactor, Matrix};

/// Smallest admissible pivot magnitude relative to the largest diagonal.
const PIVOT_TOL: f64 = 1e-14;

/// Solves `L·Y = B` by forward substitution.
pub fn solve_lower_triangular(l: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    solve_lower(&l.l, b)
}

/// Solves `Lᵀ·Y = B` by back substitution, reading `L` in place.
pub fn solve_lower_transposed(l: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    let l = &l.l;
    check(l, b)?;
    let n = l.rows();
    let mut y = b.clone();
    let cols = b.cols();
    let mut acc = vec![0.0; cols];
    for i in (0..n).rev() {
        acc.copy_from_slice(y.row(i));
        for j in i + 1..n {
            let lji = l[(j, i)];
            if lji != 0.0 {
                for (a, v) in acc.iter_mut().zip(y.row(j)) {
                    *a -= lji * v;
                }
            }
        }
        let d = l[(i, i)];
        for (dst, a) in y.row_mut(i).iter_mut().zip(&acc) {
            *dst = a / d;
        }
    }
    Ok(y)
}

/// Forward substitution against any lower-triangular matrix.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    check(l, b)?;
    let n = l.rows();
    let mut y = b.clone();
    let cols = b.cols();
    let mut acc = vec![0.0; cols];
    for i in 0..n {
        acc.copy_from_slice(y.row(i));
        for j in 0..i {
            let lij = l[(i, j)];
            if lij != 0.0 {
                for (a, v) in acc.iter_mut().zip(y.row(j)) {
                    *a -= lij * v;
                }
            }
        }
        let d = l[(i, i)];
        for (dst, a) in y.row_mut(i).iter_mut().zip(&acc) {
            *dst = a / d;
        }
    }
    Ok(y)
}

fn check(l: &Matrix, b: &Matrix) -> Result<()> {
    if !l.is_square() || l.rows() != b.rows() {
        return Err(SlimError::shape(format!(
            "triangular solve with {}x{} factor and {}x{} right-hand side",
            l.rows(),
            l.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = l.rows();
    let max_diag = (0..n).map(|i| l[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..n {
        if l[(i, i)].abs() <= PIVOT_TOL * max_diag || l[(i, i)] == 0.0 {
            return Err(SlimError::Singular(format!(
                "triangular pivot {i} is {:.3e}",
                l[(i, i)]
            )));
        }
    }
    Ok(())
}
