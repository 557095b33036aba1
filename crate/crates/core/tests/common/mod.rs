#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use slimrank_core::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Eigenvalues of a symmetric PSD matrix, largest first, by power iteration
/// with Hotelling deflation. Slow and simple on purpose: it shares no code
/// with the Jacobi SVD it is used to check.
pub fn power_iteration_eigenvalues(b: &Matrix) -> Vec<f64> {
    let n = b.rows();
    let mut work = b.clone();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut v: Vec<f64> = (0..n).map(|j| 1.0 + ((i * 31 + j * 17) % 13) as f64 * 0.1).collect();
        normalize(&mut v);
        let mut lambda = 0.0f64;
        let mut stable = 0;
        for _ in 0..20_000 {
            let w = matvec(&work, &v);
            let rq: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                lambda = 0.0;
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
            if (rq - lambda).abs() <= 1e-15 * rq.abs().max(1e-300) {
                stable += 1;
                if stable > 20 {
                    lambda = rq;
                    break;
                }
            } else {
                stable = 0;
            }
            lambda = rq;
        }
        out.push(lambda.max(0.0));
        for r in 0..n {
            for c in 0..n {
                work[(r, c)] -= lambda * v[r] * v[c];
            }
        }
    }
    out.sort_by(|a, b| b.partial_cmp(a).unwrap());
    out
}

fn matvec(a: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..a.rows())
        .map(|r| a.row(r).iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

pub fn orthonormality_error(q: &Matrix) -> f64 {
    let g = q.tr_matmul(q).unwrap();
    g.max_abs_diff(&Matrix::identity(g.rows()))
}
