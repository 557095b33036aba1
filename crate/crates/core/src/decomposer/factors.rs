use crate::error::{Result, SlimError};
use crate::linalg::Matrix;

/// `W ≈ A·B` with `A: d_in × k` and `B: k × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    pub a: Matrix,
    pub b: Matrix,
}

impl LowRankFactors {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(SlimError::shape(format!(
                "factor pair {}x{} and {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        if a.cols() > a.rows().min(b.cols()) {
            return Err(SlimError::shape(format!(
                "rank {} exceeds min({}, {})",
                a.cols(),
                a.rows(),
                b.cols()
            )));
        }
        Ok(LowRankFactors { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_in(&self) -> usize {
        self.a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.b.cols()
    }

    /// `(d_in + d_out)·k`
    pub fn param_count(&self) -> usize {
        (self.d_in() + self.d_out()) * self.rank()
    }

    pub fn to_dense(&self) -> Matrix {
        self.a.matmul(&self.b).expect("conforming factors")
    }
}

/// A projection stored either dense or as a factor pair.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Dense(Matrix),
    Factored(LowRankFactors),
}

impl Linear {
    /// `x·W`, or `(x·A)·B` for factored weights.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Linear::Dense(w) => x.matmul(w),
            Linear::Factored(f) => x.matmul(&f.a)?.matmul(&f.b),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Linear::Dense(w) => w.rows(),
            Linear::Factored(f) => f.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Linear::Dense(w) => w.cols(),
            Linear::Factored(f) => f.d_out(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Linear::Dense(w) => w.rows() * w.cols(),
            Linear::Factored(f) => f.param_count(),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            Linear::Dense(_) => None,
            Linear::Factored(f) => Some(f.rank()),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            Linear::Dense(w) => w.clone(),
            Linear::Factored(f) => f.to_dense(),
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self, Linear::Factored(_))
    }
}
