//! Trusted baselines: a textbook LU and reproducible test matrices.
//!
//! The GEMM baseline lives next to the blocked driver as
//! [`crate::gemm::oracle_gemm`].

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::{MatRef, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatrixKind {
    /// Independent draws from `[-1, 1)`.
    Uniform,
    /// Integers in `-4..=4`, so that short dot products are exact.
    Integer,
    Identity,
    Zero,
    /// Product of two uniform factors of inner dimension `min(rows, cols) / 2`.
    RankDeficient,
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatrixKind::Uniform => "uniform",
            MatrixKind::Integer => "integer",
            MatrixKind::Identity => "identity",
            MatrixKind::Zero => "zero",
            MatrixKind::RankDeficient => "rank-deficient",
        })
    }
}

impl FromStr for MatrixKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "uniform" => Self::Uniform,
            "integer" => Self::Integer,
            "identity" => Self::Identity,
            "zero" => Self::Zero,
            "rank-deficient" => Self::RankDeficient,
            _ => return Err(format!("unknown matrix kind {s:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TestMatrixSpec {
    pub kind: MatrixKind,
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
}

impl TestMatrixSpec {
    pub fn new(kind: MatrixKind, seed: u64, rows: usize, cols: usize) -> Self {
        Self {
            kind,
            seed,
            rows,
            cols,
        }
    }
}

/// The matrix described by `spec`; identical specs give identical bits.
pub fn gen_matrix(spec: &TestMatrixSpec) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (r, c) = (spec.rows, spec.cols);
    match spec.kind {
        MatrixKind::Uniform => {
            let d = Uniform::new(-1.0, 1.0);
            Matrix::from_fn(r, c, |_, _| d.sample(&mut rng))
        }
        MatrixKind::Integer => {
            let d = Uniform::new_inclusive(-4i32, 4);
            Matrix::from_fn(r, c, |_, _| f64::from(d.sample(&mut rng)))
        }
        MatrixKind::Identity => Matrix::from_fn(r, c, |i, j| if i == j { 1.0 } else { 0.0 }),
        MatrixKind::Zero => Matrix::zeros(r, c),
        MatrixKind::RankDeficient => {
            let inner = (r.min(c) / 2).max(1);
            let d = Uniform::new(-1.0, 1.0);
            let x = Matrix::from_fn(r, inner, |_, _| d.sample(&mut rng));
            let y = Matrix::from_fn(inner, c, |_, _| d.sample(&mut rng));
            Matrix::from_fn(r, c, |i, j| (0..inner).map(|p| x[(i, p)] * y[(p, j)]).sum())
        }
    }
}

/// Unblocked LU with partial pivoting, dividing by each pivot. Ties in the
/// pivot search go to the smallest row index and zero pivots leave their
/// column of `L` at zero. Returns explicit `(L, U, pivots)` with `P A = L U`.
pub fn oracle_lu(a: MatRef<'_>) -> (Matrix, Matrix, Vec<usize>) {
    assert_eq!(a.rows(), a.cols(), "oracle_lu needs a square matrix");
    let s = a.rows();
    let mut w = a.to_matrix();
    let mut pivots = Vec::with_capacity(s);
    for j in 0..s {
        let mut p = j;
        for i in j + 1..s {
            if w[(i, j)].abs() > w[(p, j)].abs() {
                p = i;
            }
        }
        pivots.push(p);
        for c in 0..s {
            let t = w[(j, c)];
            w[(j, c)] = w[(p, c)];
            w[(p, c)] = t;
        }
        let piv = w[(j, j)];
        for i in j + 1..s {
            let l = if piv == 0.0 {
                w[(i, j)]
            } else {
                w[(i, j)] / piv
            };
            w[(i, j)] = l;
            for c in j + 1..s {
                w[(i, c)] -= l * w[(j, c)];
            }
        }
    }
    let l = Matrix::from_fn(s, s, |i, j| {
        if i == j {
            1.0
        } else if i > j {
            w[(i, j)]
        } else {
            0.0
        }
    });
    let u = Matrix::from_fn(s, s, |i, j| if i <= j { w[(i, j)] } else { 0.0 });
    (l, u, pivots)
}
