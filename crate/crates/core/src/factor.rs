//! Blocked right-looking LU factorization with partial pivoting.
//!
//! Each step of width `b` factors the current column panel (PFACT), applies
//! the panel's row interchanges left and right of it, solves for the block
//! row of `U` (TSOLVE), and updates the trailing submatrix with one GEMM,
//! `A22 := A22 - A21 * A12`. That GEMM is an `(s-k-b) x (s-k-b) x b`
//! product. Its `m` and `n` shrink as the factorization advances, which is
//! why the CCPs may be re-derived at every step.

use thiserror::Error;

use crate::ccp::{CcpError, CcpModel, CcpPolicy};
use crate::gemm::{gemm, GemmContext, GemmError};
use crate::hwdesc::CacheHierarchy;
use crate::matrix::{MatMut, MatRef, Matrix};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LuError {
    #[error("LU needs a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("block size {b} outside 1..={s}")]
    InvalidBlockSize { b: usize, s: usize },
    #[error(
        "pivot {pivot} (offset {offset}) at position {index} is outside a block of {rows} rows"
    )]
    PivotOutOfRange {
        index: usize,
        pivot: usize,
        offset: usize,
        rows: usize,
    },
    #[error("dimension mismatch: L11 is {l_rows}x{l_cols}, A12 has {a_rows} rows")]
    DimensionMismatch {
        l_rows: usize,
        l_cols: usize,
        a_rows: usize,
    },
    #[error(transparent)]
    Gemm(#[from] GemmError),
    #[error(transparent)]
    Ccp(#[from] CcpError),
}

/// Algorithmic block size `b`, with `1 <= b <= s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSize(usize);

impl BlockSize {
    pub fn new(b: usize, s: usize) -> Result<Self, LuError> {
        if b == 0 || b > s.max(1) {
            return Err(LuError::InvalidBlockSize { b, s });
        }
        Ok(Self(b))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Row interchanges and singularity report of a factorization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LuResult {
    /// Row `j` was swapped with row `pivots[j]` (0-based, `pivots[j] >= j`).
    pub pivots: Vec<usize>,
    /// First column whose pivot was exactly zero.
    pub info: Option<usize>,
}

/// Unblocked LU with partial pivoting of a tall panel, in place.
///
/// `pivots[j]` receives the panel-local row swapped with row `j`. Returns the
/// first column with an exactly zero pivot; the factorization continues past
/// it, leaving that column's multipliers untouched.
pub fn pfact(mut panel: MatMut<'_>, pivots: &mut [usize]) -> Option<usize> {
    let (rows, cols) = (panel.rows(), panel.cols());
    let steps = rows.min(cols);
    assert!(pivots.len() >= steps, "pivot slice too short");
    let mut info = None;
    for (j, slot) in pivots.iter_mut().take(steps).enumerate() {
        let mut p = j;
        let mut best = panel.get(j, j).abs();
        for i in j + 1..rows {
            let v = panel.get(i, j).abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        *slot = p;
        if p != j {
            panel.swap_rows(j, p);
        }
        let piv = panel.get(j, j);
        if piv == 0.0 {
            info.get_or_insert(j);
        } else {
            let r = 1.0 / piv;
            for i in j + 1..rows {
                let v = panel.get(i, j) * r;
                panel.set(i, j, v);
            }
        }
        for c in j + 1..cols {
            let u = panel.get(j, c);
            for i in j + 1..rows {
                let v = panel.get(i, c) - panel.get(i, j) * u;
                panel.set(i, c, v);
            }
        }
    }
    info
}

fn check_pivots(rows: usize, pivots: &[usize], offset: usize) -> Result<(), LuError> {
    for (index, &pivot) in pivots.iter().enumerate() {
        if pivot < offset || pivot - offset >= rows || index >= rows {
            return Err(LuError::PivotOutOfRange {
                index,
                pivot,
                offset,
                rows,
            });
        }
    }
    Ok(())
}

/// Swaps row `j` with row `pivots[j] - offset` for ascending `j`.
pub fn apply_row_swaps(
    mut block: MatMut<'_>,
    pivots: &[usize],
    offset: usize,
) -> Result<(), LuError> {
    check_pivots(block.rows(), pivots, offset)?;
    for (j, &p) in pivots.iter().enumerate() {
        if p - offset != j {
            block.swap_rows(j, p - offset);
        }
    }
    Ok(())
}

/// Inverse of [`apply_row_swaps`]: the same swaps in descending `j`.
pub fn undo_row_swaps(
    mut block: MatMut<'_>,
    pivots: &[usize],
    offset: usize,
) -> Result<(), LuError> {
    check_pivots(block.rows(), pivots, offset)?;
    for (j, &p) in pivots.iter().enumerate().rev() {
        if p - offset != j {
            block.swap_rows(j, p - offset);
        }
    }
    Ok(())
}

/// `A12 := L11^{-1} A12` with `L11` unit lower triangular, by forward
/// substitution one column at a time. Only the strict lower part of `l11`
/// is read.
pub fn tsolve(l11: MatRef<'_>, mut a12: MatMut<'_>) -> Result<(), LuError> {
    let b = l11.rows();
    if l11.cols() != b || a12.rows() != b {
        return Err(LuError::DimensionMismatch {
            l_rows: l11.rows(),
            l_cols: l11.cols(),
            a_rows: a12.rows(),
        });
    }
    for c in 0..a12.cols() {
        for i in 0..b {
            let x = a12.get(i, c);
            for r in i + 1..b {
                let v = a12.get(r, c) - l11.get(r, i) * x;
                a12.set(r, c, v);
            }
        }
    }
    Ok(())
}

/// When the trailing-update CCPs are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcpSchedule {
    /// Re-derive for every step's `(s-k-b, s-k-b, b)` shape.
    PerIteration,
    /// Derive once, for the first step's shape.
    Once,
}

/// How `lu_blocked_with` chooses the trailing GEMM's context.
#[derive(Debug, Clone)]
pub struct LuOptions<'h> {
    /// Kernel, threading and (when no model is given) the CCPs.
    pub gemm: GemmContext,
    /// Cache model and policy used to plan CCPs.
    pub model: Option<(&'h CacheHierarchy, CcpPolicy)>,
    pub schedule: CcpSchedule,
}

impl<'h> LuOptions<'h> {
    /// Always use `ctx` as given.
    pub fn fixed(ctx: GemmContext) -> Self {
        Self {
            gemm: ctx,
            model: None,
            schedule: CcpSchedule::Once,
        }
    }

    pub fn planned(
        ctx: GemmContext,
        hier: &'h CacheHierarchy,
        policy: CcpPolicy,
        schedule: CcpSchedule,
    ) -> Self {
        Self {
            gemm: ctx,
            model: Some((hier, policy)),
            schedule,
        }
    }

    fn context_for(&self, m: usize, n: usize, k: usize) -> Result<GemmContext, LuError> {
        let mut ctx = self.gemm;
        if let Some((hier, policy)) = &self.model {
            ctx.ccps = CcpModel::new(hier).plan(policy, ctx.kernel.shape, m, n, k)?;
        }
        Ok(ctx)
    }
}

/// Factors `a` in place into `L\U` with the trailing updates run through
/// `gemm` with the CCPs of `ctx`.
pub fn lu_blocked(a: MatMut<'_>, b: BlockSize, ctx: &GemmContext) -> Result<LuResult, LuError> {
    lu_blocked_with(a, b, &LuOptions::fixed(*ctx))
}

pub fn lu_blocked_with(
    mut a: MatMut<'_>,
    b: BlockSize,
    opts: &LuOptions<'_>,
) -> Result<LuResult, LuError> {
    let s = a.rows();
    if a.cols() != s {
        return Err(LuError::NotSquare {
            rows: s,
            cols: a.cols(),
        });
    }
    let b = b.get();
    if b > s.max(1) {
        return Err(LuError::InvalidBlockSize { b, s });
    }
    let mut pivots = vec![0usize; s];
    let mut info = None;
    let mut once: Option<GemmContext> = None;

    for k0 in (0..s).step_by(b) {
        let kb = b.min(s - k0);
        let rest = s - k0 - kb;
        let piv = &mut pivots[k0..k0 + kb];

        let panel = a.rb_mut().submatrix_mut(k0, k0, s - k0, kb);
        if let Some(j) = pfact(panel, piv) {
            info.get_or_insert(k0 + j);
        }
        apply_row_swaps(a.rb_mut().submatrix_mut(k0, 0, s - k0, k0), piv, 0)?;
        apply_row_swaps(a.rb_mut().submatrix_mut(k0, k0 + kb, s - k0, rest), piv, 0)?;
        for p in piv.iter_mut() {
            *p += k0;
        }
        if rest == 0 {
            continue;
        }

        let trailing = a.rb_mut().submatrix_mut(k0, k0, s - k0, s - k0);
        let (a11, mut a12, a21, a22) = trailing.split_at(kb, kb);
        tsolve(a11.rb(), a12.rb_mut())?;
        let ctx = match (opts.schedule, once) {
            (CcpSchedule::Once, Some(c)) => c,
            _ => {
                let c = opts.context_for(rest, rest, kb)?;
                once = Some(c);
                c
            }
        };
        gemm(-1.0, a21.rb(), a12.rb(), 1.0, a22, &ctx)?;
    }
    Ok(LuResult { pivots, info })
}

/// Splits a packed `L\U` into explicit unit-lower `L` and upper `U`.
pub fn split_lu(lu: MatRef<'_>) -> (Matrix, Matrix) {
    let s = lu.rows();
    let l = Matrix::from_fn(s, s, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => lu.get(i, j),
        std::cmp::Ordering::Equal => 1.0,
        std::cmp::Ordering::Less => 0.0,
    });
    let u = Matrix::from_fn(s, s, |i, j| if i <= j { lu.get(i, j) } else { 0.0 });
    (l, u)
}

/// Largest `|l_ij|` over the strict lower triangle of a packed `L\U`.
pub fn max_abs_multiplier(lu: MatRef<'_>) -> f64 {
    let s = lu.rows();
    let mut m = 0.0f64;
    for j in 0..s {
        for i in j + 1..s {
            m = m.max(lu.get(i, j).abs());
        }
    }
    m
}

/// `||P A - L U||_1 / (s * eps * ||A||_1)` by explicit reconstruction.
pub fn lu_residual(a: MatRef<'_>, lu: MatRef<'_>, pivots: &[usize]) -> f64 {
    let s = a.rows();
    if s == 0 {
        return 0.0;
    }
    let mut pa = a.to_matrix();
    apply_row_swaps(pa.as_mut(), pivots, 0).expect("pivots index rows of A");
    let mut worst = 0.0f64;
    for j in 0..s {
        let mut col = 0.0;
        for i in 0..s {
            let mut v = if i <= j { lu.get(i, j) } else { 0.0 };
            for p in 0..i.min(j + 1) {
                v += lu.get(i, p) * lu.get(p, j);
            }
            col += (pa[(i, j)] - v).abs();
        }
        worst = worst.max(col);
    }
    let norm = a.norm_one();
    if norm == 0.0 {
        return if worst == 0.0 { 0.0 } else { f64::INFINITY };
    }
    worst / (s as f64 * f64::EPSILON * norm)
}
