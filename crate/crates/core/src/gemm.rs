//! Five-loop blocked GEMM, `C := alpha * A * B + beta * C`.
//!
//! ```text
//! G1  for jc in 0..n step n_c
//! G2    for pc in 0..k step k_c        pack B(pc.., jc..) -> B_c
//! G3      for ic in 0..m step m_c      pack A(ic.., pc..) -> A_c
//! G4        for jr in 0..n_c step n_r
//! G5          for ir in 0..m_c step m_r
//!               micro-kernel: C(ic+ir, jc+jr) += A_c[ir] * B_c[jr]
//! ```
//!
//! `beta` is applied on the first `pc` block only. Loop G2 always runs
//! sequentially, since its iterations all write the same `C` block. Either G3
//! or G4 may be split across a team of workers. Both splits give bitwise
//! identical results, because each `C` element sees the same kernel calls on
//! the same packed data in the same order no matter who issues them.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Barrier;

use thiserror::Error;

use crate::ccp::CcpTriple;
use crate::matrix::{windows_overlap, MatMut, MatRef};
use crate::microkernel::{store_tile, MicroKernelEntry, MicroTile};
use crate::pack::{pack_a_panels, pack_b_panels, packed_len, AlignedBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParallelLoop {
    None,
    G3,
    G4,
}

impl fmt::Display for ParallelLoop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParallelLoop::None => "none",
            ParallelLoop::G3 => "g3",
            ParallelLoop::G4 => "g4",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct ParallelLoopParseError(String);

impl FromStr for ParallelLoop {
    type Err = ParallelLoopParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "g3" => Ok(Self::G3),
            "g4" => Ok(Self::G4),
            "g2" => Err(ParallelLoopParseError(
                "loop G2 cannot be parallelized: every k-block writes the same C block".into(),
            )),
            other => Err(ParallelLoopParseError(format!(
                "unknown parallel loop {other:?} (expected none|g3|g4)"
            ))),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GemmError {
    #[error("dimension mismatch: A is {a_rows}x{a_cols}, B is {b_rows}x{b_cols}, C is {c_rows}x{c_cols}")]
    DimensionMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
        c_rows: usize,
        c_cols: usize,
    },
    #[error("C overlaps operand {0}")]
    Aliasing(&'static str),
    #[error("{threads} threads requested with parallel loop 'none'")]
    ThreadsWithoutLoop { threads: usize },
    #[error("thread count must be at least 1")]
    ZeroThreads,
    #[error("CCPs must be positive, got {0}")]
    InvalidCcps(CcpTriple),
    #[error("alignment {0} is not a power of two of at least 8 bytes")]
    InvalidAlignment(usize),
}

/// Everything `gemm` needs besides the operands.
#[derive(Debug, Clone, Copy)]
pub struct GemmContext {
    pub kernel: MicroKernelEntry,
    pub ccps: CcpTriple,
    pub threads: usize,
    pub parallel_loop: ParallelLoop,
    /// Alignment of the packing buffers, normally the cache-line size.
    pub align_bytes: usize,
}

impl GemmContext {
    /// Single-threaded context.
    pub fn new(kernel: MicroKernelEntry, ccps: CcpTriple) -> Self {
        Self {
            kernel,
            ccps,
            threads: 1,
            parallel_loop: ParallelLoop::None,
            align_bytes: 64,
        }
    }

    pub fn with_threads(mut self, threads: usize, parallel_loop: ParallelLoop) -> Self {
        self.threads = threads;
        self.parallel_loop = parallel_loop;
        self
    }

    pub fn with_align(mut self, align_bytes: usize) -> Self {
        self.align_bytes = align_bytes;
        self
    }

    pub fn validate(&self) -> Result<(), GemmError> {
        if self.threads == 0 {
            return Err(GemmError::ZeroThreads);
        }
        if self.threads > 1 && self.parallel_loop == ParallelLoop::None {
            return Err(GemmError::ThreadsWithoutLoop {
                threads: self.threads,
            });
        }
        let c = self.ccps;
        if c.mc == 0 || c.nc == 0 || c.kc == 0 {
            return Err(GemmError::InvalidCcps(c));
        }
        if !self.align_bytes.is_power_of_two() || self.align_bytes < 8 {
            return Err(GemmError::InvalidAlignment(self.align_bytes));
        }
        Ok(())
    }
}

/// Element counts of one `A_c` and of the `B_c` buffer for an
/// `m x n x k` product: `(a_c, b_c)`.
pub fn workspace_len(ctx: &GemmContext, m: usize, n: usize, k: usize) -> (usize, usize) {
    let kc = ctx.ccps.kc.min(k);
    (
        packed_len(ctx.ccps.mc.min(m), kc, ctx.kernel.mr()),
        packed_len(ctx.ccps.nc.min(n), kc, ctx.kernel.nr()),
    )
}

fn check_dims(
    a: &MatRef<'_>,
    b: &MatRef<'_>,
    c_rows: usize,
    c_cols: usize,
) -> Result<(), GemmError> {
    if a.rows() != c_rows || b.cols() != c_cols || a.cols() != b.rows() {
        return Err(GemmError::DimensionMismatch {
            a_rows: a.rows(),
            a_cols: a.cols(),
            b_rows: b.rows(),
            b_cols: b.cols(),
            c_rows,
            c_cols,
        });
    }
    Ok(())
}

#[inline]
fn combine(alpha: f64, beta: f64, acc: f64, c: f64) -> f64 {
    if beta == 0.0 {
        alpha * acc
    } else {
        beta * c + alpha * acc
    }
}

/// Reference product in plain `i`-`j`-`p` order.
pub fn oracle_gemm(
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    mut c: MatMut<'_>,
) -> Result<(), GemmError> {
    check_dims(&a, &b, c.rows(), c.cols())?;
    for i in 0..c.rows() {
        for j in 0..c.cols() {
            let mut acc = 0.0;
            for p in 0..a.cols() {
                acc += a.get(i, p) * b.get(p, j);
            }
            let v = combine(alpha, beta, acc, c.get(i, j));
            c.set(i, j, v);
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct SharedMut(*mut f64);

// SAFETY: workers write disjoint regions through these pointers and
// synchronize on a barrier before reading what others wrote.
unsafe impl Send for SharedMut {}
unsafe impl Sync for SharedMut {}

/// `[start, end)` of worker `t`'s share when `len` items are split into `parts`
/// contiguous chunks.
fn chunk(len: usize, t: usize, parts: usize) -> Range<usize> {
    let (base, rem) = (len / parts, len % parts);
    let start = t * base + t.min(rem);
    start..start + base + usize::from(t < rem)
}

/// Read-only state common to every worker of one call.
struct Plan<'a> {
    alpha: f64,
    beta: f64,
    a: MatRef<'a>,
    b: MatRef<'a>,
    c: SharedMut,
    ldc: usize,
    m: usize,
    n: usize,
    k: usize,
    ctx: GemmContext,
    bc: SharedMut,
    /// Shared `A_c` for G4 (and sequential) runs.
    ac_shared: SharedMut,
}

impl Plan<'_> {
    /// Runs G4/G5 over `jr_panels` of the packed `B_c` and every micro-panel of
    /// the packed `A_c`, updating the `C` block at `(ic, jc)`.
    ///
    /// # Safety
    /// `ac`/`bc` hold packed `mb x kb` / `kb x nb` blocks, and no other worker
    /// writes the `C` columns covered by `jr_panels` of this block.
    #[allow(clippy::too_many_arguments)]
    unsafe fn macro_kernel(
        &self,
        ac: *const f64,
        ic: usize,
        mb: usize,
        jc: usize,
        nb: usize,
        kb: usize,
        beta: f64,
        jr_panels: Range<usize>,
        tile: &mut MicroTile,
    ) {
        let kern = &self.ctx.kernel;
        let (mr, nr) = (kern.mr(), kern.nr());
        let bc = self.bc.0 as *const f64;
        for jp in jr_panels {
            let j0 = jp * nr;
            let cols = (nb - j0).min(nr);
            let bp = bc.add(jp * nr * kb);
            for ip in 0..mb.div_ceil(mr) {
                let i0 = ip * mr;
                let rows = (mb - i0).min(mr);
                let ap = ac.add(ip * mr * kb);
                let cp = self.c.0.add((ic + i0) + (jc + j0) * self.ldc);
                if rows == mr && cols == nr {
                    kern.call(kb, self.alpha, ap, bp, beta, cp, self.ldc);
                } else {
                    kern.call(kb, 1.0, ap, bp, 0.0, tile.data.as_mut_ptr(), mr);
                    store_tile(&tile.data, rows, cols, mr, self.alpha, beta, cp, self.ldc);
                }
            }
        }
    }

    /// Body executed by worker `tid` of `team`. Every worker passes the same
    /// sequence of barriers.
    fn run(&self, tid: usize, team: usize, barrier: &Barrier, ac_private: Option<SharedMut>) {
        let ctx = &self.ctx;
        let (mr, nr) = (ctx.kernel.mr(), ctx.kernel.nr());
        let CcpTriple { mc, nc, kc, .. } = ctx.ccps;
        let mut tile = MicroTile::new(ctx.kernel.shape);

        for jc in (0..self.n).step_by(nc) {
            let nb = nc.min(self.n - jc);
            let b_panels = nb.div_ceil(nr);
            for pc in (0..self.k).step_by(kc) {
                let kb = kc.min(self.k - pc);
                let beta = if pc == 0 { self.beta } else { 1.0 };

                // SAFETY: each worker packs a disjoint panel range of B_c.
                unsafe {
                    pack_b_panels(
                        self.b.submatrix(pc, jc, kb, nb),
                        nr,
                        chunk(b_panels, tid, team),
                        self.bc.0,
                    );
                }
                barrier.wait();

                match ctx.parallel_loop {
                    ParallelLoop::None | ParallelLoop::G4 => {
                        let jr = chunk(b_panels, tid, team);
                        for ic in (0..self.m).step_by(mc) {
                            let mb = mc.min(self.m - ic);
                            let a_blk = self.a.submatrix(ic, pc, mb, kb);
                            // SAFETY: disjoint A_c panel ranges, then a barrier
                            // before any worker reads A_c; jr chunks are disjoint
                            // so no two workers write the same C element.
                            unsafe {
                                pack_a_panels(
                                    a_blk,
                                    mr,
                                    chunk(mb.div_ceil(mr), tid, team),
                                    self.ac_shared.0,
                                );
                            }
                            barrier.wait();
                            unsafe {
                                self.macro_kernel(
                                    self.ac_shared.0,
                                    ic,
                                    mb,
                                    jc,
                                    nb,
                                    kb,
                                    beta,
                                    jr.clone(),
                                    &mut tile,
                                );
                            }
                            // A_c is repacked on the next ic step.
                            barrier.wait();
                        }
                    }
                    ParallelLoop::G3 => {
                        let ac = ac_private.expect("G3 workers own an A_c").0;
                        for blk in chunk(self.m.div_ceil(mc), tid, team) {
                            let ic = blk * mc;
                            let mb = mc.min(self.m - ic);
                            // SAFETY: A_c is private to this worker; m_c blocks
                            // of C are disjoint between workers.
                            unsafe {
                                pack_a_panels(
                                    self.a.submatrix(ic, pc, mb, kb),
                                    mr,
                                    0..mb.div_ceil(mr),
                                    ac,
                                );
                                self.macro_kernel(
                                    ac,
                                    ic,
                                    mb,
                                    jc,
                                    nb,
                                    kb,
                                    beta,
                                    0..b_panels,
                                    &mut tile,
                                );
                            }
                        }
                    }
                }
                // B_c is repacked on the next pc step.
                barrier.wait();
            }
        }
    }
}

/// `C := alpha * A * B + beta * C` with the blocking, kernel and threading
/// described by `ctx`.
///
/// When `beta == 0`, `C` is overwritten without being read.
pub fn gemm(
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    mut c: MatMut<'_>,
    ctx: &GemmContext,
) -> Result<(), GemmError> {
    ctx.validate()?;
    let (m, n, k) = (c.rows(), c.cols(), a.cols());
    check_dims(&a, &b, m, n)?;
    if m == 0 || n == 0 {
        return Ok(());
    }
    let cw = (c.rb().as_ptr(), m, n, c.ld());
    if windows_overlap(cw, (a.as_ptr(), a.rows(), a.cols(), a.ld())) {
        return Err(GemmError::Aliasing("A"));
    }
    if windows_overlap(cw, (b.as_ptr(), b.rows(), b.cols(), b.ld())) {
        return Err(GemmError::Aliasing("B"));
    }
    if k == 0 {
        for j in 0..n {
            for i in 0..m {
                let v = combine(alpha, beta, 0.0, c.get(i, j));
                c.set(i, j, v);
            }
        }
        return Ok(());
    }

    let team = ctx.threads;
    let (a_len, b_len) = workspace_len(ctx, m, n, k);
    let mut bc = AlignedBuf::zeroed(b_len, ctx.align_bytes);
    let private_count = if ctx.parallel_loop == ParallelLoop::G3 {
        team
    } else {
        1
    };
    let mut acs: Vec<AlignedBuf> = (0..private_count)
        .map(|_| AlignedBuf::zeroed(a_len, ctx.align_bytes))
        .collect();
    let ac_ptrs: Vec<SharedMut> = acs.iter_mut().map(|b| SharedMut(b.as_mut_ptr())).collect();

    let plan = Plan {
        alpha,
        beta,
        a,
        b,
        c: SharedMut(c.as_mut_ptr()),
        ldc: c.ld(),
        m,
        n,
        k,
        ctx: *ctx,
        bc: SharedMut(bc.as_mut_ptr()),
        ac_shared: ac_ptrs[0],
    };
    let private = |t: usize| (ctx.parallel_loop == ParallelLoop::G3).then(|| ac_ptrs[t]);

    let barrier = Barrier::new(team);
    if team == 1 {
        plan.run(0, 1, &barrier, private(0));
    } else {
        std::thread::scope(|s| {
            for t in 1..team {
                let (plan, barrier, ac) = (&plan, &barrier, private(t));
                s.spawn(move || plan.run(t, team, barrier, ac));
            }
            plan.run(0, team, &barrier, private(0));
        });
    }
    drop(acs);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccp::CcpModel;
    use crate::hwdesc::MachineDesc;
    use crate::matrix::Matrix;
    use crate::microkernel::{all_kernels, generic_kernel_for, MicroKernelShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn ctx(mr: usize, nr: usize, mc: usize, nc: usize, kc: usize) -> GemmContext {
        GemmContext::new(
            generic_kernel_for(MicroKernelShape::new(mr, nr)),
            CcpTriple::fixed(mc, nc, kc),
        )
    }

    /// Elementwise check against the oracle with the bound
    /// `4 k u (|alpha| |A||B| + |beta C0|)`.
    fn assert_close(alpha: f64, a: &Matrix, b: &Matrix, beta: f64, c0: &Matrix, got: &Matrix) {
        let mut want = c0.clone();
        oracle_gemm(alpha, a.as_ref(), b.as_ref(), beta, want.as_mut()).unwrap();
        let k = a.cols();
        for i in 0..got.rows() {
            for j in 0..got.cols() {
                let scale: f64 = (0..k).map(|p| (a[(i, p)] * b[(p, j)]).abs()).sum::<f64>()
                    * alpha.abs()
                    + (beta * c0[(i, j)]).abs();
                let tol = 4.0 * k.max(1) as f64 * f64::EPSILON * scale;
                let d = (got[(i, j)] - want[(i, j)]).abs();
                assert!(
                    d <= tol,
                    "({i},{j}): {} vs {} (tol {tol})",
                    got[(i, j)],
                    want[(i, j)]
                );
            }
        }
    }

    #[test]
    fn oracle_textbook() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let mut c = Matrix::zeros(2, 2);
        oracle_gemm(1.0, a.as_ref(), b.as_ref(), 0.0, c.as_mut()).unwrap();
        assert_eq!(c, Matrix::from_rows(&[&[19.0, 22.0], &[43.0, 50.0]]));

        let mut s = Matrix::zeros(1, 1);
        let (x, y) = (Matrix::from_rows(&[&[3.0]]), Matrix::from_rows(&[&[-2.5]]));
        oracle_gemm(1.0, x.as_ref(), y.as_ref(), 0.0, s.as_mut()).unwrap();
        assert_eq!(s[(0, 0)], -7.5);
    }

    #[test]
    fn identity_left_operand_copies_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = rand_mat(&mut rng, 37, 23);
        let mut c = Matrix::from_fn(37, 23, |_, _| f64::NAN);
        gemm(
            1.0,
            Matrix::identity(37).as_ref(),
            b.as_ref(),
            0.0,
            c.as_mut(),
            &ctx(6, 8, 16, 16, 5),
        )
        .unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn edge_paths_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, c0) = (
            rand_mat(&mut rng, 5, 3),
            rand_mat(&mut rng, 3, 10),
            rand_mat(&mut rng, 5, 10),
        );
        for kernel in all_kernels() {
            let mut c = c0.clone();
            let cx = GemmContext::new(kernel, CcpTriple::fixed(4, 8, 2));
            gemm(0.75, a.as_ref(), b.as_ref(), -0.5, c.as_mut(), &cx).unwrap();
            assert_close(0.75, &a, &b, -0.5, &c0, &c);
        }
    }

    #[test]
    fn cancellation_with_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = (rand_mat(&mut rng, 40, 33), rand_mat(&mut rng, 33, 29));
        let mut c = Matrix::zeros(40, 29);
        oracle_gemm(1.0, a.as_ref(), b.as_ref(), 0.0, c.as_mut()).unwrap();
        let c0 = c.clone();
        gemm(
            -1.0,
            a.as_ref(),
            b.as_ref(),
            1.0,
            c.as_mut(),
            &ctx(8, 6, 16, 12, 7),
        )
        .unwrap();
        assert_close(-1.0, &a, &b, 1.0, &c0, &c);
        let scale = a.norm_one() * b.norm_one();
        assert!(c
            .data()
            .iter()
            .all(|v| v.abs() <= 4.0 * 33.0 * f64::EPSILON * scale));
    }

    #[test]
    fn refined_ccps_at_bench_shape() {
        let machine = MachineDesc::builtin("carmel").unwrap();
        let shape = MicroKernelShape::new(6, 8);
        let (m, n, k) = (300, 260, 96);
        let ccps = CcpModel::new(&machine.hierarchy)
            .refined(shape, m, n, k)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, b) = (rand_mat(&mut rng, m, k), rand_mat(&mut rng, k, n));
        let mut c = Matrix::zeros(m, n);
        gemm(
            1.0,
            a.as_ref(),
            b.as_ref(),
            0.0,
            c.as_mut(),
            &GemmContext::new(generic_kernel_for(shape), ccps),
        )
        .unwrap();
        assert_close(1.0, &a, &b, 0.0, &Matrix::zeros(m, n), &c);
    }

    #[test]
    fn beta_zero_ignores_nan_in_c() {
        let a = Matrix::from_fn(7, 4, |i, j| (i + j) as f64);
        let b = Matrix::from_fn(4, 9, |i, j| (i * j) as f64 - 1.0);
        let mut c = Matrix::from_fn(7, 9, |_, _| f64::NAN);
        gemm(
            1.0,
            a.as_ref(),
            b.as_ref(),
            0.0,
            c.as_mut(),
            &ctx(4, 4, 4, 4, 2),
        )
        .unwrap();
        assert!(c.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn k_zero_scales_c() {
        let a = Matrix::zeros(3, 0);
        let b = Matrix::zeros(0, 2);
        let mut c = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        gemm(
            1.0,
            a.as_ref(),
            b.as_ref(),
            2.0,
            c.as_mut(),
            &ctx(6, 8, 8, 8, 8),
        )
        .unwrap();
        assert_eq!(c, Matrix::from_fn(3, 2, |i, j| 2.0 * (i + j) as f64));
    }

    #[test]
    fn threaded_runs_are_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (m, n, k) = (97, 83, 61);
        let (a, b, c0) = (
            rand_mat(&mut rng, m, k),
            rand_mat(&mut rng, k, n),
            rand_mat(&mut rng, m, n),
        );
        let base = ctx(6, 8, 24, 40, 16);
        let mut want = c0.clone();
        gemm(1.5, a.as_ref(), b.as_ref(), 0.5, want.as_mut(), &base).unwrap();
        for t in [1, 2, 3, 4, 8] {
            for lp in [ParallelLoop::G3, ParallelLoop::G4] {
                let mut c = c0.clone();
                gemm(
                    1.5,
                    a.as_ref(),
                    b.as_ref(),
                    0.5,
                    c.as_mut(),
                    &base.with_threads(t, lp),
                )
                .unwrap();
                assert!(
                    c.data()
                        .iter()
                        .zip(want.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits()),
                    "T={t} {lp}"
                );
            }
        }
    }

    #[test]
    fn strided_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let big_a = rand_mat(&mut rng, 30, 30);
        let big_b = rand_mat(&mut rng, 30, 30);
        let a = big_a.as_ref().submatrix(3, 2, 11, 7);
        let b = big_b.as_ref().submatrix(1, 5, 7, 13);
        let mut big_c = Matrix::zeros(20, 20);
        let c = big_c.as_mut().submatrix_mut(4, 4, 11, 13);
        gemm(1.0, a, b, 0.0, c, &ctx(4, 12, 8, 8, 3)).unwrap();
        let got = big_c.as_ref().submatrix(4, 4, 11, 13).to_matrix();
        assert_close(
            1.0,
            &a.to_matrix(),
            &b.to_matrix(),
            0.0,
            &Matrix::zeros(11, 13),
            &got,
        );
        assert_eq!(big_c[(0, 0)], 0.0);
        assert_eq!(big_c[(15, 17)], 0.0);
    }

    #[test]
    fn errors() {
        let a = Matrix::zeros(4, 3);
        let b = Matrix::zeros(2, 5);
        let mut c = Matrix::zeros(4, 5);
        let cx = ctx(6, 8, 8, 8, 8);
        assert!(matches!(
            gemm(1.0, a.as_ref(), b.as_ref(), 0.0, c.as_mut(), &cx),
            Err(GemmError::DimensionMismatch { .. })
        ));
        let b = Matrix::zeros(3, 5);
        assert_eq!(
            gemm(
                1.0,
                a.as_ref(),
                b.as_ref(),
                0.0,
                c.as_mut(),
                &cx.with_threads(2, ParallelLoop::None)
            ),
            Err(GemmError::ThreadsWithoutLoop { threads: 2 })
        );
        assert_eq!(
            gemm(
                1.0,
                a.as_ref(),
                b.as_ref(),
                0.0,
                c.as_mut(),
                &cx.with_threads(0, ParallelLoop::G4)
            ),
            Err(GemmError::ZeroThreads)
        );

        let mut store = Matrix::zeros(8, 8);
        let p = store.data_mut().as_mut_ptr();
        // SAFETY: both views lie inside `store`; gemm must refuse them before writing.
        let (av, cv) = unsafe {
            (
                MatRef::from_raw_parts(p, 4, 4, 8),
                MatMut::from_raw_parts(p.add(2), 4, 4, 8),
            )
        };
        let bv = Matrix::zeros(4, 4);
        assert_eq!(
            gemm(1.0, av, bv.as_ref(), 0.0, cv, &cx),
            Err(GemmError::Aliasing("A"))
        );
    }

    #[test]
    fn parse_parallel_loop() {
        assert_eq!("G4".parse::<ParallelLoop>(), Ok(ParallelLoop::G4));
        assert_eq!("none".parse::<ParallelLoop>(), Ok(ParallelLoop::None));
        assert!("g2"
            .parse::<ParallelLoop>()
            .unwrap_err()
            .to_string()
            .contains("G2"));
        assert!("g1".parse::<ParallelLoop>().is_err());
    }

    #[test]
    fn workspace_respects_ccps() {
        let cx = ctx(6, 8, 120, 3072, 240);
        let (a, b) = workspace_len(&cx, 2000, 2000, 2000);
        assert_eq!(a, 120 * 240);
        assert_eq!(b, 2000 * 240);
        let (a, _) = workspace_len(&cx, 7, 5, 3);
        assert_eq!(a, 12 * 3);
    }
}
