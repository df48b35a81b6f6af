//! Micro-kernels: `k_c` rank-1 updates of an `m_r x n_r` micro-tile.
//!
//! # Kernel-authoring guide
//!
//! A kernel receives two packed micro-panels (see [`crate::pack`]):
//!
//! * `a`: `k_c` consecutive columns of `m_r` contiguous elements
//!   (element `(i, p)` at `a[p * m_r + i]`);
//! * `b`: `k_c` consecutive rows of `n_r` contiguous elements
//!   (element `(p, j)` at `b[p * n_r + j]`);
//!
//! and a column-major destination tile `c` with leading dimension `ldc`.
//! It must compute, for every `(i, j)`,
//!
//! ```text
//! acc = 0.0
//! for p in 0..k_c { acc = acc + a(i, p) * b(p, j) }   // separate mul and add, no FMA
//! c(i, j) = if beta == 0 { alpha * acc } else { beta * c(i, j) + alpha * acc }
//! ```
//!
//! The accumulation order over `p` is ascending and each step is one IEEE
//! multiply followed by one IEEE add. Every kernel of a given shape therefore
//! produces bitwise identical tiles, which is what lets the GEMM driver swap
//! kernels and thread counts without changing results. Fused multiply-add is
//! not allowed since it rounds once instead of twice.
//!
//! Kernels never see partial tiles: the driver zero-pads packed panels and
//! routes edge tiles through a scratch [`MicroTile`], so the `p` loop stays
//! branch-free.
//!
//! Register budget for a kernel vectorized along `n_r` with `lanes` FP64
//! elements per register: `m_r * ceil(n_r / lanes)` registers for `C_r`, plus
//! `ceil(m_r / lanes)` for the column of `A_r` and `ceil(n_r / lanes)` for the
//! row of `B_r`. Roles swap for kernels vectorized along `m_r`.
//!
//! Within the loop body, issue order matters on in-order-ish cores: loads of
//! the next `A_r` column should not be placed where they create
//! write-after-read stalls against the FMAs still consuming the previous
//! column. The intrinsic kernels below keep loads ahead of the update block.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::hwdesc::RegisterFile;
use crate::matrix::MatMut;

/// Tile geometry `m_r x n_r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MicroKernelShape {
    pub mr: usize,
    pub nr: usize,
}

impl MicroKernelShape {
    pub const fn new(mr: usize, nr: usize) -> Self {
        assert!(
            mr >= 1 && nr >= 1,
            "micro-kernel dimensions must be positive"
        );
        Self { mr, nr }
    }

    pub fn area(&self) -> usize {
        self.mr * self.nr
    }

    pub fn transposed(&self) -> Self {
        Self::new(self.nr, self.mr)
    }
}

impl fmt::Display for MicroKernelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.mr, self.nr)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid micro-kernel shape {0:?}, expected MxN with M, N >= 1")]
pub struct ShapeParseError(pub String);

impl FromStr for MicroKernelShape {
    type Err = ShapeParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ShapeParseError(s.to_string());
        let (m, n) = s.trim().split_once(['x', 'X', '×']).ok_or_else(err)?;
        let mr: usize = m.trim().parse().map_err(|_| err())?;
        let nr: usize = n.trim().parse().map_err(|_| err())?;
        if mr == 0 || nr == 0 {
            return Err(err());
        }
        Ok(Self { mr, nr })
    }
}

/// The shapes studied for the ARM and x86 targets; generic kernels for all of
/// them are always available.
pub const STANDARD_SHAPES: [MicroKernelShape; 6] = [
    MicroKernelShape::new(6, 8),
    MicroKernelShape::new(8, 6),
    MicroKernelShape::new(4, 10),
    MicroKernelShape::new(4, 12),
    MicroKernelShape::new(10, 4),
    MicroKernelShape::new(12, 4),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KernelKind {
    Generic,
    SimdSpecialized,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Generic => "generic",
            KernelKind::SimdSpecialized => "simd",
        })
    }
}

/// Which tile dimension is laid out across SIMD lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VectorDim {
    /// `m_r` (columns of `C_r` held in registers).
    Rows,
    /// `n_r` (rows of `C_r` held in registers).
    Cols,
}

/// Raw kernel entry point. See the module docs for the contract.
pub type KernelFn = unsafe fn(
    shape: MicroKernelShape,
    k: usize,
    alpha: f64,
    a: *const f64,
    b: *const f64,
    beta: f64,
    c: *mut f64,
    ldc: usize,
);

/// An executable kernel bound to its shape.
#[derive(Clone, Copy)]
pub struct MicroKernelEntry {
    pub shape: MicroKernelShape,
    pub kind: KernelKind,
    pub vectorized: VectorDim,
    /// The vectorized dimension must be a multiple of the target lane count.
    pub requires_lane_multiple: bool,
    pub name: &'static str,
    func: KernelFn,
}

impl fmt::Debug for MicroKernelEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MicroKernelEntry")
            .field("shape", &self.shape)
            .field("kind", &self.kind)
            .field("vectorized", &self.vectorized)
            .field("name", &self.name)
            .finish()
    }
}

impl PartialEq for MicroKernelEntry {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.kind == other.kind
            && self.vectorized == other.vectorized
            && self.name == other.name
    }
}

impl fmt::Display for MicroKernelEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.shape, self.kind)
    }
}

impl MicroKernelEntry {
    pub fn mr(&self) -> usize {
        self.shape.mr
    }

    pub fn nr(&self) -> usize {
        self.shape.nr
    }

    /// Registers needed on `regs` for this entry's vectorized dimension.
    pub fn budget(&self, regs: &RegisterFile) -> RegisterBudget {
        register_budget_along(self.shape, self.vectorized, regs)
    }

    /// # Safety
    /// `a` must be readable for `k * m_r` elements, `b` for `k * n_r`, and
    /// `c` must address a writable `m_r x n_r` column-major tile with
    /// leading dimension `ldc >= m_r` that no other thread touches.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub unsafe fn call(
        &self,
        k: usize,
        alpha: f64,
        a: *const f64,
        b: *const f64,
        beta: f64,
        c: *mut f64,
        ldc: usize,
    ) {
        (self.func)(self.shape, k, alpha, a, b, beta, c, ldc)
    }
}

/// Scratch `m_r x n_r` tile used for partial edge tiles.
#[derive(Debug, Clone)]
pub struct MicroTile {
    pub shape: MicroKernelShape,
    pub data: Vec<f64>,
}

impl MicroTile {
    pub fn new(shape: MicroKernelShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.area()],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + j * self.shape.mr]
    }
}

#[inline(always)]
fn combine(alpha: f64, beta: f64, acc: f64, c: f64) -> f64 {
    if beta == 0.0 {
        alpha * acc
    } else {
        beta * c + alpha * acc
    }
}

/// Writes `alpha * acc + beta * c` into a column-major tile; shared by every
/// kernel so that the final combine rounds identically everywhere.
///
/// # Safety
/// `c` must address `rows x cols` elements with leading dimension `ldc`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
pub(crate) unsafe fn store_tile(
    acc: &[f64],
    rows: usize,
    cols: usize,
    acc_ld: usize,
    alpha: f64,
    beta: f64,
    c: *mut f64,
    ldc: usize,
) {
    for j in 0..cols {
        for i in 0..rows {
            let dst = c.add(i + j * ldc);
            let prev = if beta == 0.0 { 0.0 } else { *dst };
            *dst = combine(alpha, beta, acc[i + j * acc_ld], prev);
        }
    }
}

#[allow(clippy::too_many_arguments)]
unsafe fn generic_fixed<const MR: usize, const NR: usize>(
    _shape: MicroKernelShape,
    k: usize,
    alpha: f64,
    a: *const f64,
    b: *const f64,
    beta: f64,
    c: *mut f64,
    ldc: usize,
) {
    let mut acc = [[0.0f64; MR]; NR];
    let mut ap = a;
    let mut bp = b;
    for _ in 0..k {
        for (j, col) in acc.iter_mut().enumerate() {
            let bj = *bp.add(j);
            for (i, x) in col.iter_mut().enumerate() {
                *x += *ap.add(i) * bj;
            }
        }
        ap = ap.add(MR);
        bp = bp.add(NR);
    }
    let flat = std::slice::from_raw_parts(acc.as_ptr() as *const f64, MR * NR);
    store_tile(flat, MR, NR, MR, alpha, beta, c, ldc);
}

#[allow(clippy::too_many_arguments)]
unsafe fn generic_dynamic(
    shape: MicroKernelShape,
    k: usize,
    alpha: f64,
    a: *const f64,
    b: *const f64,
    beta: f64,
    c: *mut f64,
    ldc: usize,
) {
    let (mr, nr) = (shape.mr, shape.nr);
    let mut acc = vec![0.0f64; mr * nr];
    for p in 0..k {
        let ap = a.add(p * mr);
        let bp = b.add(p * nr);
        for j in 0..nr {
            let bj = *bp.add(j);
            let col = &mut acc[j * mr..(j + 1) * mr];
            for (i, x) in col.iter_mut().enumerate() {
                *x += *ap.add(i) * bj;
            }
        }
    }
    store_tile(&acc, mr, nr, mr, alpha, beta, c, ldc);
}

#[cfg(target_arch = "x86_64")]
mod sse2 {
    //! 128-bit kernels. SSE2 is part of the x86_64 baseline, so no runtime
    //! detection is needed.

    use std::arch::x86_64::*;

    use super::MicroKernelShape;

    #[inline(always)]
    unsafe fn combine_pd(alpha: __m128d, beta: f64, acc: __m128d, c: *mut f64) {
        let scaled = _mm_mul_pd(alpha, acc);
        let out = if beta == 0.0 {
            scaled
        } else {
            _mm_add_pd(_mm_mul_pd(_mm_set1_pd(beta), _mm_loadu_pd(c)), scaled)
        };
        _mm_storeu_pd(c, out);
    }

    /// `MR x (2 * NV)` kernel, vectorized along `n_r`.
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn cols<const MR: usize, const NV: usize>(
        _shape: MicroKernelShape,
        k: usize,
        alpha: f64,
        a: *const f64,
        b: *const f64,
        beta: f64,
        c: *mut f64,
        ldc: usize,
    ) {
        let nr = 2 * NV;
        let mut acc = [[_mm_setzero_pd(); NV]; MR];
        let mut ap = a;
        let mut bp = b;
        for _ in 0..k {
            let mut bv = [_mm_setzero_pd(); NV];
            for (v, slot) in bv.iter_mut().enumerate() {
                *slot = _mm_loadu_pd(bp.add(2 * v));
            }
            for (i, row) in acc.iter_mut().enumerate() {
                let ai = _mm_set1_pd(*ap.add(i));
                for (v, x) in row.iter_mut().enumerate() {
                    *x = _mm_add_pd(*x, _mm_mul_pd(ai, bv[v]));
                }
            }
            ap = ap.add(MR);
            bp = bp.add(nr);
        }
        // Row-vectors of C_r are strided in a column-major tile: go through
        // a scalar staging area and the shared combine.
        let mut flat = [0.0f64; 64];
        let flat = &mut flat[..MR * nr];
        for (i, row) in acc.iter().enumerate() {
            for (v, x) in row.iter().enumerate() {
                let mut pair = [0.0f64; 2];
                _mm_storeu_pd(pair.as_mut_ptr(), *x);
                flat[i + 2 * v * MR] = pair[0];
                flat[i + (2 * v + 1) * MR] = pair[1];
            }
        }
        super::store_tile(flat, MR, nr, MR, alpha, beta, c, ldc);
    }

    /// `(2 * MV) x NR` kernel, vectorized along `m_r`.
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn rows<const MV: usize, const NR: usize>(
        _shape: MicroKernelShape,
        k: usize,
        alpha: f64,
        a: *const f64,
        b: *const f64,
        beta: f64,
        c: *mut f64,
        ldc: usize,
    ) {
        let mr = 2 * MV;
        let mut acc = [[_mm_setzero_pd(); MV]; NR];
        let mut ap = a;
        let mut bp = b;
        for _ in 0..k {
            let mut av = [_mm_setzero_pd(); MV];
            for (v, slot) in av.iter_mut().enumerate() {
                *slot = _mm_loadu_pd(ap.add(2 * v));
            }
            for (j, col) in acc.iter_mut().enumerate() {
                let bj = _mm_set1_pd(*bp.add(j));
                for (v, x) in col.iter_mut().enumerate() {
                    *x = _mm_add_pd(*x, _mm_mul_pd(av[v], bj));
                }
            }
            ap = ap.add(mr);
            bp = bp.add(NR);
        }
        let alpha_v = _mm_set1_pd(alpha);
        for (j, col) in acc.iter().enumerate() {
            for (v, x) in col.iter().enumerate() {
                combine_pd(alpha_v, beta, *x, c.add(2 * v + j * ldc));
            }
        }
    }
}

/// Portable kernel for `shape`: monomorphized for the standard shapes, a
/// runtime-sized loop nest otherwise. Both accumulate in ascending `p`.
pub fn generic_kernel_for(shape: MicroKernelShape) -> MicroKernelEntry {
    let (func, name): (KernelFn, &'static str) = match (shape.mr, shape.nr) {
        (6, 8) => (generic_fixed::<6, 8>, "generic_6x8"),
        (8, 6) => (generic_fixed::<8, 6>, "generic_8x6"),
        (4, 10) => (generic_fixed::<4, 10>, "generic_4x10"),
        (4, 12) => (generic_fixed::<4, 12>, "generic_4x12"),
        (10, 4) => (generic_fixed::<10, 4>, "generic_10x4"),
        (12, 4) => (generic_fixed::<12, 4>, "generic_12x4"),
        _ => (generic_dynamic, "generic_dyn"),
    };
    MicroKernelEntry {
        shape,
        kind: KernelKind::Generic,
        vectorized: if shape.mr > shape.nr {
            VectorDim::Rows
        } else {
            VectorDim::Cols
        },
        requires_lane_multiple: false,
        name,
        func,
    }
}

/// Intrinsic kernel for `shape` on this build target, if one exists.
pub fn simd_kernel_for(shape: MicroKernelShape) -> Option<MicroKernelEntry> {
    #[cfg(target_arch = "x86_64")]
    {
        let (func, vectorized, name): (KernelFn, VectorDim, &'static str) =
            match (shape.mr, shape.nr) {
                (6, 8) => (sse2::cols::<6, 4>, VectorDim::Cols, "sse2_6x8"),
                (4, 10) => (sse2::cols::<4, 5>, VectorDim::Cols, "sse2_4x10"),
                (4, 12) => (sse2::cols::<4, 6>, VectorDim::Cols, "sse2_4x12"),
                (8, 6) => (sse2::rows::<4, 6>, VectorDim::Rows, "sse2_8x6"),
                (10, 4) => (sse2::rows::<5, 4>, VectorDim::Rows, "sse2_10x4"),
                (12, 4) => (sse2::rows::<6, 4>, VectorDim::Rows, "sse2_12x4"),
                _ => return None,
            };
        Some(MicroKernelEntry {
            shape,
            kind: KernelKind::SimdSpecialized,
            vectorized,
            requires_lane_multiple: true,
            name,
            func,
        })
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = shape;
        None
    }
}

/// Every kernel this build can execute: generics for the standard shapes,
/// the intrinsic kernels available on the target, and one runtime-sized
/// generic.
pub fn all_kernels() -> Vec<MicroKernelEntry> {
    let mut out: Vec<MicroKernelEntry> = STANDARD_SHAPES
        .iter()
        .map(|&s| generic_kernel_for(s))
        .collect();
    out.extend(STANDARD_SHAPES.iter().filter_map(|&s| simd_kernel_for(s)));
    out.push(generic_kernel_for(MicroKernelShape::new(3, 5)));
    out
}

/// Safe wrapper around a kernel call on a full tile.
///
/// `C := (beta_first ? 0 : C) + alpha * A_r * B_r`.
pub fn run_microkernel(
    entry: &MicroKernelEntry,
    a_panel: &[f64],
    b_panel: &[f64],
    mut c_tile: MatMut<'_>,
    k_c: usize,
    alpha: f64,
    beta_first: bool,
) {
    let MicroKernelShape { mr, nr } = entry.shape;
    assert!(a_panel.len() >= mr * k_c, "A micro-panel too short");
    assert!(b_panel.len() >= nr * k_c, "B micro-panel too short");
    assert_eq!(
        (c_tile.rows(), c_tile.cols()),
        (mr, nr),
        "C tile does not match kernel shape"
    );
    let beta = if beta_first { 0.0 } else { 1.0 };
    let ldc = c_tile.ld();
    // SAFETY: lengths and tile shape checked above; c_tile is exclusive.
    unsafe {
        entry.call(
            k_c,
            alpha,
            a_panel.as_ptr(),
            b_panel.as_ptr(),
            beta,
            c_tile.as_mut_ptr(),
            ldc,
        )
    }
}

/// Outcome of the register-budget check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegisterBudget {
    pub fits: bool,
    pub registers_needed: usize,
}

/// Budget with `n_r` as the vectorized dimension.
pub fn register_budget(shape: MicroKernelShape, regs: &RegisterFile) -> RegisterBudget {
    register_budget_along(shape, VectorDim::Cols, regs)
}

pub fn register_budget_along(
    shape: MicroKernelShape,
    dim: VectorDim,
    regs: &RegisterFile,
) -> RegisterBudget {
    let lanes = regs.lanes();
    let (vec_dim, bcast_dim) = match dim {
        VectorDim::Cols => (shape.nr, shape.mr),
        VectorDim::Rows => (shape.mr, shape.nr),
    };
    let per_line = vec_dim.div_ceil(lanes);
    let needed = bcast_dim * per_line + bcast_dim.div_ceil(lanes) + per_line;
    RegisterBudget {
        fits: needed <= regs.register_count,
        registers_needed: needed,
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("{kind} kernel {shape} already registered for machine {machine}")]
    Duplicate {
        machine: String,
        shape: MicroKernelShape,
        kind: KernelKind,
    },
    #[error("kernel {shape} needs {needed} vector registers, machine {machine} has {available}")]
    OverBudget {
        machine: String,
        shape: MicroKernelShape,
        needed: usize,
        available: usize,
    },
    #[error("kernel {shape} vectorized dimension is not a multiple of {lanes} lanes on machine {machine}")]
    LaneMismatch {
        machine: String,
        shape: MicroKernelShape,
        lanes: usize,
    },
}

/// Machine name to ranked kernel candidates. Filled at startup, then read-only.
#[derive(Debug, Default, Clone)]
pub struct KernelRegistry {
    entries: Vec<(String, MicroKernelEntry)>,
}

impl KernelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry pre-filled with `machine`'s preferred shapes, using the
    /// intrinsic kernel when it fits the register file and a generic one
    /// otherwise.
    pub fn for_machine(machine: &crate::hwdesc::MachineDesc) -> Self {
        let mut reg = Self::new();
        let name = &machine.hierarchy.name;
        let regs = &machine.hierarchy.registers;
        for &shape in &machine.kernel_preference {
            let simd_ok = simd_kernel_for(shape).and_then(|e| reg.register(e, name, regs).ok());
            if simd_ok.is_none() {
                // Generic registration only fails on duplicates, which we skip.
                let _ = reg.register(generic_kernel_for(shape), name, regs);
            }
        }
        reg
    }

    pub fn register(
        &mut self,
        entry: MicroKernelEntry,
        machine: &str,
        regs: &RegisterFile,
    ) -> Result<(), RegistryError> {
        if self
            .entries
            .iter()
            .any(|(m, e)| m == machine && e.shape == entry.shape && e.kind == entry.kind)
        {
            return Err(RegistryError::Duplicate {
                machine: machine.to_string(),
                shape: entry.shape,
                kind: entry.kind,
            });
        }
        if entry.kind == KernelKind::SimdSpecialized {
            let budget = entry.budget(regs);
            if !budget.fits {
                return Err(RegistryError::OverBudget {
                    machine: machine.to_string(),
                    shape: entry.shape,
                    needed: budget.registers_needed,
                    available: regs.register_count,
                });
            }
        }
        if entry.requires_lane_multiple {
            let lanes = regs.lanes();
            let dim = match entry.vectorized {
                VectorDim::Rows => entry.shape.mr,
                VectorDim::Cols => entry.shape.nr,
            };
            if dim % lanes != 0 {
                return Err(RegistryError::LaneMismatch {
                    machine: machine.to_string(),
                    shape: entry.shape,
                    lanes,
                });
            }
        }
        self.entries.push((machine.to_string(), entry));
        Ok(())
    }

    /// Registered entries for `machine` in registration order, followed by
    /// the generic fallbacks. Never empty.
    pub fn lookup(&self, machine: &str) -> Vec<MicroKernelEntry> {
        let mut out: Vec<MicroKernelEntry> = self
            .entries
            .iter()
            .filter(|(m, _)| m == machine)
            .map(|(_, e)| *e)
            .collect();
        let present: HashSet<(MicroKernelShape, KernelKind)> =
            out.iter().map(|e| (e.shape, e.kind)).collect();
        out.extend(
            STANDARD_SHAPES
                .iter()
                .filter(|s| !present.contains(&(**s, KernelKind::Generic)))
                .map(|&s| generic_kernel_for(s)),
        );
        out
    }
}
