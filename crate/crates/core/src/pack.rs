//! Packing of operand blocks into the contiguous buffers `A_c` and `B_c`.
//!
//! `A_c` (an `m_c x k_c` block) is stored as `ceil(m_c / m_r)` micro-panels.
//! Each micro-panel holds `k_c` consecutive columns of `m_r` contiguous
//! elements. `B_c` (a `k_c x n_c` block) is the mirror image: `ceil(n_c / n_r)`
//! micro-panels of `k_c` consecutive rows of `n_r` contiguous elements.
//! Rows (columns) past the logical edge of the last micro-panel are filled
//! with `+0.0`, so a full-size kernel call on an edge tile adds exact zeros.

use std::ops::Range;

use crate::matrix::{MatRef, Matrix};

/// Value written into padding slots.
#[cfg(not(feature = "inject-pack-fault"))]
pub const PAD_VALUE: f64 = 0.0;
/// Deliberately wrong padding, used to check that the verification harness
/// notices a broken packer.
#[cfg(feature = "inject-pack-fault")]
pub const PAD_VALUE: f64 = 1.0;

/// Elements needed to pack `rows x cols` into panels `panel` tall (A form).
/// The B form uses the same count with the roles of the dimensions swapped.
pub fn packed_len(panel_dim: usize, other_dim: usize, panel: usize) -> usize {
    panel_dim.div_ceil(panel) * panel * other_dim
}

/// A heap buffer of `f64` whose first element sits on an `align`-byte boundary.
pub struct AlignedBuf {
    raw: Vec<f64>,
    offset: usize,
    len: usize,
}

impl AlignedBuf {
    /// Zero-filled buffer of `len` elements. `align` must be a power of two
    /// and at least 8.
    pub fn zeroed(len: usize, align: usize) -> Self {
        assert!(align.is_power_of_two() && align >= std::mem::align_of::<f64>());
        let slack = align / std::mem::size_of::<f64>();
        let raw = vec![0.0f64; len + slack];
        let addr = raw.as_ptr() as usize;
        let offset = (addr.next_multiple_of(align) - addr) / std::mem::size_of::<f64>();
        Self { raw, offset, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.raw[self.offset..self.offset + self.len]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.raw[self.offset..self.offset + self.len]
    }

    pub fn as_mut_ptr(&mut self) -> *mut f64 {
        self.as_mut_slice().as_mut_ptr()
    }
}

impl std::fmt::Debug for AlignedBuf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AlignedBuf")
            .field("len", &self.len)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PackForm {
    /// `m_r`-tall micro-panels of `A_c`.
    A,
    /// `n_r`-wide micro-panels of `B_c`.
    B,
}

/// A packed operand block together with its logical shape.
#[derive(Debug)]
pub struct PackedBuffer {
    pub form: PackForm,
    /// `m_r` for the A form, `n_r` for the B form.
    pub panel: usize,
    pub rows: usize,
    pub cols: usize,
    storage: AlignedBuf,
}

impl PackedBuffer {
    pub fn data(&self) -> &[f64] {
        self.storage.as_slice()
    }

    pub fn padded_rows(&self) -> usize {
        match self.form {
            PackForm::A => self.rows.div_ceil(self.panel) * self.panel,
            PackForm::B => self.rows,
        }
    }

    pub fn padded_cols(&self) -> usize {
        match self.form {
            PackForm::A => self.cols,
            PackForm::B => self.cols.div_ceil(self.panel) * self.panel,
        }
    }

    pub fn panel_count(&self) -> usize {
        match self.form {
            PackForm::A => self.rows.div_ceil(self.panel),
            PackForm::B => self.cols.div_ceil(self.panel),
        }
    }

    /// Micro-panel `p` as a slice.
    pub fn micro_panel(&self, p: usize) -> &[f64] {
        let len = match self.form {
            PackForm::A => self.panel * self.cols,
            PackForm::B => self.panel * self.rows,
        };
        &self.data()[p * len..(p + 1) * len]
    }

    /// Capacity in bytes.
    pub fn bytes(&self) -> usize {
        self.storage.len() * std::mem::size_of::<f64>()
    }

    /// Whether every padding slot holds `+0.0`.
    pub fn padding_is_positive_zero(&self) -> bool {
        let d = self.data();
        match self.form {
            PackForm::A => (0..self.panel_count()).all(|p| {
                (0..self.cols).all(|c| {
                    let base = p * self.panel * self.cols + c * self.panel;
                    (self.rows.saturating_sub(p * self.panel).min(self.panel)..self.panel)
                        .all(|i| d[base + i].to_bits() == 0)
                })
            }),
            PackForm::B => (0..self.panel_count()).all(|p| {
                (0..self.rows).all(|r| {
                    let base = p * self.panel * self.rows + r * self.panel;
                    (self.cols.saturating_sub(p * self.panel).min(self.panel)..self.panel)
                        .all(|j| d[base + j].to_bits() == 0)
                })
            }),
        }
    }
}

/// Packs micro-panels `panels` of `src` (an `m_c x k_c` block) in A form.
///
/// # Safety
/// `dst` must be writable for `packed_len(src.rows(), src.cols(), mr)`
/// elements, and no other thread may touch the written panel range.
pub(crate) unsafe fn pack_a_panels(
    src: MatRef<'_>,
    mr: usize,
    panels: Range<usize>,
    dst: *mut f64,
) {
    let (m, k) = (src.rows(), src.cols());
    for p in panels {
        let i0 = p * mr;
        let live = (m - i0).min(mr);
        let mut out = dst.add(p * mr * k);
        for col in 0..k {
            let s = src.ptr_at(i0, col);
            for i in 0..live {
                *out.add(i) = *s.add(i);
            }
            for i in live..mr {
                *out.add(i) = PAD_VALUE;
            }
            out = out.add(mr);
        }
    }
}

/// Packs micro-panels `panels` of `src` (a `k_c x n_c` block) in B form.
///
/// # Safety
/// As for [`pack_a_panels`], with `packed_len(src.cols(), src.rows(), nr)`.
pub(crate) unsafe fn pack_b_panels(
    src: MatRef<'_>,
    nr: usize,
    panels: Range<usize>,
    dst: *mut f64,
) {
    let (k, n) = (src.rows(), src.cols());
    let ld = src.ld();
    for p in panels {
        let j0 = p * nr;
        let live = (n - j0).min(nr);
        let mut out = dst.add(p * nr * k);
        let base = src.ptr_at(0, j0);
        for row in 0..k {
            for j in 0..live {
                *out.add(j) = *base.add(row + j * ld);
            }
            for j in live..nr {
                *out.add(j) = PAD_VALUE;
            }
            out = out.add(nr);
        }
    }
}

/// Packs all of `src` in A form into `dst`.
pub fn pack_a_into(src: MatRef<'_>, mr: usize, dst: &mut [f64]) {
    assert!(mr >= 1);
    assert!(
        dst.len() >= packed_len(src.rows(), src.cols(), mr),
        "A_c buffer too small"
    );
    // SAFETY: length checked; `dst` is exclusively borrowed.
    unsafe { pack_a_panels(src, mr, 0..src.rows().div_ceil(mr), dst.as_mut_ptr()) }
}

/// Packs all of `src` in B form into `dst`.
pub fn pack_b_into(src: MatRef<'_>, nr: usize, dst: &mut [f64]) {
    assert!(nr >= 1);
    assert!(
        dst.len() >= packed_len(src.cols(), src.rows(), nr),
        "B_c buffer too small"
    );
    // SAFETY: as above.
    unsafe { pack_b_panels(src, nr, 0..src.cols().div_ceil(nr), dst.as_mut_ptr()) }
}

const DEFAULT_ALIGN: usize = 64;

pub fn pack_a(src: MatRef<'_>, mr: usize) -> PackedBuffer {
    let mut storage = AlignedBuf::zeroed(packed_len(src.rows(), src.cols(), mr), DEFAULT_ALIGN);
    pack_a_into(src, mr, storage.as_mut_slice());
    PackedBuffer {
        form: PackForm::A,
        panel: mr,
        rows: src.rows(),
        cols: src.cols(),
        storage,
    }
}

pub fn pack_b(src: MatRef<'_>, nr: usize) -> PackedBuffer {
    let mut storage = AlignedBuf::zeroed(packed_len(src.cols(), src.rows(), nr), DEFAULT_ALIGN);
    pack_b_into(src, nr, storage.as_mut_slice());
    PackedBuffer {
        form: PackForm::B,
        panel: nr,
        rows: src.rows(),
        cols: src.cols(),
        storage,
    }
}

pub fn unpack_a(buf: &PackedBuffer) -> Matrix {
    assert_eq!(buf.form, PackForm::A);
    let (mr, k, d) = (buf.panel, buf.cols, buf.data());
    Matrix::from_fn(buf.rows, buf.cols, |i, j| {
        d[(i / mr) * mr * k + j * mr + i % mr]
    })
}

pub fn unpack_b(buf: &PackedBuffer) -> Matrix {
    assert_eq!(buf.form, PackForm::B);
    let (nr, k, d) = (buf.panel, buf.rows, buf.data());
    Matrix::from_fn(buf.rows, buf.cols, |i, j| {
        d[(j / nr) * nr * k + i * nr + j % nr]
    })
}

/// Dispatches on the buffer's form.
pub fn unpack(buf: &PackedBuffer) -> Matrix {
    match buf.form {
        PackForm::A => unpack_a(buf),
        PackForm::B => unpack_b(buf),
    }
}
