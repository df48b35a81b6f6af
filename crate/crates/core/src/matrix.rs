//! Column-major FP64 storage and strided windows over it.
//!
//! [`MatRef`] and [`MatMut`] carry a raw base pointer plus `(rows, cols, ld)`,
//! in the style of BLAS operand descriptors. A `MatMut` can be split into
//! disjoint windows (e.g. the `A21`, `A12`, `A22` blocks of an LU step) that
//! are then used concurrently, even though in column-major order their
//! address ranges interleave.

use std::fmt;
use std::marker::PhantomData;

/// Owned column-major matrix with leading dimension `max(rows, 1)`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from column-major data.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "column-major data has wrong length"
        );
        Self { data, rows, cols }
    }

    /// Builds a matrix from row slices; handy for writing small literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut m = Self::zeros(nrows, ncols);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), ncols, "ragged row {i}");
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.data[i + j * rows] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ld(&self) -> usize {
        self.rows.max(1)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn as_ref(&self) -> MatRef<'_> {
        MatRef::from_slice(&self.data, self.rows, self.cols, self.ld())
    }

    pub fn as_mut(&mut self) -> MatMut<'_> {
        let ld = self.ld();
        MatMut::from_slice(&mut self.data, self.rows, self.cols, ld)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> f64 {
        self.as_ref().norm_one()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i}, {j}) out of bounds"
        );
        &self.data[i + j * self.rows]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i}, {j}) out of bounds"
        );
        &mut self.data[i + j * self.rows]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, " ")?;
            for j in 0..self.cols {
                write!(f, " {:>10.4}", self[(i, j)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, ld: usize) {
    assert!(ld >= rows.max(1), "leading dimension {ld} < rows {rows}");
    if rows > 0 && cols > 0 {
        let need = (cols - 1) * ld + rows;
        assert!(
            need <= len,
            "view {rows}x{cols} (ld {ld}) needs {need} elements, storage has {len}"
        );
    }
}

/// Read-only column-major window.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    ptr: *const f64,
    rows: usize,
    cols: usize,
    ld: usize,
    _marker: PhantomData<&'a f64>,
}

// SAFETY: a MatRef is a shared borrow of f64 data.
unsafe impl Send for MatRef<'_> {}
unsafe impl Sync for MatRef<'_> {}

impl<'a> MatRef<'a> {
    pub fn from_slice(data: &'a [f64], rows: usize, cols: usize, ld: usize) -> Self {
        check_extent(data.len(), rows, cols, ld);
        Self {
            ptr: data.as_ptr(),
            rows,
            cols,
            ld,
            _marker: PhantomData,
        }
    }

    /// # Safety
    /// `ptr` must be valid for reads of every element of the window for `'a`.
    pub unsafe fn from_raw_parts(ptr: *const f64, rows: usize, cols: usize, ld: usize) -> Self {
        Self {
            ptr,
            rows,
            cols,
            ld,
            _marker: PhantomData,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ld(&self) -> usize {
        self.ld
    }

    pub fn as_ptr(&self) -> *const f64 {
        self.ptr
    }

    /// Pointer to element `(i, j)`; `i <= rows`, `j <= cols` allowed so that
    /// empty trailing windows can be formed.
    pub(crate) fn ptr_at(&self, i: usize, j: usize) -> *const f64 {
        self.ptr.wrapping_add(i + j * self.ld)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i}, {j}) out of bounds"
        );
        // SAFETY: bounds checked above; the view invariant covers the window.
        unsafe { *self.ptr.add(i + j * self.ld) }
    }

    /// # Safety
    /// `i < rows` and `j < cols`.
    #[inline(always)]
    pub unsafe fn get_unchecked(&self, i: usize, j: usize) -> f64 {
        *self.ptr.add(i + j * self.ld)
    }

    pub fn submatrix(&self, row: usize, col: usize, rows: usize, cols: usize) -> MatRef<'a> {
        assert!(
            row + rows <= self.rows && col + cols <= self.cols,
            "submatrix out of bounds"
        );
        MatRef {
            ptr: self.ptr_at(row, col),
            rows,
            cols,
            ld: self.ld,
            _marker: PhantomData,
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    pub fn norm_one(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Mutable column-major window.
pub struct MatMut<'a> {
    ptr: *mut f64,
    rows: usize,
    cols: usize,
    ld: usize,
    _marker: PhantomData<&'a mut f64>,
}

// SAFETY: a MatMut is an exclusive borrow of the elements in its window.
unsafe impl Send for MatMut<'_> {}

impl<'a> MatMut<'a> {
    pub fn from_slice(data: &'a mut [f64], rows: usize, cols: usize, ld: usize) -> Self {
        check_extent(data.len(), rows, cols, ld);
        Self {
            ptr: data.as_mut_ptr(),
            rows,
            cols,
            ld,
            _marker: PhantomData,
        }
    }

    /// # Safety
    /// `ptr` must be valid for reads and writes of every element of the window
    /// for `'a`, and no other live view may access those elements.
    pub unsafe fn from_raw_parts(ptr: *mut f64, rows: usize, cols: usize, ld: usize) -> Self {
        Self {
            ptr,
            rows,
            cols,
            ld,
            _marker: PhantomData,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ld(&self) -> usize {
        self.ld
    }

    pub fn as_mut_ptr(&mut self) -> *mut f64 {
        self.ptr
    }

    pub(crate) fn ptr_at(&self, i: usize, j: usize) -> *mut f64 {
        self.ptr.wrapping_add(i + j * self.ld)
    }

    /// Reborrows as a read-only view.
    pub fn rb(&self) -> MatRef<'_> {
        MatRef {
            ptr: self.ptr,
            rows: self.rows,
            cols: self.cols,
            ld: self.ld,
            _marker: PhantomData,
        }
    }

    /// Reborrows mutably for a shorter lifetime.
    pub fn rb_mut(&mut self) -> MatMut<'_> {
        MatMut {
            ptr: self.ptr,
            rows: self.rows,
            cols: self.cols,
            ld: self.ld,
            _marker: PhantomData,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rb().get(i, j)
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i}, {j}) out of bounds"
        );
        // SAFETY: bounds checked above.
        unsafe { *self.ptr.add(i + j * self.ld) = v }
    }

    /// # Safety
    /// `i < rows` and `j < cols`.
    #[inline(always)]
    pub unsafe fn get_mut_unchecked(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut *self.ptr.add(i + j * self.ld)
    }

    pub fn submatrix_mut(self, row: usize, col: usize, rows: usize, cols: usize) -> MatMut<'a> {
        assert!(
            row + rows <= self.rows && col + cols <= self.cols,
            "submatrix out of bounds"
        );
        MatMut {
            ptr: self.ptr_at(row, col),
            rows,
            cols,
            ld: self.ld,
            _marker: PhantomData,
        }
    }

    /// Splits into rows `[0, row)` and `[row, rows)`.
    pub fn split_at_row(self, row: usize) -> (MatMut<'a>, MatMut<'a>) {
        assert!(row <= self.rows);
        let top = MatMut {
            ptr: self.ptr,
            rows: row,
            cols: self.cols,
            ld: self.ld,
            _marker: PhantomData,
        };
        let bottom = MatMut {
            ptr: self.ptr_at(row, 0),
            rows: self.rows - row,
            cols: self.cols,
            ld: self.ld,
            _marker: PhantomData,
        };
        (top, bottom)
    }

    /// Splits into columns `[0, col)` and `[col, cols)`.
    pub fn split_at_col(self, col: usize) -> (MatMut<'a>, MatMut<'a>) {
        assert!(col <= self.cols);
        let left = MatMut {
            ptr: self.ptr,
            rows: self.rows,
            cols: col,
            ld: self.ld,
            _marker: PhantomData,
        };
        let right = MatMut {
            ptr: self.ptr_at(0, col),
            rows: self.rows,
            cols: self.cols - col,
            ld: self.ld,
            _marker: PhantomData,
        };
        (left, right)
    }

    /// Splits into the four blocks `(top-left, top-right, bottom-left, bottom-right)`.
    pub fn split_at(
        self,
        row: usize,
        col: usize,
    ) -> (MatMut<'a>, MatMut<'a>, MatMut<'a>, MatMut<'a>) {
        let (top, bottom) = self.split_at_row(row);
        let (tl, tr) = top.split_at_col(col);
        let (bl, br) = bottom.split_at_col(col);
        (tl, tr, bl, br)
    }

    pub fn swap_rows(&mut self, a: usize, b: usize) {
        assert!(
            a < self.rows && b < self.rows,
            "row swap ({a}, {b}) out of bounds"
        );
        if a == b {
            return;
        }
        for j in 0..self.cols {
            // SAFETY: both rows checked in bounds.
            unsafe {
                let col = self.ptr.add(j * self.ld);
                std::ptr::swap(col.add(a), col.add(b));
            }
        }
    }

    pub fn fill(&mut self, v: f64) {
        for j in 0..self.cols {
            for i in 0..self.rows {
                // SAFETY: loop bounds.
                unsafe { *self.get_mut_unchecked(i, j) = v }
            }
        }
    }

    pub fn copy_from(&mut self, src: MatRef<'_>) {
        assert_eq!(
            (self.rows, self.cols),
            (src.rows(), src.cols()),
            "shape mismatch"
        );
        for j in 0..self.cols {
            for i in 0..self.rows {
                // SAFETY: loop bounds, shapes equal.
                unsafe { *self.get_mut_unchecked(i, j) = src.get_unchecked(i, j) }
            }
        }
    }
}

/// Element-accurate overlap test between two column-major windows.
///
/// Windows sharing a leading dimension are compared as rectangles inside the
/// common parent, so side-by-side blocks of one matrix do not count as
/// aliased. Otherwise the test falls back to address-range intersection.
pub fn windows_overlap(
    a: (*const f64, usize, usize, usize),
    b: (*const f64, usize, usize, usize),
) -> bool {
    let (pa, ra, ca, lda) = a;
    let (pb, rb, cb, ldb) = b;
    if ra == 0 || ca == 0 || rb == 0 || cb == 0 {
        return false;
    }
    let span = |p: *const f64, r: usize, c: usize, ld: usize| {
        let start = p as usize;
        (
            start,
            start + ((c - 1) * ld + r) * std::mem::size_of::<f64>(),
        )
    };
    let (sa, ea) = span(pa, ra, ca, lda);
    let (sb, eb) = span(pb, rb, cb, ldb);
    if ea <= sb || eb <= sa {
        return false;
    }
    let elem = std::mem::size_of::<f64>();
    if lda != ldb || (sa.abs_diff(sb)) % elem != 0 {
        return true;
    }
    let ld = lda;
    // Place the later window relative to the earlier one.
    let (first, second, d) = if sa <= sb {
        ((ra, ca), (rb, cb), (sb - sa) / elem)
    } else {
        ((rb, cb), (ra, ca), (sa - sb) / elem)
    };
    let (dc, dr) = (d / ld, d % ld);
    // Second window occupies rows [dr, dr + r2) which may wrap past ld; a
    // wrapped window is not a valid sub-block, so treat it conservatively.
    if dr + second.0 > ld {
        return true;
    }
    let rows_meet = dr < first.0;
    let cols_meet = dc < first.1;
    rows_meet && cols_meet
}
