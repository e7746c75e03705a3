use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::numerics::Rng;
use crate::scalar::Scalar;

/// Dense row-major matrix. Rows are sequence positions throughout the crate.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let start = r * self.cols;
            writeln!(f, "  {:?}", &self.data[start..start + self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from `f64` rows; panics on ragged input. Intended for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend(r.iter().map(|&x| T::lit(x)));
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(v: &[T]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn scale_in_place(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "sub")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "hadamard")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Adds the `1 x cols` row `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &Self) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let c = self.cols;
        for row in self.data.chunks_mut(c.max(1)) {
            for (a, &b) in row.iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Column sums as a `1 x cols` row.
    pub fn col_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Contiguous block of rows `[start, start + len)`.
    pub fn row_block(&self, start: usize, len: usize) -> Self {
        Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Contiguous block of columns `[start, start + len)`.
    pub fn col_block(&self, start: usize, len: usize) -> Self {
        let mut out = Self::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    /// Sub-matrix of rows `[r0, r0 + nr)` and columns `[c0, c0 + nc)`.
    pub fn block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> Self {
        let mut out = Self::zeros(nr, nc);
        for r in 0..nr {
            out.row_mut(r)
                .copy_from_slice(&self.row(r0 + r)[c0..c0 + nc]);
        }
        out
    }

    /// Writes `src` into the block starting at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Self) {
        for r in 0..src.rows {
            let cols = src.cols;
            self.row_mut(r0 + r)[c0..c0 + cols].copy_from_slice(src.row(r));
        }
    }

    /// Adds `src` into the block starting at `(r0, c0)`.
    pub fn add_block(&mut self, r0: usize, c0: usize, src: &Self) {
        for r in 0..src.rows {
            let cols = src.cols;
            let dst = &mut self.row_mut(r0 + r)[c0..c0 + cols];
            for (d, &s) in dst.iter_mut().zip(src.row(r)) {
                *d += s;
            }
        }
    }

    /// Rows reordered so that output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(perm.len(), self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(p));
        }
        out
    }

    /// Vertical concatenation of matrices with equal widths.
    pub fn vstack(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    lhs: (rows, cols),
                    rhs: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Normal,
    Transposed,
}

/// `out = alpha * a * b^T` (or `* b` when `b_transposed` is false), where
/// `a` is a row-major `rows x k` slice and `out` a row-major `rows x n` one.
pub(crate) fn gemm_slice<T: Scalar>(alpha: T, a: &[T], k: usize, b: &Matrix<T>, b_transposed: bool, out: &mut [T]) {
    let (bk, n, rsb, csb) = if b_transposed {
        (b.cols, b.rows, 1, b.cols as isize)
    } else {
        (b.rows, b.cols, b.cols as isize, 1)
    };
    assert_eq!(bk, k, "inner dimensions differ");
    let rows = if k == 0 { out.len() / n.max(1) } else { a.len() / k };
    assert!(a.len() == rows * k && out.len() == rows * n, "slice sizes disagree");
    if rows == 0 || n == 0 {
        return;
    }
    // SAFETY: `a` holds `rows * k` elements (asserted), the strides describe
    // `b` exactly, and `out` holds `rows * n` elements of a distinct buffer.
    unsafe {
        T::gemm(
            rows,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gemm_into<T: Scalar>(a: &Matrix<T>, la: Layout, b: &Matrix<T>, lb: Layout, out: &mut Matrix<T>) {
    let (m, k, rsa, csa) = match la {
        Layout::Normal => (a.rows, a.cols, a.cols as isize, 1),
        Layout::Transposed => (a.cols, a.rows, 1, a.cols as isize),
    };
    let (n, rsb, csb) = match lb {
        Layout::Normal => (b.cols, b.cols as isize, 1),
        Layout::Transposed => (b.rows, 1, b.cols as isize),
    };
    debug_assert_eq!(out.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides above describe exactly the storage of `a`, `b`
    // and `out`, which are distinct allocations.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product `a * b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_into(a, Layout::Normal, b, Layout::Normal, &mut out);
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm_into(a, Layout::Normal, b, Layout::Transposed, &mut out);
    Ok(out)
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    gemm_into(a, Layout::Transposed, b, Layout::Normal, &mut out);
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn stable_softmax_rows<T: Scalar>(s: &Matrix<T>) -> Matrix<T> {
    let mut out = s.clone();
    stable_softmax_rows_in_place(&mut out);
    out
}

pub fn stable_softmax_rows_in_place<T: Scalar>(s: &mut Matrix<T>) {
    softmax_row_slices(&mut s.data, s.cols);
}

/// Row-wise softmax over a row-major buffer with `cols` columns.
pub(crate) fn softmax_row_slices<T: Scalar>(data: &mut [T], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        let inv = T::one() / total;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// I.i.d. normal entries with the given mean and standard deviation.
pub fn gaussian_fill<T: Scalar>(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
) -> Result<Matrix<T>> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(invalid(format!("gaussian_fill needs finite mean and std >= 0, got std={std}")));
    }
    Ok(Matrix::from_fn(rows, cols, |_, _| T::lit(mean + std * rng.normal())))
}

pub fn frobenius_norm<T: Scalar>(m: &Matrix<T>) -> T {
    m.data.iter().map(|&x| x * x).sum::<T>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    type M = Matrix<f64>;

    fn naive(a: &M, b: &M) -> M {
        let mut out = M::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> M {
        M::from_fn(r, c, |_, _| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn identity_and_zero_products() {
        let mut rng = Rng::seed(3);
        let m = random(&mut rng, 3, 3);
        assert_eq!(matmul(&M::identity(3), &m).unwrap(), m);
        let a = M::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&a, &M::zeros(2, 2)).unwrap(), M::zeros(2, 2));
    }

    #[test]
    fn two_by_two_product() {
        let a = M::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = M::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let expected = M::from_rows(&[&[19.0, 22.0], &[43.0, 50.0]]);
        assert_eq!(naive(&a, &b), expected);
        assert_eq!(matmul(&a, &b).unwrap(), expected);
    }

    #[test]
    fn shape_error_names_both_operands() {
        let err = matmul(&M::zeros(2, 3), &M::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Shape { lhs: (2, 3), rhs: (2, 3), .. }));
    }

    #[test]
    fn transposed_products_match_naive() {
        let mut rng = Rng::seed(11);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 4, 7);
        let c = random(&mut rng, 5, 3);
        let nt = matmul_nt(&a, &b).unwrap();
        assert!(nt.max_abs_diff(&naive(&a, &b.transpose())).unwrap() < 1e-14);
        let tn = matmul_tn(&a, &c).unwrap();
        assert!(tn.max_abs_diff(&naive(&a.transpose(), &c)).unwrap() < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let s = M::from_rows(&[&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]]);
        let a = stable_softmax_rows(&s);
        for j in 0..3 {
            assert!((a[(0, j)] - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp(k) / (e + e^2 + e^3), evaluated with mpmath at 30 digits.
        let expected = [
            0.0900305731703804579980,
            0.244728471054797652473,
            0.665240955774821889529,
        ];
        for (j, e) in expected.iter().enumerate() {
            assert!((a[(1, j)] - e).abs() < 1e-15);
        }
        let big = stable_softmax_rows(&M::from_rows(&[&[1000.0, 1000.0]]));
        assert_eq!(big.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn gaussian_fill_contract() {
        let mut rng = Rng::seed(5);
        let c: M = gaussian_fill(&mut rng, 3, 4, 2.5, 0.0).unwrap();
        assert!(c.data().iter().all(|&x| x == 2.5));
        assert!(gaussian_fill::<f64>(&mut rng, 1, 1, 0.0, -1.0).is_err());
        let a: M = gaussian_fill(&mut Rng::seed(9), 4, 4, 0.0, 1.0).unwrap();
        let b: M = gaussian_fill(&mut Rng::seed(9), 4, 4, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_fill_moments() {
        let n = 1_000_000;
        let g: M = gaussian_fill(&mut Rng::seed(2024), 1000, 1000, 0.0, 1.0).unwrap();
        let mean = g.sum() / n as f64;
        let var = g.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&M::zeros(3, 2)), 0.0);
        assert_eq!(frobenius_norm(&M::from_rows(&[&[3.0, 4.0]])), 5.0);
        assert!((frobenius_norm(&M::identity(7)) - 7f64.sqrt()).abs() < 1e-15);
    }

    fn dims() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
        (1usize..=8, 1usize..=8, 1usize..=8, 1usize..=8, any::<u64>())
    }

    proptest! {
        #[test]
        fn matmul_is_associative((m, k, n, p, seed) in dims()) {
            let mut rng = Rng::seed(seed);
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let c = random(&mut rng, n, p);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-9);
            prop_assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)).unwrap() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant_and_normalized((r, c, _x, _y, seed) in dims(), shift in -50.0f64..50.0) {
            let mut rng = Rng::seed(seed);
            let s = M::from_fn(r, c, |_, _| rng.uniform_in(-10.0, 10.0));
            let a = stable_softmax_rows(&s);
            let shifted = stable_softmax_rows(&s.map(|x| x + shift));
            prop_assert!(a.max_abs_diff(&shifted).unwrap() < 1e-12);
            for i in 0..r {
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(a.row(i).iter().all(|&x| x > 0.0 && x <= 1.0));
            }
        }

        #[test]
        fn frobenius_squared_is_trace((r, c, _x, _y, seed) in dims()) {
            let mut rng = Rng::seed(seed);
            let m = random(&mut rng, r, c);
            let tr = matmul(&m.transpose(), &m).unwrap().trace();
            prop_assert!((frobenius_norm(&m).powi(2) - tr).abs() < 1e-9);
        }
    }
}
