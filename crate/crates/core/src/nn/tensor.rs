use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "buffer of length {} cannot hold a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row_vector(vec![value])
    }

    /// Builds a tensor from nested rows; every row must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Same buffer viewed with a different shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::dim(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim(format!("matmul {:?} x {:?}", self.shape(), other.shape())));
        }
        Ok(matmul_nn(self, other))
    }

    /// Adds `other` in place; shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::dim(format!("add {:?} and {:?}", self.shape(), other.shape())));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Column sums as a `1 x cols` tensor.
    pub fn col_sums(&self) -> Self {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Self::row_vector(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `a · b` without shape checks (callers validate).
pub(crate) fn matmul_nn(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    gemm(n, k, m, &a.data, (k, 1), &b.data, (m, 1))
}

/// `a · bᵀ`.
pub(crate) fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    let (n, k, m) = (a.rows, a.cols, b.rows);
    gemm(n, k, m, &a.data, (k, 1), &b.data, (1, k))
}

/// `aᵀ · b`.
pub(crate) fn matmul_tn(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    let (k, n, m) = (a.rows, a.cols, b.cols);
    gemm(n, k, m, &a.data, (1, n), &b.data, (m, 1))
}

/// `n x m` product of an `n x k` and a `k x m` operand given by
/// (row stride, column stride) views over row-major buffers.
fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Tensor2D {
    let mut out = vec![0.0; n * m];
    if n > 0 && m > 0 && k > 0 {
        assert!(a.len() >= n * k && b.len() >= k * m, "gemm operands undersized");
        // SAFETY: the strides address exactly the n*k, k*m and n*m elements
        // of buffers checked above to be at least that long.
        unsafe {
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                m as isize,
                1,
            );
        }
    }
    Tensor2D {
        rows: n,
        cols: m,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor2D::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor2D::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.0, -2.0]]).unwrap();
        assert_eq!(matmul_nt(&a, &b), a.matmul(&b.transpose()).unwrap());
        assert_eq!(matmul_tn(&a, &b), a.transpose().matmul(&b).unwrap());
    }

    fn naive(a: &Tensor2D, b: &Tensor2D) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for p in 0..a.cols() {
                    out[i * b.cols() + j] += a.get(i, p) * b.get(p, j);
                }
            }
        }
        out
    }

    proptest::proptest! {
        #[test]
        fn products_match_triple_loop(n in 0usize..9, k in 0usize..9, m in 0usize..9, seed in 0u64..1000) {
            let mut x = seed as f64;
            let mut next = move || { x = (x * 1.618_033 + 0.311).fract(); x - 0.5 };
            let a = Tensor2D::new(n, k, (0..n * k).map(|_| next()).collect()).unwrap();
            let b = Tensor2D::new(k, m, (0..k * m).map(|_| next()).collect()).unwrap();
            let want = naive(&a, &b);
            for got in [a.matmul(&b).unwrap(), matmul_nt(&a, &b.transpose()), matmul_tn(&a.transpose(), &b)] {
                proptest::prop_assert_eq!(got.shape(), (n, m));
                for (g, w) in got.data().iter().zip(&want) {
                    proptest::prop_assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bad_buffer_length_is_rejected() {
        assert!(matches!(Tensor2D::new(2, 2, vec![1.0; 3]), Err(Error::Dimension(_))));
        assert!(Tensor2D::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
