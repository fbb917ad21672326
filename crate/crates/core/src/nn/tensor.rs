use crate::error::{shape_err, Error, Result};

/// Dense row-major array of `f64`.
///
/// Most model math runs on rank-2 tensors; vectors are carried as `1 × d`
/// rows so that broadcasting rules stay trivial.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self { shape: vec![1, n], data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view; rank-1 tensors count as a single row and higher
    /// ranks fold every leading axis into rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            s => {
                let cols = s[s.len() - 1];
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self { shape: vec![c, r], data: out }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(shape_err("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Ok(Self { shape: vec![m, n], data: out })
    }

    /// Index of the largest entry in each row.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row_slice(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// `c (+)= op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// `ta`/`tb` mean the stored buffer is the transpose of the operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the `m*k`, `k*n` and `m*n`
    // buffers whose lengths are asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Softmax along `axis` of an arbitrary-rank tensor, stabilised by
/// subtracting the running maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            let mx = (0..extent).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..extent {
                let e = (out[idx(k)] - mx).exp();
                out[idx(k)] = e;
                s += e;
            }
            for k in 0..extent {
                out[idx(k)] /= s;
            }
        }
    }
    Tensor::new(shape, out)
}
