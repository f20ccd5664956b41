//! Dense row-major `f64` tensors and the few kernels the moment layers need.
//!
//! Every reduction runs in a fixed loop order, so results are bit-reproducible
//! for a given input regardless of how the caller batches work.

mod rng;

pub use rng::{gaussian_sample, SeededRng};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Tensor::new element {i}")));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![value; n])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
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

    /// Leading extent; the batch size for activations.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_raw(self.shape.clone(), data))
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what} element {i}"))),
            None => Ok(()),
        }
    }

    /// Gathers the given leading-index rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Self::from_raw(shape, data)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let [m, n] = self.dims2("transpose2")?;
        Ok(Self::from_raw(vec![n, m], transpose(m, n, &self.data)))
    }

    fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [m, n] => Ok([m, n]),
            _ => Err(Error::shape(
                op,
                format!("expected 2-D, got {:?}", self.shape),
            )),
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions {k} and {k2} differ"),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(m, k, n, &a.data, &b.data, &mut out);
    Ok(Tensor::from_raw(vec![m, n], out))
}

const K_BLOCK: usize = 64;

/// `c[m×n] += a[m×k] · b[k×n]`, row-major.
///
/// Each `c[i][j]` accumulates its products in ascending `k`, the same order
/// as the textbook triple loop, so results match it bit-for-bit. Blocking
/// over `k` only changes which rows of `b` stay hot in cache.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    for k0 in (0..k).step_by(K_BLOCK) {
        let k1 = (k0 + K_BLOCK).min(k);
        for (i, c_row) in c.chunks_exact_mut(n).enumerate() {
            let a_row = &a[i * k..(i + 1) * k];
            for (kk, &aik) in a_row.iter().enumerate().take(k1).skip(k0) {
                if aik == 0.0 {
                    continue;
                }
                let b_row = &b[kk * n..(kk + 1) * n];
                for (cij, &bkj) in c_row.iter_mut().zip(b_row) {
                    *cij += aik * bkj;
                }
            }
        }
    }
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`, accumulated into `c[m×n]`.
pub(crate) fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let at = transpose(k, m, a);
    gemm_acc(m, k, n, &at, b, c);
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`, accumulated into `c[m×n]`.
pub(crate) fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let bt = transpose(n, k, b);
    gemm_acc(m, k, n, a, &bt, c);
}

pub(crate) fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Receptive-field geometry of a 2-D convolution over an `n1×n2×ch` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub pad: [usize; 2],
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Self> {
        let g = Self {
            input,
            kernel,
            stride,
            pad,
        };
        if kernel.contains(&0) || stride.contains(&0) || input.contains(&0) {
            return Err(Error::Invalid(format!("degenerate conv geometry {g:?}")));
        }
        for d in 0..2 {
            if input[d] + 2 * pad[d] < kernel[d] {
                return Err(Error::Invalid(format!(
                    "kernel {:?} larger than padded input {:?}",
                    kernel, input
                )));
            }
        }
        Ok(g)
    }

    pub fn out(&self) -> [usize; 2] {
        [0, 1].map(|d| (self.input[d] + 2 * self.pad[d] - self.kernel[d]) / self.stride[d] + 1)
    }

    /// Rows of the im2col matrix: `k1·k2·ch`.
    pub fn patch_len(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.input[2]
    }

    pub fn out_pixels(&self) -> usize {
        let [o1, o2] = self.out();
        o1 * o2
    }

    /// Input offset feeding patch element `(ki, kj, c)` of output pixel
    /// `(oi, oj)`, or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<usize> {
        let r = (oi * self.stride[0] + ki).checked_sub(self.pad[0])?;
        let c = (oj * self.stride[1] + kj).checked_sub(self.pad[1])?;
        (r < self.input[0] && c < self.input[1]).then(|| (r * self.input[1] + c) * self.input[2])
    }
}

/// Unfolds an `n1×n2×ch` image into a `(k1·k2·ch) × (out1·out2)` matrix.
///
/// Column `o = oi·out2 + oj` holds the receptive field of output pixel
/// `(oi, oj)`; within a column, row `(ki·k2 + kj)·ch + c` holds input
/// `(oi·s1 + ki − p1, oj·s2 + kj − p2, c)`. Padding contributes zeros.
pub fn im2col(x: &Tensor, geometry: &ConvGeometry) -> Result<Tensor> {
    if x.shape() != geometry.input {
        return Err(Error::shape(
            "im2col",
            format!("input {:?} vs geometry {:?}", x.shape(), geometry.input),
        ));
    }
    let patches = patches(x.data(), geometry);
    let (p, o) = (geometry.patch_len(), geometry.out_pixels());
    Ok(Tensor::from_raw(vec![p, o], transpose(o, p, &patches)))
}

/// Transposed im2col: `(out1·out2) × (k1·k2·ch)`, one receptive field per row.
pub(crate) fn patches(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let [o1, o2] = g.out();
    let ch = g.input[2];
    let p = g.patch_len();
    let mut out = vec![0.0; o1 * o2 * p];
    for oi in 0..o1 {
        for oj in 0..o2 {
            let row = &mut out[(oi * o2 + oj) * p..][..p];
            for ki in 0..g.kernel[0] {
                for kj in 0..g.kernel[1] {
                    if let Some(src) = g.source(oi, oj, ki, kj) {
                        let dst = (ki * g.kernel[1] + kj) * ch;
                        row[dst..dst + ch].copy_from_slice(&x[src..src + ch]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`patches`]: scatter-adds patch rows back onto the image.
pub(crate) fn patches_adjoint(grad: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let [o1, o2] = g.out();
    let ch = g.input[2];
    let p = g.patch_len();
    for oi in 0..o1 {
        for oj in 0..o2 {
            let row = &grad[(oi * o2 + oj) * p..][..p];
            for ki in 0..g.kernel[0] {
                for kj in 0..g.kernel[1] {
                    if let Some(dst) = g.source(oi, oj, ki, kj) {
                        let src = (ki * g.kernel[1] + kj) * ch;
                        for c in 0..ch {
                            dx[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    }
}
