//! Dense row-major tensors over f32 (default) or f64.
//!
//! f32 is the compute dtype; the f64 instantiation exists for reference
//! evaluations and finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::nn::mac;

/// Element type for tensors: f32 for normal compute, f64 for checking.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense tensor: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} expects {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a matrix or the length of a vector.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Matrix product `(m x k) . (k x n)`, recording `m*n*k` on the active
    /// MAC counter.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {} vs {} ({:?} . {:?})", k, k2, self.shape, rhs.shape),
            ));
        }
        mac::record((m * n * k) as u64);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + a_ip * b;
                }
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    pub fn transpose(&self) -> Tensor<T> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != rhs.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape, rhs.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Add a length-n vector to every row of an (m x n) matrix.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.cols();
        if bias.numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias len {} vs cols {}", bias.numel(), n),
            ));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(bias.data.iter()) {
                *v = *v + b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != rhs.shape {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape, rhs.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Rows `start..start+len`.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (m, n) = (self.rows(), self.cols());
        if start + len > m {
            return Err(Error::shape(
                "narrow_rows",
                format!("{}..{} of {} rows", start, start + len, m),
            ));
        }
        Ok(Tensor {
            shape: vec![len, n],
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    /// Columns `start..start+len`.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (m, n) = (self.rows(), self.cols());
        if start + len > n {
            return Err(Error::shape(
                "narrow_cols",
                format!("{}..{} of {} cols", start, start + len, n),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
        }
        Ok(Tensor {
            shape: vec![m, len],
            data,
        })
    }

    /// Zero-pad with extra rows up to `rows` total.
    pub fn pad_rows(&self, rows: usize) -> Result<Tensor<T>> {
        let (m, n) = (self.rows(), self.cols());
        if rows < m {
            return Err(Error::shape(
                "pad_rows",
                format!("target {} < current {}", rows, m),
            ));
        }
        let mut data = self.data.clone();
        data.resize(rows * n, T::zero());
        Ok(Tensor {
            shape: vec![rows, n],
            data,
        })
    }

    /// Stack matrices with equal column counts, top to bottom.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs".to_string()));
        }
        let n = parts[0].cols();
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            if p.cols() != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("cols {} vs {}", p.cols(), n),
                ));
            }
            m += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    /// Stack matrices with equal row counts, left to right.
    pub fn concat_cols(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs".to_string()));
        }
        let m = parts[0].rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                if p.rows() != m {
                    return Err(Error::shape(
                        "concat_cols",
                        format!("rows {} vs {}", p.rows(), m),
                    ));
                }
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor {
            shape: vec![m, total],
            data,
        })
    }

    /// Select rows of a table by index (embedding lookup).
    pub fn gather_rows(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let (m, n) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            let id = id as usize;
            if id >= m {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {} out of {} rows", id, m),
                ));
            }
            data.extend_from_slice(self.row(id));
        }
        Ok(Tensor {
            shape: vec![ids.len(), n],
            data,
        })
    }

    /// Row-wise softmax; with `causal` set, row i only sees columns `0..=i`
    /// (requires a square matrix).
    pub fn softmax_rows(&self, causal: bool) -> Result<Tensor<T>> {
        let (m, n) = (self.rows(), self.cols());
        if causal && m != n {
            return Err(Error::shape(
                "softmax_rows",
                format!("causal mask needs a square matrix, got {}x{}", m, n),
            ));
        }
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let visible = if causal { i + 1 } else { n };
            let row = &self.data[i * n..i * n + visible];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[i * n + j] = e;
                sum = sum + e;
            }
            for v in &mut data[i * n..i * n + visible] {
                *v = *v / sum;
            }
        }
        Tensor::from_vec(&[m, n], data)
    }

    /// Error if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: context.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.to_f64()).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.to_f64() as f32).collect(),
        }
    }
}

impl Tensor<f32> {
    pub fn from_f64_tensor(t: &Tensor<f64>) -> Tensor<f32> {
        t.to_f32()
    }
}

/// GELU nonlinearity (tanh approximation, as used by ViT/GPT blocks).
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mac::MacCounter;

    fn naive_matmul(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let m = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = eye.matmul(&m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_1x1_counts_one_mac() {
        let a = Tensor::from_vec(&[1, 1], vec![2.0f32]).unwrap();
        let b = Tensor::from_vec(&[1, 1], vec![3.0f32]).unwrap();
        let counter = MacCounter::start();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[6.0]);
        assert_eq!(counter.count(), 1);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut seed = 11u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f32 / (1u64 << 31) as f32) - 0.5
        };
        let a = Tensor::from_vec(&[4, 5], (0..20).map(|_| next()).collect()).unwrap();
        let b = Tensor::from_vec(&[5, 6], (0..30).map(|_| next()).collect()).unwrap();
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-6, "{} vs {}", g, w);
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_mac_count_is_mnk() {
        let a = Tensor::<f32>::zeros(&[4, 5]);
        let b = Tensor::<f32>::zeros(&[5, 6]);
        let counter = MacCounter::start();
        a.matmul(&b).unwrap();
        assert_eq!(counter.count(), 4 * 6 * 5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_vec(&[3, 3], vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.0, 5.0, 4.0, 3.0])
            .unwrap();
        for causal in [false, true] {
            let s = t.softmax_rows(causal).unwrap();
            for i in 0..3 {
                let sum: f32 = s.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                if causal {
                    for j in (i + 1)..3 {
                        assert_eq!(s.row(i)[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![5.0, 6.0]).unwrap();
        let c = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.narrow_rows(2, 1).unwrap().data(), b.data());
        let cols = Tensor::concat_cols(&[&a, &a]).unwrap();
        assert_eq!(cols.shape(), &[2, 4]);
        assert_eq!(cols.narrow_cols(2, 2).unwrap().data(), a.data());
    }

    #[test]
    fn check_finite_detects_nan() {
        let t = Tensor::from_vec(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(t.check_finite("test").is_err());
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={}", x);
        }
    }
}
