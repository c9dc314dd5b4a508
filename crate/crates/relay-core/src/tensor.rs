//! Dense row-major tensors over f32 (training default) or f64 (gradient
//! checks need the headroom).

use crate::error::{Error, Result};
use num_traits::Float;
use rand::Rng;

/// Element type for all numeric work in this crate.
pub trait Scalar:
    Float + num_traits::NumAssignOps + Default + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense array with row-major layout. Rank 2 carries almost all of the
/// arithmetic; rank 1 appears as biases and gains.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// Zero-mean normal init via Box-Muller, deterministic per RNG stream.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            data.push(T::from_f64(z * std));
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count when interpreted as a matrix; rank-1 tensors are rows.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    /// self += alpha * other (same shape).
    pub fn add_scaled(&mut self, other: &Tensor<T>, alpha: T) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise add of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// self [m,n] x other^T where other is [k,n] -> [m,k].
    pub fn matmul_bt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = (self.rows(), self.cols());
        let (k, n2) = (other.rows(), other.cols());
        if n != n2 {
            return Err(Error::shape(format!(
                "matmul_bt widths disagree: {:?} x {:?}^T",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * k];
        for i in 0..m {
            let arow = &self.data[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &other.data[p * n..(p + 1) * n];
                let mut s = T::zero();
                for (&a, &b) in arow.iter().zip(brow.iter()) {
                    s += a * b;
                }
                out[i * k + p] = s;
            }
        }
        Tensor::new(vec![m, k], out)
    }

    /// self^T x other where self is [m,k], other [m,n] -> [k,n].
    pub fn matmul_at(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = (self.rows(), self.cols());
        let (m2, n) = (other.rows(), other.cols());
        if m != m2 {
            return Err(Error::shape(format!(
                "matmul_at heights disagree: {:?}^T x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); k * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let brow = &other.data[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        Tensor::new(vec![k, n], out)
    }

    pub fn transpose2d(&self) -> Tensor<T> {
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
}

// ── numeric kernels shared by the graph forward and the no-grad path ──

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter() {
            sum += (*v - mx).exp();
        }
        let lse = mx + sum.ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    out
}

/// Row-wise layer norm: gain * (x - mean) / sqrt(var + eps) + bias.
/// Also returns per-row (inv_std, normalized) for the backward pass.
pub fn layer_norm_rows<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Vec<T>, Tensor<T>) {
    let (m, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    let mut norm = Tensor::zeros(vec![m, n]);
    let mut inv_std = Vec::with_capacity(m);
    let nf = T::from_f64(n as f64);
    let epst = T::from_f64(eps);
    for i in 0..m {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / nf;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var / nf;
        let istd = T::one() / (var + epst).sqrt();
        inv_std.push(istd);
        for j in 0..n {
            let xn = (row[j] - mean) * istd;
            norm.data_mut()[i * n + j] = xn;
            out.data_mut()[i * n + j] = gain.data()[j] * xn + bias.data()[j];
        }
    }
    (out, inv_std, norm)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}
