//! Dense f64 tensors in row-major layout.
//!
//! Everything downstream (layers, bound propagation, attacks) is built on
//! these kernels, so they stay deliberately simple: plain loops over flat
//! slices, no broadcasting, no views.

use crate::error::{CertError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CertError::ShapeMismatch {
                context: "Tensor::new",
                expected: vec![numel],
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row-major matrix product. `self` is m×k, `rhs` is k×n.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(CertError::ShapeMismatch {
                context: "matmul",
                expected: self.shape.clone(),
                got: rhs.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = rhs.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                let row = &rhs.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Valid-padding cross-correlation. `self` is C×H×W, `kernel` is
    /// K×C×kh×kw, `bias` has length K, same stride in both dims.
    pub fn conv2d(&self, kernel: &Tensor, bias: &[f64], stride: usize) -> Result<Tensor> {
        if self.shape.len() != 3 || kernel.shape.len() != 4 {
            return Err(CertError::ShapeMismatch {
                context: "conv2d rank",
                expected: vec![3, 4],
                got: vec![self.shape.len(), kernel.shape.len()],
            });
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (k, kc, kh, kw) = (
            kernel.shape[0],
            kernel.shape[1],
            kernel.shape[2],
            kernel.shape[3],
        );
        if kc != c || bias.len() != k {
            return Err(CertError::ShapeMismatch {
                context: "conv2d channels",
                expected: vec![c, k],
                got: vec![kc, bias.len()],
            });
        }
        if kh > h || kw > w || stride == 0 {
            return Err(CertError::InvalidArgument(format!(
                "conv2d: kernel {kh}x{kw} with stride {stride} does not fit input {h}x{w}"
            )));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let mut out = vec![0.0; k * oh * ow];
        for f in 0..k {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..kh {
                            let in_row = &self.data
                                [ch * h * w + (y * stride + i) * w + x * stride..];
                            let ker_row = &kernel.data
                                [f * c * kh * kw + ch * kh * kw + i * kw..];
                            for j in 0..kw {
                                acc += ker_row[j] * in_row[j];
                            }
                        }
                    }
                    out[f * oh * ow + y * ow + x] = acc + bias[f];
                }
            }
        }
        Tensor::new(vec![k, oh, ow], out)
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    /// Subgradient mask for ReLU: 1 where x > 0, else 0 (including x == 0).
    pub fn relu_grad_mask(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// out[i] = Σ_j w[i·n+j]·x[j] + b[i], accumulating the sum before adding the
/// bias so a one-layer net reproduces matmul-plus-bias bitwise.
pub fn affine_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    debug_assert_eq!(w.len(), b.len() * n);
    debug_assert_eq!(out.len(), b.len());
    for i in 0..b.len() {
        let row = &w[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += row[j] * x[j];
        }
        out[i] = acc + b[i];
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn l1_norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}
