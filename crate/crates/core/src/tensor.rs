//! Dense row-major `f64` tensors, the raw kernels behind the autograd tape,
//! and truncated-normal initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Samples outside `mean ± TRUNCATION * std` are redrawn.
pub const TRUNCATION: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        check_finite("tensor", &data)?;
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a `[rows.len(), cols]` matrix; every row must have `cols` entries.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values; callers keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape("dims2", format!("expected 2-D, got {other:?}"))),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient of {} values for tensor of {}", grad.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Draws from a normal distribution truncated at `mean ± 2·std` by rejection,
/// consuming the caller's RNG stream.
pub fn truncated_normal_with<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    mean: f64,
    std: f64,
) -> Result<Tensor> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::InvalidArgument(format!("std must be positive, got {std}")));
    }
    let data = (0..numel(shape))
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= TRUNCATION {
                break mean + std * z;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn init_truncated_normal(shape: &[usize], mean: f64, std: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    truncated_normal_with(&mut rng, shape, mean, std)
}

pub(crate) mod kernels {
    /// `[m,k] x [k,n]`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    /// `A [m,k]` times the transpose of `B [n,k]`, giving `[m,n]`.
    pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// Transpose of `A [k,m]` times `B [k,n]`, giving `[m,n]`.
    pub fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let av = a[p * m + i];
                if av == 0.0 {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = x[i * cols + j];
            }
        }
        out
    }

    /// Top-k combine: `y[t] = Σ_k w[t,k] · out[rows[t][k]]` over kept routes,
    /// or `residual[t]` when every route of `t` was dropped.
    pub fn combine(
        expert_out: &[f64],
        weights: &[f64],
        residual: &[f64],
        rows: &[Vec<Option<usize>>],
        d: usize,
    ) -> Vec<f64> {
        let k = rows.first().map_or(1, Vec::len);
        let mut y = vec![0.0; rows.len() * d];
        for (t, routes) in rows.iter().enumerate() {
            let dst = &mut y[t * d..(t + 1) * d];
            let mut any = false;
            for (slot, route) in routes.iter().enumerate() {
                if let Some(r) = route {
                    let w = weights[t * k + slot];
                    let src = &expert_out[r * d..(r + 1) * d];
                    if any {
                        dst.iter_mut().zip(src).for_each(|(o, v)| *o += w * v);
                    } else {
                        dst.iter_mut().zip(src).for_each(|(o, v)| *o = w * v);
                        any = true;
                    }
                }
            }
            if !any {
                dst.copy_from_slice(&residual[t * d..(t + 1) * d]);
            }
        }
        y
    }

    /// Gathers rows by index; `None` yields a zero row.
    pub fn gather_rows(x: &[f64], index: &[Option<usize>], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; index.len() * d];
        for (i, src) in index.iter().enumerate() {
            if let Some(s) = src {
                out[i * d..(i + 1) * d].copy_from_slice(&x[s * d..(s + 1) * d]);
            }
        }
        out
    }
}
