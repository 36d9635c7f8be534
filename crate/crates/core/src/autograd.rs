//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! parameters (copied in from a [`Tensor`] with `requires_grad`) or constants.
//! [`Tape::backward`] walks the tape once in reverse and leaves a gradient for
//! every node that depends on a parameter. The tape is rebuilt for every step.

use crate::error::{Error, Result};
use crate::tensor::{check_finite, kernels, numel, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Reshape(Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    Combine {
        expert_out: Var,
        weights: Var,
        residual: Var,
        rows: Vec<Vec<Option<usize>>>,
    },
    Sum(Var),
    MeanRows(Var),
    PickPerRow {
        x: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected 2-D operand, got {other:?}"))),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, value: Vec<f64>, kind: Op) -> Result<Var> {
        check_finite(op, &value)?;
        let needs_grad = match &kind {
            Op::Leaf => false,
            _ => self.parents(&kind).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::Reshape(x) | Op::Scale(x, _) | Op::Relu(x) | Op::Softmax(x) | Op::Transpose(x) | Op::Sum(x) | Op::MeanRows(x) => {
                vec![*x]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embed { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SliceCols { x, .. } | Op::SliceRows { x, .. } | Op::GatherRows { x, .. } | Op::PickPerRow { x, .. } => {
                vec![*x]
            }
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::Combine {
                expert_out,
                weights,
                residual,
                ..
            } => vec![*expert_out, *weights, *residual],
        }
    }

    /// Records a leaf that receives a gradient when `tensor.requires_grad()`.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            needs_grad: tensor.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: tensor.into_data(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite and shaped")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `tensor.grad`.
    pub fn accumulate_grad_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        if let Some(g) = self.grad(v) {
            tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add(a, b))
    }

    /// `[m,n] + [n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2("add_bias", self.shape(x))?;
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", format!("bias {:?} for width {n}", self.shape(bias))));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect::<Vec<_>>();
        debug_assert_eq!(out.len(), m * n);
        self.push("add_bias", vec![m, n], out, Op::AddBias(x, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("div", format!("{:?} / {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x / y).collect();
        let shape = self.shape(a).to_vec();
        self.push("div", shape, out, Op::Div(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, factor))
    }

    /// `[m,n] * [m]`: row `i` is multiplied by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = dims2("scale_rows", self.shape(x))?;
        if self.shape(s) != [m] {
            return Err(Error::shape("scale_rows", format!("scales {:?} for {m} rows", self.shape(s))));
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(n)
            .zip(sv)
            .flat_map(|(row, c)| row.iter().map(move |v| v * c))
            .collect();
        self.push("scale_rows", vec![m, n], out, Op::ScaleRows(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, out, Op::Relu(x))
    }

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("softmax", self.shape(x))?;
        let out = softmax_rows(self.value(x), n);
        self.push("softmax", vec![m, n], out, Op::Softmax(x))
    }

    /// Row-wise layer normalization with learned gain and bias of width `n`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2("layer_norm", self.shape(x))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", "gain/bias width"));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = vec![0.0; m * n];
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for (i, row) in self.value(x).chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        self.push(
            "layer_norm",
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        )
    }

    /// Looks up rows of a `[V,d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2("embed", self.shape(table))?;
        if let Some(&id) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id, vocab: v });
        }
        let index: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        let out = kernels::gather_rows(self.value(table), &index, d);
        self.push(
            "embed",
            vec![ids.len(), d],
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean token cross-entropy of `[T,V]` logits against `T` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = dims2("cross_entropy", self.shape(logits))?;
        if targets.len() != t || t == 0 {
            return Err(Error::shape("cross_entropy", format!("{} targets for {t} rows", targets.len())));
        }
        if let Some(&id) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id, vocab: v });
        }
        let probs = softmax_rows(self.value(logits), v);
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = &self.value(logits)[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[target];
        }
        loss /= t as f64;
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.shape(x))?;
        let out = kernels::transpose(self.value(x), m, n);
        self.push("transpose", vec![n, m], out, Op::Transpose(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.shape(x))?;
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of width {n}", start + len)));
        }
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push("slice_cols", vec![m, len], out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols", "no parts"))?;
        let (m, _) = dims2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.shape(p))?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("{r} rows vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", vec![m, total], out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_rows", self.shape(x))?;
        if start + len > m {
            return Err(Error::shape("slice_rows", format!("[{start}, {}) of {m} rows", start + len)));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        self.push("slice_rows", vec![len, n], out, Op::SliceRows { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no parts"))?;
        let (_, n) = dims2("concat_rows", self.shape(first))?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.shape(p))?;
            if c != n {
                return Err(Error::shape("concat_rows", format!("width {c} vs {n}")));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        self.push("concat_rows", vec![rows, n], out, Op::ConcatRows(parts.to_vec()))
    }

    /// Output row `i` is `x[index[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let (m, n) = dims2("gather_rows", self.shape(x))?;
        if let Some(bad) = index.iter().flatten().find(|&&r| r >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let out = kernels::gather_rows(self.value(x), index, n);
        self.push(
            "gather_rows",
            vec![index.len(), n],
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// Weighted gather of expert outputs back to token order.
    ///
    /// `rows[t]` lists, per routing slot, the row of `expert_out` holding the
    /// result for token `t`, and `weights` is `[T, K]`. Tokens with no kept
    /// slot take `residual[t]` unchanged.
    pub fn combine(
        &mut self,
        expert_out: Var,
        weights: Var,
        residual: Var,
        rows: &[Vec<Option<usize>>],
    ) -> Result<Var> {
        let (r, d) = dims2("combine", self.shape(expert_out))?;
        let (t, dr) = dims2("combine", self.shape(residual))?;
        let k = rows.first().map_or(1, Vec::len);
        if dr != d || rows.len() != t || self.shape(weights) != [t, k] || rows.iter().any(|x| x.len() != k) {
            return Err(Error::shape("combine", "expert output / weights / residual disagree"));
        }
        if let Some(bad) = rows.iter().flatten().flatten().find(|&&row| row >= r) {
            return Err(Error::shape("combine", format!("slot row {bad} out of {r}")));
        }
        let out = kernels::combine(self.value(expert_out), self.value(weights), self.value(residual), rows, d);
        self.push(
            "combine",
            vec![t, d],
            out,
            Op::Combine {
                expert_out,
                weights,
                residual,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(x))
    }

    /// Column means of a `[m,n]` tensor, giving `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("mean_rows", self.shape(x))?;
        if m == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; n];
        for row in self.value(x).chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push("mean_rows", vec![n], out, Op::MeanRows(x))
    }

    /// `out[i] = x[i, index[i]]`.
    pub fn pick_per_row(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = dims2("pick_per_row", self.shape(x))?;
        if index.len() != m || index.iter().any(|&j| j >= n) {
            return Err(Error::shape("pick_per_row", "index disagrees with rows/cols"));
        }
        let xv = self.value(x);
        let out = index.iter().enumerate().map(|(i, &j)| xv[i * n + j]).collect();
        self.push(
            "pick_per_row",
            vec![m],
            out,
            Op::PickPerRow {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients of earlier backward calls
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only keep gradients for nodes that can receive them.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(a) {
                    accumulate(&mut grads[a.0], kernels::matmul_a_bt(g, self.value(*b), m, n, k));
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], kernels::matmul_at_b(self.value(*a), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::AddBias(x, bias) => {
                let n = self.shape(*bias)[0];
                if wants(x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if wants(bias) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    accumulate(&mut grads[bias.0], gb);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if wants(a) {
                    accumulate(&mut grads[a.0], g.iter().zip(bv).map(|(g, y)| g / y).collect());
                }
                if wants(b) {
                    let gb = g
                        .iter()
                        .zip(self.value(*a))
                        .zip(bv)
                        .map(|((g, x), y)| -g * x / (y * y))
                        .collect();
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Reshape(x) => {
                if wants(x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
            }
            Op::Scale(x, f) => {
                if wants(x) {
                    accumulate(&mut grads[x.0], g.iter().map(|v| v * f).collect());
                }
            }
            Op::ScaleRows(x, s) => {
                let n = node.shape[1];
                if wants(x) {
                    let sv = self.value(*s);
                    let gx = g.chunks(n).zip(sv).flat_map(|(row, c)| row.iter().map(move |v| v * c)).collect();
                    accumulate(&mut grads[x.0], gx);
                }
                if wants(s) {
                    let gs = g
                        .chunks(n)
                        .zip(self.value(*x).chunks(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads[s.0], gs);
                }
            }
            Op::Relu(x) => {
                if wants(x) {
                    let gx = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Softmax(x) => {
                if wants(x) {
                    let n = node.shape[1];
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(n).zip(node.value.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let n = node.shape[1];
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut gx = vec![0.0; g.len()];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for (i, (gr, xr)) in g.chunks(n).zip(xv.chunks(n)).enumerate() {
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean[i]) * rstd[i]).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = rstd[i] / n as f64 * (n as f64 * dxhat[j] - sum_d - xhat[j] * sum_dx);
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                    }
                }
                if wants(x) {
                    accumulate(&mut grads[x.0], gx);
                }
                if wants(gain) {
                    accumulate(&mut grads[gain.0], ggain);
                }
                if wants(bias) {
                    accumulate(&mut grads[bias.0], gbias);
                }
            }
            Op::Embed { table, ids } => {
                if wants(table) {
                    let d = self.shape(*table)[1];
                    let mut gt = vec![0.0; self.value(*table).len()];
                    for (row, &id) in g.chunks(d).zip(ids) {
                        gt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    accumulate(&mut grads[table.0], gt);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(logits) {
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / targets.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * v + t] -= scale;
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
            }
            Op::Transpose(x) => {
                if wants(x) {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    accumulate(&mut grads[x.0], kernels::transpose(g, m, n));
                }
            }
            Op::SliceCols { x, start } => {
                if wants(x) {
                    let len = node.shape[1];
                    let n = self.shape(*x)[1];
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (row, src) in gx.chunks_mut(n).zip(g.chunks(len)) {
                        row[*start..start + len].copy_from_slice(src);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if wants(p) {
                        let gp = g.chunks(total).flat_map(|row| row[offset..offset + w].iter().copied()).collect();
                        accumulate(&mut grads[p.0], gp);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                if wants(x) {
                    let n = node.shape[1];
                    let mut gx = vec![0.0; self.value(*x).len()];
                    gx[start * n..start * n + g.len()].copy_from_slice(g);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if wants(p) {
                        accumulate(&mut grads[p.0], g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                if wants(x) {
                    let n = node.shape[1];
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (row, src) in g.chunks(n).zip(index) {
                        if let Some(s) = src {
                            gx[s * n..(s + 1) * n].iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Combine {
                expert_out,
                weights,
                residual,
                rows,
            } => {
                let d = node.shape[1];
                let k = rows.first().map_or(1, Vec::len);
                let eo = self.value(*expert_out);
                let wv = self.value(*weights);
                let mut g_out = vec![0.0; eo.len()];
                let mut g_w = vec![0.0; wv.len()];
                let mut g_res = vec![0.0; self.value(*residual).len()];
                for (t, routes) in rows.iter().enumerate() {
                    let gt = &g[t * d..(t + 1) * d];
                    if routes.iter().all(Option::is_none) {
                        g_res[t * d..(t + 1) * d].copy_from_slice(gt);
                        continue;
                    }
                    for (slot, route) in routes.iter().enumerate() {
                        if let Some(r) = route {
                            let w = wv[t * k + slot];
                            let src = &eo[r * d..(r + 1) * d];
                            g_w[t * k + slot] = gt.iter().zip(src).map(|(a, b)| a * b).sum();
                            g_out[r * d..(r + 1) * d].iter_mut().zip(gt).for_each(|(o, v)| *o += w * v);
                        }
                    }
                }
                if wants(expert_out) {
                    accumulate(&mut grads[expert_out.0], g_out);
                }
                if wants(weights) {
                    accumulate(&mut grads[weights.0], g_w);
                }
                if wants(residual) {
                    accumulate(&mut grads[residual.0], g_res);
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    accumulate(&mut grads[x.0], vec![g[0]; self.value(*x).len()]);
                }
            }
            Op::MeanRows(x) => {
                if wants(x) {
                    let m = self.shape(*x)[0];
                    let gx = (0..m).flat_map(|_| g.iter().map(move |v| v / m as f64)).collect();
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::PickPerRow { x, index } => {
                if wants(x) {
                    let n = self.shape(*x)[1];
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (i, &j) in index.iter().enumerate() {
                        gx[i * n + j] += g[i];
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        dst.iter_mut().for_each(|o| *o /= sum);
    }
    out
}

/// Softmax over the last axis of a 2-D tensor, outside any tape.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), n))
}
