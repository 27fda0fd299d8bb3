//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Values are computed eagerly as operations are recorded; `backward` walks
//! the tape once in reverse and accumulates gradients. Parameters are named
//! leaves, and every registered parameter receives a gradient (exactly zero
//! when it does not reach the loss).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::tensor::{gelu, gelu_grad, Scalar, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

enum Op<T: Scalar> {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    SoftmaxRows(NodeId),
    GatherRows {
        table: NodeId,
        ids: Vec<u32>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    NarrowRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    NarrowCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    PadRows {
        x: NodeId,
        orig_rows: usize,
    },
    Reshape(NodeId),
    MulMask {
        x: NodeId,
        mask: Tensor<T>,
    },
    SumAll(NodeId),
    MeanCrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        mask: Vec<u8>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients keyed by parameter name.
pub struct Gradients<T: Scalar> {
    map: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }
}

/// Recorded computation for one training step (or gradient check).
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Graph<T> {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        value.check_finite("graph op output")?;
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        self.nodes.len() - 1
    }

    /// Trainable leaf; its gradient is retrievable by name after backward.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        let id = self.constant(value);
        self.params.push((name.to_string(), id));
        id
    }

    /// Parameter when `trainable`, otherwise a frozen constant.
    pub fn leaf(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> NodeId {
        if trainable {
            self.param(name, value)
        } else {
            self.constant(value)
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        self.push(v, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.transpose();
        self.push(v, Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.add_bias(&self.nodes[bias].value)?;
        self.push(v, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let v = self.nodes[x].value.scale(T::from_f64(s));
        self.push(v, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.map(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let v = layer_norm_forward(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
        )?;
        self.push(v, Op::LayerNorm { x, gamma, beta })
    }

    pub fn softmax_rows(&mut self, x: NodeId, causal: bool) -> Result<NodeId> {
        let v = self.nodes[x].value.softmax_rows(causal)?;
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let v = self.nodes[table].value.gather_rows(ids)?;
        self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let v = Tensor::concat_rows(&tensors)?;
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let v = Tensor::concat_cols(&tensors)?;
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn narrow_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.nodes[x].value.narrow_rows(start, len)?;
        self.push(v, Op::NarrowRows { x, start, len })
    }

    pub fn narrow_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.nodes[x].value.narrow_cols(start, len)?;
        self.push(v, Op::NarrowCols { x, start, len })
    }

    pub fn pad_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let orig_rows = self.nodes[x].value.rows();
        let v = self.nodes[x].value.pad_rows(rows)?;
        self.push(v, Op::PadRows { x, orig_rows })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x].value.reshape(shape)?;
        self.push(v, Op::Reshape(x))
    }

    /// Elementwise multiply by a fixed mask (dropout).
    pub fn mul_mask(&mut self, x: NodeId, mask: Tensor<T>) -> Result<NodeId> {
        let v = self.nodes[x].value.mul(&mask)?;
        self.push(v, Op::MulMask { x, mask })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x]
            .value
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Mean of -log softmax(logits_row)[target] over rows with mask 1.
    ///
    /// Row p of `logits` scores `targets[p]`; callers align the shift between
    /// positions and next tokens before recording this op.
    pub fn mean_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[u8],
    ) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(
                "mean_cross_entropy",
                format!("{} logit rows vs {} targets / {} mask", rows, targets.len(), mask.len()),
            ));
        }
        let active = mask.iter().filter(|&&m| m != 0).count();
        if active == 0 {
            return Err(Error::InvalidArgument(
                "cross-entropy needs at least one masked-in target".to_string(),
            ));
        }
        let mut total = T::zero();
        for p in 0..rows {
            if mask[p] == 0 {
                continue;
            }
            let t = targets[p] as usize;
            if t >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: targets[p],
                    vocab,
                });
            }
            total = total + row_neg_log_softmax(lv.row(p), t);
        }
        let loss = total / T::from_f64(active as f64);
        self.push(
            Tensor::scalar(loss),
            Op::MeanCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        )
    }

    /// Gradient of the scalar at `loss` with respect to every parameter.
    ///
    /// Consumes the recording: calling backward twice without building a new
    /// graph is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already called; record a new graph first".to_string(),
            ));
        }
        self.backward_done = true;
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(T::one()));

        for id in (0..self.nodes.len()).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            g.check_finite("gradient")?;
            self.propagate(id, &g, &mut grads)?;
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g); // keep leaf grads for collection
            }
        }

        let mut map = HashMap::new();
        for (name, id) in &self.params {
            let g = grads[*id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[*id].value.shape()));
            map.insert(name.clone(), g);
        }
        Ok(Gradients { map })
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) -> Result<()> {
        match &mut grads[id] {
            Some(g) => *g = g.add(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(
        &self,
        id: NodeId,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let da = g.matmul(&self.nodes[*b].value.transpose())?;
                let db = self.nodes[*a].value.transpose().matmul(g)?;
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *b, db)?;
            }
            Op::Transpose(x) => {
                Self::accumulate(grads, *x, g.transpose())?;
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.clone())?;
            }
            Op::AddBias(x, bias) => {
                Self::accumulate(grads, *x, g.clone())?;
                let n = g.cols();
                let mut db = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (acc, &v) in db.iter_mut().zip(row.iter()) {
                        *acc = *acc + v;
                    }
                }
                let shape = self.nodes[*bias].value.shape().to_vec();
                Self::accumulate(grads, *bias, Tensor::from_vec(&shape, db)?)?;
            }
            Op::Scale(x, s) => {
                Self::accumulate(grads, *x, g.scale(T::from_f64(*s)))?;
            }
            Op::Gelu(x) => {
                let dx = Tensor::from_vec(
                    g.shape(),
                    self.nodes[*x]
                        .value
                        .data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(&x, &gy)| gelu_grad(x) * gy)
                        .collect(),
                )?;
                Self::accumulate(grads, *x, dx)?;
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (dx, dgamma, dbeta) = layer_norm_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*gamma].value,
                    g,
                )?;
                Self::accumulate(grads, *x, dx)?;
                Self::accumulate(grads, *gamma, dgamma)?;
                let _ = beta;
                Self::accumulate(grads, *beta, dbeta)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[id].value;
                let n = y.cols();
                let mut dx = vec![T::zero(); y.numel()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let mut dot = T::zero();
                    for (yk, gk) in yr.iter().zip(gr.iter()) {
                        dot = dot + *yk * *gk;
                    }
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, *x, Tensor::from_vec(y.shape(), dx)?)?;
            }
            Op::GatherRows { table, ids } => {
                let shape = self.nodes[*table].value.shape().to_vec();
                let n = shape[1];
                let mut dt = vec![T::zero(); shape[0] * n];
                for (i, &idx) in ids.iter().enumerate() {
                    let src = &g.data()[i * n..(i + 1) * n];
                    let dst = &mut dt[idx as usize * n..(idx as usize + 1) * n];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d = *d + s;
                    }
                }
                Self::accumulate(grads, *table, Tensor::from_vec(&shape, dt)?)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    Self::accumulate(grads, p, g.narrow_rows(start, rows)?)?;
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.cols();
                    Self::accumulate(grads, p, g.narrow_cols(start, cols)?)?;
                    start += cols;
                }
            }
            Op::NarrowRows { x, start, len } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                let n = self.nodes[*x].value.cols();
                let mut dx = vec![T::zero(); self.nodes[*x].value.numel()];
                dx[start * n..(start + len) * n].copy_from_slice(g.data());
                Self::accumulate(grads, *x, Tensor::from_vec(&shape, dx)?)?;
            }
            Op::NarrowCols { x, start, len } => {
                let src = &self.nodes[*x].value;
                let (m, n) = (src.rows(), src.cols());
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let gr = &g.data()[i * len..(i + 1) * len];
                    dx[i * n + start..i * n + start + len].copy_from_slice(gr);
                }
                Self::accumulate(grads, *x, Tensor::from_vec(src.shape(), dx)?)?;
            }
            Op::PadRows { x, orig_rows } => {
                Self::accumulate(grads, *x, g.narrow_rows(0, *orig_rows)?)?;
            }
            Op::Reshape(x) => {
                let shape = self.nodes[*x].value.shape().to_vec();
                Self::accumulate(grads, *x, g.reshape(&shape)?)?;
            }
            Op::MulMask { x, mask } => {
                Self::accumulate(grads, *x, g.mul(mask)?)?;
            }
            Op::SumAll(x) => {
                let gv = g.scalar_value();
                let shape = self.nodes[*x].value.shape().to_vec();
                let dx = Tensor::from_vec(&shape, vec![gv; self.nodes[*x].value.numel()])?;
                Self::accumulate(grads, *x, dx)?;
            }
            Op::MeanCrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let lv = &self.nodes[*logits].value;
                let (rows, vocab) = (lv.rows(), lv.cols());
                let active = mask.iter().filter(|&&m| m != 0).count();
                let scale = g.scalar_value() / T::from_f64(active as f64);
                let mut dl = vec![T::zero(); rows * vocab];
                for p in 0..rows {
                    if mask[p] == 0 {
                        continue;
                    }
                    let probs = row_softmax(lv.row(p));
                    for j in 0..vocab {
                        let indicator = if j == targets[p] as usize {
                            T::one()
                        } else {
                            T::zero()
                        };
                        dl[p * vocab + j] = scale * (probs[j] - indicator);
                    }
                }
                Self::accumulate(grads, *logits, Tensor::from_vec(lv.shape(), dl)?)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (m, n) = (x.rows(), x.cols());
    if gamma.numel() != n || beta.numel() != n {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma/beta len {}/{} vs cols {}", gamma.numel(), beta.numel(), n),
        ));
    }
    let eps = T::from_f64(LN_EPS);
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = T::one() / (var + eps).sqrt();
        for j in 0..n {
            let xhat = (row[j] - mean) * inv_std;
            out[i * n + j] = gamma.data()[j] * xhat + beta.data()[j];
        }
    }
    Tensor::from_vec(x.shape(), out)
}

fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, n) = (x.rows(), x.cols());
    let eps = T::from_f64(LN_EPS);
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut dx = vec![T::zero(); m * n];
    let mut dgamma = vec![T::zero(); n];
    let mut dbeta = vec![T::zero(); n];
    for i in 0..m {
        let row = x.row(i);
        let grow = &g.data()[i * n..(i + 1) * n];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = T::one() / (var + eps).sqrt();

        // dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..n {
            let xhat = (row[j] - mean) * inv_std;
            let dxhat = grow[j] * gamma.data()[j];
            mean_dxhat = mean_dxhat + dxhat;
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
            dgamma[j] = dgamma[j] + grow[j] * xhat;
            dbeta[j] = dbeta[j] + grow[j];
        }
        mean_dxhat = mean_dxhat * inv_n;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
        for j in 0..n {
            let xhat = (row[j] - mean) * inv_std;
            let dxhat = grow[j] * gamma.data()[j];
            dx[i * n + j] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(&[n], dgamma)?,
        Tensor::from_vec(&[n], dbeta)?,
    ))
}

fn row_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let mut max = row[0];
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = T::zero();
    for &e in &exps {
        sum = sum + e;
    }
    for e in &mut exps {
        *e = *e / sum;
    }
    exps
}

/// -log softmax(row)[target], computed via a stable log-sum-exp.
pub(crate) fn row_neg_log_softmax<T: Scalar>(row: &[T], target: usize) -> T {
    let mut max = row[0];
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    max + sum.ln() - row[target]
}
