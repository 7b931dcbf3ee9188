//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the parent
//! indices needed for the backward rule. Node indices are assigned in
//! creation order, so walking the tape from the end visits nodes in reverse
//! topological order.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::tensor::{log_sum_exp, softmax};
use super::{Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Relu(usize),
    Scale(usize, T),
    Transpose(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-owner recording of primitive operations.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Gradient of a scalar loss with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Result<&Tensor<T>> {
        if var.tape != self.tape {
            return Err(Error::Detached);
        }
        self.grads.get(var.index).ok_or(Error::Detached)
    }

    pub(crate) fn take(&mut self, var: Var) -> Tensor<T> {
        let shape = self.grads[var.index].shape().to_vec();
        std::mem::replace(&mut self.grads[var.index], Tensor::zeros(&shape))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(Error::Detached)
        }
    }

    fn val(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.val(v)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.matmul(self.val(b)?)?;
        Ok(self.push(v, Op::MatMul(a.index, b.index)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.add(self.val(b)?)?;
        Ok(self.push(v, Op::Add(a.index, b.index)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.mul(self.val(b)?)?;
        Ok(self.push(v, Op::Mul(a.index, b.index)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.val(a)?.add_row(self.val(bias)?)?;
        Ok(self.push(v, Op::AddRow(a.index, bias.index)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?.relu();
        Ok(self.push(v, Op::Relu(a.index)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.val(a)?.scale(s)?;
        Ok(self.push(v, Op::Scale(a.index, s)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?.transpose()?;
        Ok(self.push(v, Op::Transpose(a.index)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?.softmax_rows()?;
        Ok(self.push(v, Op::Softmax(a.index)))
    }

    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        // Masked entries come out as exact zeros, so the plain softmax rule applies.
        let v = self.val(a)?.causal_softmax()?;
        Ok(self.push(v, Op::Softmax(a.index)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (v, xhat, inv_std) =
            self.val(x)?
                .layer_norm_parts(self.val(gamma)?, self.val(beta)?, eps)?;
        let op = Op::LayerNorm {
            x: x.index,
            gamma: gamma.index,
            beta: beta.index,
            xhat,
            inv_std,
        };
        Ok(self.push(v, op))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.val(a)?.slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols { src: a.index, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut idx = Vec::with_capacity(parts.len());
        for &p in parts {
            idx.push(self.idx(p)?);
        }
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let v = Tensor::concat_cols(&refs)?;
        Ok(self.push(v, Op::ConcatCols(idx)))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.val(table)?.gather_rows(ids)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                table: table.index,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a)?.sum();
        Ok(self.push(Tensor::scalar(s)?, Op::Sum(a.index)))
    }

    /// Summed cross-entropy of `(row, target)` pairs against rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let l = self.val(logits)?;
        if !l.is_matrix() {
            return Err(Error::shape("cross_entropy needs a logits matrix"));
        }
        let mut total = T::zero();
        for &(r, t) in targets {
            if r >= l.rows() || t >= l.cols() {
                return Err(Error::shape(format!(
                    "cross_entropy target ({r}, {t}) outside logits {:?}",
                    l.shape()
                )));
            }
            let row = l.row(r);
            total += log_sum_exp(row) - row[t];
        }
        let op = Op::CrossEntropy {
            logits: logits.index,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total)?, op))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::NotScalar(self.nodes[root].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::one()));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(n.value.shape())))
            .collect::<Vec<_>>();
        if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::GradientNaN);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let value = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul(&value(*b).transpose()?)?;
                let gb = value(*a).transpose()?.matmul(g)?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(value(*b))?);
                accumulate(grads, *b, g.mul(value(*a))?);
            }
            Op::AddRow(a, bias) => {
                accumulate(grads, *a, g.clone());
                let n = g.cols();
                let mut gb = vec![T::zero(); n];
                for r in 0..g.rows() {
                    for (dst, &v) in gb.iter_mut().zip(g.row(r)) {
                        *dst += v;
                    }
                }
                accumulate(grads, *bias, Tensor::from_parts(value(*bias).shape().to_vec(), gb));
            }
            Op::Relu(a) => {
                let x = value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)?),
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?),
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut out = vec![T::zero(); y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        out[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = value(*gamma);
                let d = xhat.cols();
                let dn = T::of(d as f64);
                let mut gx = vec![T::zero(); xhat.numel()];
                let mut gg = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for r in 0..xhat.rows() {
                    let hr = xhat.row(r);
                    let gr = g.row(r);
                    let mut dh = vec![T::zero(); d];
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        dh[j] = gr[j] * gam.data()[j];
                    }
                    let sum_dh: T = dh.iter().copied().sum();
                    let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] =
                            inv_std[r] / dn * (dn * dh[j] - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(xhat.shape().to_vec(), gx));
                accumulate(grads, *gamma, Tensor::from_parts(gam.shape().to_vec(), gg));
                accumulate(
                    grads,
                    *beta,
                    Tensor::from_parts(value(*beta).shape().to_vec(), gbeta),
                );
            }
            Op::SliceCols { src, start } => {
                let s = value(*src);
                let n = s.cols();
                let w = g.cols();
                let mut out = vec![T::zero(); s.numel()];
                for r in 0..g.rows() {
                    out[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *src, Tensor::from_parts(s.shape().to_vec(), out));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = value(p).cols();
                    accumulate(grads, p, g.slice_cols(offset, w)?);
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let t = value(*table);
                let n = t.cols();
                let mut out = vec![T::zero(); t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, &v) in out[id * n..(id + 1) * n].iter_mut().zip(g.row(r)) {
                        *dst += v;
                    }
                }
                accumulate(grads, *table, Tensor::from_parts(t.shape().to_vec(), out));
            }
            Op::Sum(a) => {
                let x = value(*a);
                accumulate(grads, *a, Tensor::full(x.shape(), g.data()[0]));
            }
            Op::CrossEntropy { logits, targets } => {
                let l = value(*logits);
                let n = l.cols();
                let scale = g.data()[0];
                let mut out = vec![T::zero(); l.numel()];
                for &(r, t) in targets {
                    let p = softmax(l.row(r));
                    for j in 0..n {
                        out[r * n + j] += scale * p[j];
                    }
                    out[r * n + t] -= scale;
                }
                accumulate(grads, *logits, Tensor::from_parts(l.shape().to_vec(), out));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], at: usize, g: Tensor<T>) {
    match &mut grads[at] {
        Some(existing) => {
            for (dst, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                *dst += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn dot_product_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let xt = tape.transpose(x).unwrap();
        let loss = tape.matmul(xt, x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_values_get_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn foreign_values_are_detached() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.leaf(Tensor::scalar(1.0).unwrap());
        let y = b.leaf(Tensor::scalar(1.0).unwrap());
        assert!(matches!(b.sum(x), Err(Error::Detached)));
        let loss = b.sum(y).unwrap();
        assert!(matches!(a.backward(loss), Err(Error::Detached)));
        let g = b.backward(loss).unwrap();
        assert!(matches!(g.get(x), Err(Error::Detached)));
    }

    #[test]
    fn shared_inputs_accumulate() {
        // loss = sum(x + x) => gradient 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }
}
