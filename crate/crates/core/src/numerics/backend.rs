use std::borrow::Cow;
use std::marker::PhantomData;

use crate::error::Result;

use super::{Scalar, Tape, Tensor, Var};

/// Operations the transformer forward pass is written against.
///
/// [`Eager`] evaluates directly on borrowed tensors with no recording;
/// [`Tape`] records every step for a later backward sweep.
pub trait Backend<T: Scalar> {
    type V: Clone;

    fn value<'s>(&'s self, v: &'s Self::V) -> &'s Tensor<T>;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_row(&mut self, a: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn relu(&mut self, a: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: T) -> Result<Self::V>;
    fn transpose(&mut self, a: &Self::V) -> Result<Self::V>;
    fn causal_softmax(&mut self, a: &Self::V) -> Result<Self::V>;
    fn layer_norm(&mut self, x: &Self::V, g: &Self::V, b: &Self::V, eps: T) -> Result<Self::V>;
    fn slice_cols(&mut self, a: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn gather_rows(&mut self, table: &Self::V, ids: &[usize]) -> Result<Self::V>;
}

/// Tape-free evaluation; values borrow weights and own intermediates.
#[derive(Debug, Default)]
pub struct Eager<'a, T>(PhantomData<&'a T>);

impl<'a, T> Eager<'a, T> {
    pub fn new() -> Self {
        Self(PhantomData)
    }
}

type Val<'a, T> = Cow<'a, Tensor<T>>;

impl<'a, T: Scalar> Backend<T> for Eager<'a, T> {
    type V = Val<'a, T>;

    fn value<'s>(&'s self, v: &'s Self::V) -> &'s Tensor<T> {
        v
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(a.matmul(b)?))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(a.add(b)?))
    }

    fn add_row(&mut self, a: &Self::V, bias: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(a.add_row(bias)?))
    }

    fn relu(&mut self, a: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(a.relu()))
    }

    fn scale(&mut self, a: &Self::V, s: T) -> Result<Self::V> {
        Ok(Cow::Owned(a.scale(s)?))
    }

    fn transpose(&mut self, a: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(a.transpose()?))
    }

    fn causal_softmax(&mut self, a: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(a.causal_softmax()?))
    }

    fn layer_norm(&mut self, x: &Self::V, g: &Self::V, b: &Self::V, eps: T) -> Result<Self::V> {
        Ok(Cow::Owned(x.layer_norm(g, b, eps)?))
    }

    fn slice_cols(&mut self, a: &Self::V, start: usize, len: usize) -> Result<Self::V> {
        Ok(Cow::Owned(a.slice_cols(start, len)?))
    }

    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| p.as_ref()).collect();
        Ok(Cow::Owned(Tensor::concat_cols(&refs)?))
    }

    fn gather_rows(&mut self, table: &Self::V, ids: &[usize]) -> Result<Self::V> {
        Ok(Cow::Owned(table.gather_rows(ids)?))
    }
}

impl<T: Scalar> Backend<T> for Tape<T> {
    type V = Var;

    fn value<'s>(&'s self, v: &'s Var) -> &'s Tensor<T> {
        Tape::value(self, *v).expect("vars passed to a tape backend belong to it")
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::matmul(self, *a, *b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn add_row(&mut self, a: &Var, bias: &Var) -> Result<Var> {
        Tape::add_row(self, *a, *bias)
    }

    fn relu(&mut self, a: &Var) -> Result<Var> {
        Tape::relu(self, *a)
    }

    fn scale(&mut self, a: &Var, s: T) -> Result<Var> {
        Tape::scale(self, *a, s)
    }

    fn transpose(&mut self, a: &Var) -> Result<Var> {
        Tape::transpose(self, *a)
    }

    fn causal_softmax(&mut self, a: &Var) -> Result<Var> {
        Tape::causal_softmax(self, *a)
    }

    fn layer_norm(&mut self, x: &Var, g: &Var, b: &Var, eps: T) -> Result<Var> {
        Tape::layer_norm(self, *x, *g, *b, eps)
    }

    fn slice_cols(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        Tape::slice_cols(self, *a, start, len)
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        Tape::concat_cols(self, parts)
    }

    fn gather_rows(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        Tape::gather_rows(self, *table, ids)
    }
}
