//! JSON model documents.
//!
//! Weights are written as nested arrays of shortest round-trip decimals, so a
//! document survives serialize/deserialize/serialize byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlockParams, LayerNormParams, ModelConfig, ModelParams, TransformerModel};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const MODEL_FORMAT: &str = "layerlens-model/1";

type Matrix = Vec<Vec<f64>>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format: String,
    config: ModelConfig,
    embedding: Matrix,
    positional: Matrix,
    blocks: Vec<BlockDoc>,
    head: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    block_origin: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDoc {
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    w_o: Matrix,
    w_1: Matrix,
    b_1: Vec<f64>,
    w_2: Matrix,
    b_2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ln1_gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ln1_beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ln2_gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ln2_beta: Option<Vec<f64>>,
}

fn matrix_doc<T: Scalar>(t: &Tensor<T>) -> Matrix {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn vector_doc<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn matrix_from<T: Scalar>(m: &Matrix, path: &str) -> Result<Tensor<T>> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || m.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape(format!("{path} is empty or ragged")));
    }
    let data = m.iter().flatten().map(|&v| T::of(v)).collect();
    Tensor::matrix(rows, cols, data).map_err(|e| located(e, path))
}

fn vector_from<T: Scalar>(v: &[f64], path: &str) -> Result<Tensor<T>> {
    Tensor::vector(v.iter().map(|&x| T::of(x)).collect()).map_err(|e| located(e, path))
}

fn located(e: Error, path: &str) -> Error {
    match e {
        Error::NonFinite(_) => Error::NonFinite(path.to_string()),
        Error::Shape(m) => Error::Shape(format!("{path}: {m}")),
        other => other,
    }
}

fn ln_from<T: Scalar>(
    gamma: &Option<Vec<f64>>,
    beta: &Option<Vec<f64>>,
    path: &str,
    which: &str,
) -> Result<Option<LayerNormParams<Tensor<T>>>> {
    match (gamma, beta) {
        (None, None) => Ok(None),
        (Some(g), Some(b)) => Ok(Some(LayerNormParams {
            gamma: vector_from(g, &format!("{path}.{which}_gamma"))?,
            beta: vector_from(b, &format!("{path}.{which}_beta"))?,
        })),
        _ => Err(Error::Schema {
            path: format!("{path}.{which}"),
            message: "gamma and beta must appear together".into(),
        }),
    }
}

impl<T: Scalar> TransformerModel<T> {
    pub fn to_json(&self) -> String {
        let p = &self.params;
        let blocks = p
            .blocks
            .iter()
            .map(|b| BlockDoc {
                w_q: matrix_doc(&b.w_q),
                w_k: matrix_doc(&b.w_k),
                w_v: matrix_doc(&b.w_v),
                w_o: matrix_doc(&b.w_o),
                w_1: matrix_doc(&b.w_1),
                b_1: vector_doc(&b.b_1),
                w_2: matrix_doc(&b.w_2),
                b_2: vector_doc(&b.b_2),
                ln1_gamma: b.ln1.as_ref().map(|l| vector_doc(&l.gamma)),
                ln1_beta: b.ln1.as_ref().map(|l| vector_doc(&l.beta)),
                ln2_gamma: b.ln2.as_ref().map(|l| vector_doc(&l.gamma)),
                ln2_beta: b.ln2.as_ref().map(|l| vector_doc(&l.beta)),
            })
            .collect();
        let identity = self.origin.iter().copied().eq(0..self.origin.len());
        let doc = ModelDoc {
            format: MODEL_FORMAT.to_string(),
            config: self.config.clone(),
            embedding: matrix_doc(&p.embedding),
            positional: matrix_doc(&p.positional),
            blocks,
            head: matrix_doc(&p.head),
            block_origin: (!identity).then(|| self.origin.clone()),
        };
        let mut s = serde_json::to_string(&doc).expect("model documents always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let doc: ModelDoc = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if doc.format != MODEL_FORMAT {
            return Err(Error::Schema {
                path: "format".into(),
                message: format!("expected {MODEL_FORMAT:?}, found {:?}", doc.format),
            });
        }
        let mut blocks = Vec::with_capacity(doc.blocks.len());
        for (i, b) in doc.blocks.iter().enumerate() {
            let at = format!("blocks[{i}]");
            let m = |x: &Matrix, n: &str| matrix_from::<T>(x, &format!("{at}.{n}"));
            let v = |x: &[f64], n: &str| vector_from::<T>(x, &format!("{at}.{n}"));
            blocks.push(BlockParams {
                w_q: m(&b.w_q, "w_q")?,
                w_k: m(&b.w_k, "w_k")?,
                w_v: m(&b.w_v, "w_v")?,
                w_o: m(&b.w_o, "w_o")?,
                w_1: m(&b.w_1, "w_1")?,
                b_1: v(&b.b_1, "b_1")?,
                w_2: m(&b.w_2, "w_2")?,
                b_2: v(&b.b_2, "b_2")?,
                ln1: ln_from(&b.ln1_gamma, &b.ln1_beta, &at, "ln1")?,
                ln2: ln_from(&b.ln2_gamma, &b.ln2_beta, &at, "ln2")?,
            });
        }
        let params = ModelParams {
            embedding: matrix_from(&doc.embedding, "embedding")?,
            positional: matrix_from(&doc.positional, "positional")?,
            blocks,
            head: matrix_from(&doc.head, "head")?,
        };
        let origin = doc
            .block_origin
            .unwrap_or_else(|| (0..params.blocks.len()).collect());
        Self::with_origin(doc.config, params, origin)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
