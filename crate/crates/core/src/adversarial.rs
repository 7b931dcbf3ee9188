//! Hand-built transformers whose lowest cosine-score block is the one that
//! carries the prediction.
//!
//! Every construction disables LayerNorm, zeroes the attention output
//! projection so attention contributes nothing, and writes each block's effect
//! through its feed-forward layer. Positional embeddings are zero, so all rows
//! of a hidden state are identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{cos_sim_score, evaluate_accuracy};
use crate::model::{HeadKind, ModelConfig, PassCounter};
use crate::Tensor;
use crate::tasks::{CalibrationDataset, Instance};
use crate::Model;

/// The block whose removal destroys accuracy.
pub const TARGET_LAYER: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSpec {
    /// Target cosine score of the critical block.
    pub epsilon: f64,
    pub delta: f64,
    pub n_classes: usize,
    /// For odd C, point the misleading signal at (y+1) mod C instead of C−1−y,
    /// which would coincide with y for the middle class.
    #[serde(default = "yes")]
    pub relabel_odd: bool,
    /// Binary construction only: spread M over this many irrelevant coordinates.
    #[serde(default = "one")]
    pub irrelevant_dims: usize,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl AdversarialSpec {
    pub fn new(epsilon: f64, delta: f64, n_classes: usize) -> Self {
        Self {
            epsilon,
            delta,
            n_classes,
            relabel_odd: true,
            irrelevant_dims: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::AdversarialSpec(format!("delta must be positive, got {}", self.delta)));
        }
        if self.n_classes < 2 {
            return Err(Error::AdversarialSpec("need at least 2 classes".into()));
        }
        if self.irrelevant_dims == 0 {
            return Err(Error::AdversarialSpec("irrelevant_dims must be at least 1".into()));
        }
        solve_m(self.delta, self.epsilon).map(|_| ())
    }

    pub fn m(&self) -> Result<f64> {
        solve_m(self.delta, self.epsilon)
    }

    /// Class that block 3 pushes instances of class `y` towards.
    pub fn misleading_class(&self, y: usize) -> usize {
        let c = self.n_classes;
        if self.relabel_odd && c % 2 == 1 {
            (y + 1) % c
        } else {
            c - 1 - y
        }
    }
}

/// Cosine score of the critical block as a function of M: 1 − √(δ²+M²)/√(2δ²+M²).
pub fn target_score(delta: f64, m: f64) -> f64 {
    let (d2, m2) = (delta * delta, m * m);
    1.0 - (d2 + m2).sqrt() / (2.0 * d2 + m2).sqrt()
}

/// The positive M at which the critical block scores exactly `epsilon`:
/// M² = δ²(2q − 1)/(1 − q) with q = (1 − ε)².
pub fn solve_m(delta: f64, epsilon: f64) -> Result<f64> {
    let q = (1.0 - epsilon).powi(2);
    if !(epsilon > 0.0 && q > 0.5 && epsilon < 1.0) {
        return Err(Error::EpsilonRange(epsilon));
    }
    Ok(delta * ((2.0 * q - 1.0) / (1.0 - q)).sqrt())
}

fn flat_config(n_layers: usize, d_model: usize, vocab: usize, max_seq: usize, classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(n_layers, d_model, 1, d_model, vocab, max_seq);
    cfg.use_layernorm = false;
    cfg.head = HeadKind::Classifier { n_classes: classes };
    cfg
}

fn vector(v: Vec<f64>) -> Tensor {
    Tensor::vector(v).expect("finite construction values")
}

/// A block whose residual update is ReLU(X)·w2 + b2.
fn set_ffn(model: &mut crate::model::ModelParams<Tensor>, l: usize, w2: Tensor, b2: Vec<f64>) {
    let b = &mut model.blocks[l];
    let d = b.w_1.rows();
    b.w_1 = Tensor::eye(d);
    b.b_1 = Tensor::zeros(&[d]);
    b.w_2 = w2;
    b.b_2 = vector(b2);
}

fn binary_layers(spec: &AdversarialSpec, inert: Option<f64>, vocab: usize, max_seq: usize) -> Result<Model> {
    spec.validate()?;
    let delta = spec.delta;
    let m = spec.m()?;
    if m <= 1.0 {
        return Err(Error::AdversarialSpec(format!(
            "binary construction needs M > 1, got {m} (raise delta)"
        )));
    }
    let k = spec.irrelevant_dims;
    let d = 2 + k;
    let per_dim = m / (k as f64).sqrt();
    let offset = usize::from(inert.is_some());
    let cfg = flat_config(3 + offset, d, vocab, max_seq, 2);
    let mut p = Model::zeros(cfg.clone())?.into_parts().1;

    let mut emb = vec![0.0; vocab * d];
    for t in 0..vocab {
        emb[t * d + 1] = delta;
    }
    p.embedding = Tensor::matrix(vocab, d, emb)?;
    let mut head = vec![0.0; d * 2];
    head[0] = 1.0;
    head[3] = 1.0;
    p.head = Tensor::matrix(d, 2, head)?;

    let irrelevant = |value: f64| -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[2..].iter_mut().for_each(|x| *x = value);
        v
    };
    if let Some(kick) = inert {
        let mut v = vec![0.0; d];
        v[2] = kick;
        set_ffn(&mut p, 0, Tensor::zeros(&[d, d]), v);
    }
    set_ffn(&mut p, offset, Tensor::zeros(&[d, d]), irrelevant(per_dim));
    let mut shift = vec![0.0; d];
    shift[0] = delta;
    set_ffn(&mut p, offset + 1, Tensor::zeros(&[d, d]), shift);
    // coordinate 0 carries δ into block 3, which grows it to δM
    let mut w2 = Tensor::zeros(&[d, d]);
    w2.set_flat(0, m - 1.0)?;
    set_ffn(&mut p, offset + 2, w2, irrelevant(-per_dim));
    Model::new(cfg, p)
}

fn relabel_zero(d: &CalibrationDataset, suffix: &str) -> Result<CalibrationDataset> {
    let instances = d
        .instances
        .iter()
        .map(|i| Instance {
            tokens: i.tokens.clone(),
            label: 0,
            options: vec![0, 1],
        })
        .collect();
    CalibrationDataset::new(format!("{}-{suffix}", d.name), d.split, 2, instances)
}

fn vocab_of(d: &CalibrationDataset) -> Result<usize> {
    d.instances
        .iter()
        .flat_map(|i| i.tokens.iter().copied())
        .max()
        .map(|t| t + 1)
        .ok_or(Error::EmptyDataset)
}

/// Three-block model on which every sequence of `d` is class 0, and removing
/// the middle block flips every prediction to class 1. Returns the model with
/// `d` relabeled to all-zero labels over options {0, 1}.
pub fn build_binary(d: &CalibrationDataset, spec: &AdversarialSpec) -> Result<(Model, CalibrationDataset)> {
    if spec.n_classes != 2 {
        return Err(Error::AdversarialSpec("binary construction has exactly 2 classes".into()));
    }
    let model = binary_layers(spec, None, vocab_of(d)?, d.max_len())?;
    Ok((model, relabel_zero(d, "binary")?))
}

/// The binary construction behind an extra first block that adds `kick` to an
/// irrelevant coordinate: removing it changes no prediction, yet its cosine
/// score stays above the critical block's.
pub fn build_binary_with_inert(
    d: &CalibrationDataset,
    spec: &AdversarialSpec,
    kick: f64,
) -> Result<(Model, CalibrationDataset)> {
    if spec.n_classes != 2 {
        return Err(Error::AdversarialSpec("binary construction has exactly 2 classes".into()));
    }
    let model = binary_layers(spec, Some(kick), vocab_of(d)?, d.max_len())?;
    Ok((model, relabel_zero(d, "binary-inert")?))
}

/// Three-block model of width 2C+1 that memorizes the labels of `d` and
/// mispredicts every instance once the middle block is removed.
///
/// Sequences are retokenized to one token each (token i for instance i); the
/// returned dataset carries those tokens, the original labels and options 0..C.
pub fn build_multiclass(d: &CalibrationDataset, spec: &AdversarialSpec) -> Result<(Model, CalibrationDataset)> {
    spec.validate()?;
    let c = spec.n_classes;
    if d.n_classes != c {
        return Err(Error::AdversarialSpec(format!(
            "dataset has {} classes, spec has {c}",
            d.n_classes
        )));
    }
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some((first, second)) = d.find_duplicate() {
        return Err(Error::DuplicateSequence { first, second });
    }
    let (delta, m) = (spec.delta, spec.m()?);
    if m <= delta {
        return Err(Error::AdversarialSpec(format!("need M > delta, got M = {m}")));
    }
    let dim = 2 * c + 1;
    let bias_at = c;
    let slot = |y: usize| c + 1 + y;
    let n = d.len();
    let cfg = flat_config(3, dim, n, 1, c);
    let mut p = Model::zeros(cfg.clone())?.into_parts().1;

    let mut emb = vec![0.0; n * dim];
    for (i, inst) in d.instances.iter().enumerate() {
        emb[i * dim + slot(inst.label)] = delta;
    }
    p.embedding = Tensor::matrix(n, dim, emb)?;
    let mut head = vec![0.0; dim * c];
    for y in 0..c {
        head[y * c + y] = 1.0;
    }
    p.head = Tensor::matrix(dim, c, head)?;

    let mut b = vec![0.0; dim];
    b[bias_at] = m;
    set_ffn(&mut p, 0, Tensor::zeros(&[dim, dim]), b);

    let mut w2 = vec![0.0; dim * dim];
    for y in 0..c {
        w2[slot(y) * dim + y] = 1.0;
    }
    set_ffn(&mut p, 1, Tensor::matrix(dim, dim, w2)?, vec![0.0; dim]);

    let mut w2 = vec![0.0; dim * dim];
    for y in 0..c {
        w2[y * dim + y] = (m - delta) / delta;
        w2[slot(y) * dim + spec.misleading_class(y)] = 1.0;
    }
    let mut b = vec![0.0; dim];
    b[bias_at] = -m;
    set_ffn(&mut p, 2, Tensor::matrix(dim, dim, w2)?, b);

    let instances = d
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| Instance {
            tokens: vec![i],
            label: inst.label,
            options: (0..c).collect(),
        })
        .collect();
    let retok = CalibrationDataset::new(format!("{}-retok", d.name), d.split, c, instances)?;
    Ok((Model::new(cfg, p)?, retok))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub epsilon: f64,
    pub delta: f64,
    pub m: f64,
    pub n_classes: usize,
    pub target_layer: usize,
    pub scores: Vec<f64>,
    pub full_accuracy: f64,
    pub pruned_accuracy: f64,
    pub conditions: Vec<Condition>,
    pub passed: bool,
}

impl Certificate {
    pub fn failed(&self) -> Vec<&str> {
        self.conditions
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificates always serialize")
    }
}

pub const SCORE_TOLERANCE: f64 = 1e-6;

/// Measures the three conditions on a built model: the critical block scores
/// ε and strictly lowest, the full model is perfect, and the pruned model is
/// always wrong. A violated condition yields a failed certificate, not an error.
pub fn verify(model: &Model, d: &CalibrationDataset, spec: &AdversarialSpec) -> Result<Certificate> {
    let counter = PassCounter::new();
    let scores = cos_sim_score(model, d, &counter)?;
    let target = model.n_layers() - 2;
    let full = evaluate_accuracy(model, d, &counter)?;
    let pruned = evaluate_accuracy(&model.remove_layer(target)?, d, &counter)?;
    let s = scores[target];
    let strictly_min = scores
        .iter()
        .enumerate()
        .all(|(l, &x)| l == target || x > s);
    let conditions = vec![
        Condition {
            name: "target_score".into(),
            passed: (s - spec.epsilon).abs() <= SCORE_TOLERANCE && strictly_min,
            detail: format!(
                "layer {target} scores {s:.12} (target {}), strictly minimal: {strictly_min}",
                spec.epsilon
            ),
        },
        Condition {
            name: "full_accuracy".into(),
            passed: full == 1.0,
            detail: format!("full accuracy {full}"),
        },
        Condition {
            name: "pruned_accuracy".into(),
            passed: pruned == 0.0,
            detail: format!("accuracy without layer {target}: {pruned}"),
        },
    ];
    Ok(Certificate {
        epsilon: spec.epsilon,
        delta: spec.delta,
        m: spec.m()?,
        n_classes: spec.n_classes,
        target_layer: target,
        scores,
        full_accuracy: full,
        pruned_accuracy: pruned,
        passed: conditions.iter().all(|c| c.passed),
        conditions,
    })
}
