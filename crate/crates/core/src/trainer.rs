//! Adam training of toy models, checkpoint series, and post-pruning healing.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_accuracy, lm_targets};
use crate::model::{ModelConfig, ModelParams, PassCounter, TransformerModel};
use crate::numerics::{Scalar, Tensor};
use crate::rng;
use crate::tasks::CalibrationDataset;

pub const SERIES_FORMAT: &str = "layerlens-series/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Record a checkpoint every this many steps; 0 records only the start and end.
    pub checkpoint_every: usize,
    /// Next-token loss at every position instead of the answer token only.
    pub all_tokens: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
            all_tokens: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub step: usize,
    pub model: TransformerModel<T>,
    pub train_accuracy: f64,
}

/// Checkpoints in strictly increasing step order.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSeries<T> {
    pub checkpoints: Vec<Checkpoint<T>>,
    /// Mean batch loss after each step.
    pub losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SeriesRow {
    step: usize,
    train_acc: f64,
}

impl<T: Scalar> CheckpointSeries<T> {
    /// Writes `ckpt_<step>.json` per checkpoint and `series.csv`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut file = std::fs::File::create(dir.join("series.csv"))?;
        writeln!(file, "# {SERIES_FORMAT}")?;
        let mut w = csv::Writer::from_writer(file);
        for c in &self.checkpoints {
            c.model.save(dir.join(format!("ckpt_{}.json", c.step)))?;
            w.serialize(SeriesRow {
                step: c.step,
                train_acc: c.train_accuracy,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut checkpoints: Vec<Checkpoint<T>> = Vec::new();
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(dir.join("series.csv"))?;
        for row in reader.deserialize() {
            let row: SeriesRow = row?;
            if checkpoints.last().is_some_and(|c| c.step >= row.step) {
                return Err(Error::Schema {
                    path: "series.csv".into(),
                    message: "steps must strictly increase".into(),
                });
            }
            checkpoints.push(Checkpoint {
                step: row.step,
                model: TransformerModel::load(dir.join(format!("ckpt_{}.json", row.step)))?,
                train_accuracy: row.train_acc,
            });
        }
        Ok(Self {
            checkpoints,
            losses: Vec::new(),
        })
    }
}

struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(params: &ModelParams<Tensor<T>>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams<Tensor<T>>, grads: &[Vec<T>], hp: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::of(hp.learning_rate), T::of(hp.adam_eps));
        for (k, w) in params.tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in w.data_mut().iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Mean loss and mean gradient over one batch. Instances run in parallel;
/// the sum is taken in batch order.
fn batch_gradient<T: Scalar>(
    model: &TransformerModel<T>,
    data: &CalibrationDataset,
    batch: &[usize],
    hp: &TrainConfig,
) -> Result<(f64, Vec<Vec<T>>)> {
    let counter = PassCounter::new();
    let parts = batch
        .par_iter()
        .map(|&i| {
            let inst = &data.instances[i];
            let targets = if hp.all_tokens {
                lm_targets(inst)
            } else {
                vec![(inst.tokens.len() - 1, inst.answer())]
            };
            model.loss_and_gradient(&inst.tokens, &targets, &counter)
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = T::of(1.0 / batch.len() as f64);
    let mut loss = 0.0;
    let mut sum: Vec<Vec<T>> = model
        .params()
        .tensors()
        .iter()
        .map(|t| vec![T::zero(); t.numel()])
        .collect();
    for (l, g) in &parts {
        loss += l.as_f64();
        for (acc, t) in sum.iter_mut().zip(g.tensors()) {
            for (a, b) in acc.iter_mut().zip(t.data()) {
                *a += *b;
            }
        }
    }
    for v in sum.iter_mut().flatten() {
        *v *= scale;
    }
    Ok((loss / batch.len() as f64, sum))
}

fn clip<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) {
    if max_norm == 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

fn accuracy<T: Scalar>(model: &TransformerModel<T>, data: &CalibrationDataset) -> Result<f64> {
    evaluate_accuracy(model, data, &PassCounter::new())
}

/// Runs `epochs` epochs of Adam on `model`. `on_step` sees the step index
/// (1-based) and the model after each update.
fn optimize<T: Scalar>(
    model: &mut TransformerModel<T>,
    data: &CalibrationDataset,
    hp: &TrainConfig,
    epochs: usize,
    mut on_epoch: impl FnMut(&TransformerModel<T>) -> Result<()>,
    mut on_step: impl FnMut(usize, f64, &TransformerModel<T>) -> Result<()>,
) -> Result<()> {
    hp.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order_rng = rng::derive(hp.seed, 1);
    let mut adam = Adam::new(model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(hp.batch_size) {
            step += 1;
            let (loss, mut grads) = match batch_gradient(model, data, batch, hp) {
                Err(Error::GradientNaN | Error::NonFinite(_)) => return Err(Error::Diverged { step }),
                other => other?,
            };
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step });
            }
            clip(&mut grads, hp.grad_clip);
            adam.step(model.params_mut(), &grads, hp);
            if model.params().tensors().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { step });
            }
            on_step(step, loss, model)?;
        }
        on_epoch(model)?;
    }
    Ok(())
}

/// Trains a fresh model (initialized from `hyper.seed`) on `data`.
pub fn train<T: Scalar>(
    config: ModelConfig,
    data: &CalibrationDataset,
    hyper: &TrainConfig,
) -> Result<(TransformerModel<T>, CheckpointSeries<T>)> {
    let model = TransformerModel::init(config, rand::RngCore::next_u64(&mut rng::derive(hyper.seed, 0)))?;
    train_from(model, data, hyper)
}

/// Continues training an existing model.
pub fn train_from<T: Scalar>(
    mut model: TransformerModel<T>,
    data: &CalibrationDataset,
    hyper: &TrainConfig,
) -> Result<(TransformerModel<T>, CheckpointSeries<T>)> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(bad) = data
        .instances
        .iter()
        .flat_map(|i| i.options.iter())
        .find(|&&o| o >= model.config().head_width())
    {
        return Err(Error::Config(format!(
            "answer option {bad} is outside the head of width {}",
            model.config().head_width()
        )));
    }
    let mut checkpoints = vec![Checkpoint {
        step: 0,
        train_accuracy: accuracy(&model, data)?,
        model: model.clone(),
    }];
    let mut losses = Vec::new();
    let every = hyper.checkpoint_every;
    optimize(&mut model, data, hyper, hyper.epochs, |_| Ok(()), |step, loss, m| {
        losses.push(loss);
        if every > 0 && step % every == 0 {
            checkpoints.push(Checkpoint {
                step,
                train_accuracy: accuracy(m, data)?,
                model: m.clone(),
            });
        }
        Ok(())
    })?;
    let last = losses.len();
    if checkpoints.last().map(|c| c.step) != Some(last) {
        checkpoints.push(Checkpoint {
            step: last,
            train_accuracy: accuracy(&model, data)?,
            model: model.clone(),
        });
    }
    Ok((model, CheckpointSeries { checkpoints, losses }))
}

/// Fine-tunes every weight for `hyper.epochs` epochs and returns the model
/// from the epoch with the best accuracy on `data`, with the per-epoch curve.
/// Entry 0 of the curve is the input model, so healing never loses accuracy
/// on `data`; ties keep the earlier epoch.
pub fn heal<T: Scalar>(
    model: &TransformerModel<T>,
    data: &CalibrationDataset,
    hyper: &TrainConfig,
) -> Result<(TransformerModel<T>, Vec<f64>)> {
    hyper.validate()?;
    let start = accuracy(model, data)?;
    let mut curve = vec![start];
    let mut best = (start, model.clone());
    let mut current = model.clone();
    optimize(
        &mut current,
        data,
        hyper,
        hyper.epochs,
        |m| {
            let acc = accuracy(m, data)?;
            curve.push(acc);
            if acc > best.0 {
                best = (acc, m.clone());
            }
            Ok(())
        },
        |_, _, _| Ok(()),
    )?;
    Ok((best.1, curve))
}
