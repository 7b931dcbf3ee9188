//! Layer relevance metrics and the evaluators they share.
//!
//! Work is spread over instances with rayon; partial results are always
//! collected in instance order before reducing, so scores do not depend on
//! the thread count.

mod report;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{fnv_id, RelevanceReport, REPORT_FORMAT};

use crate::error::{Error, Result};
use crate::model::{HeadKind, PassCounter, TransformerModel};
use crate::numerics::{cosine, log_sum_exp, softmax, Scalar};
use crate::rng;
use crate::tasks::{Baseline, CalibrationDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Cosine,
    Accuracy,
    Perplexity,
    OutCosine,
    OutNorm,
    OutJs,
    Taylor,
    Random,
}

impl MetricKind {
    pub const ALL: [MetricKind; 8] = [
        MetricKind::Cosine,
        MetricKind::Accuracy,
        MetricKind::Perplexity,
        MetricKind::OutCosine,
        MetricKind::OutNorm,
        MetricKind::OutJs,
        MetricKind::Taylor,
        MetricKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Cosine => "cosine",
            MetricKind::Accuracy => "accuracy",
            MetricKind::Perplexity => "perplexity",
            MetricKind::OutCosine => "out_cosine",
            MetricKind::OutNorm => "out_norm",
            MetricKind::OutJs => "out_js",
            MetricKind::Taylor => "taylor",
            MetricKind::Random => "random",
        }
    }

    /// Every metric here is oriented so that a larger score means the block matters more.
    pub fn higher_means_more_relevant(self) -> bool {
        true
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

/// Output comparison used by the output-similarity baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputVariant {
    Cosine,
    Norm,
    Js,
}

impl OutputVariant {
    pub fn metric(self) -> MetricKind {
        match self {
            OutputVariant::Cosine => MetricKind::OutCosine,
            OutputVariant::Norm => MetricKind::OutNorm,
            OutputVariant::Js => MetricKind::OutJs,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ScoreOptions {
    pub baseline: Baseline,
    /// Seed for RANDOM scores.
    pub seed: u64,
}

fn nonempty(d: &CalibrationDataset) -> Result<()> {
    if d.is_empty() {
        Err(Error::EmptyDataset)
    } else {
        Ok(())
    }
}

/// Mean in index order.
fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-instance map, collected in order.
fn per_instance<R: Send>(
    d: &CalibrationDataset,
    f: impl Fn(usize, &crate::tasks::Instance) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    d.instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| f(i, inst))
        .collect()
}

/// Fraction of instances whose restricted argmax is the correct option.
pub fn evaluate_accuracy<T: Scalar>(
    model: &TransformerModel<T>,
    d: &CalibrationDataset,
    counter: &PassCounter,
) -> Result<f64> {
    nonempty(d)?;
    let hits = per_instance(d, |_, inst| {
        Ok(model.predict(&inst.tokens, Some(&inst.options), counter)? == inst.answer())
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Next-token targets of an instance: each following prompt token, then the answer.
pub fn lm_targets(inst: &crate::tasks::Instance) -> Vec<(usize, usize)> {
    let n = inst.tokens.len();
    (0..n)
        .map(|j| (j, if j + 1 < n { inst.tokens[j + 1] } else { inst.answer() }))
        .collect()
}

fn require_lm<T: Scalar>(model: &TransformerModel<T>) -> Result<()> {
    match model.config().head {
        HeadKind::LmUnembedding => Ok(()),
        HeadKind::Classifier { .. } => Err(Error::WrongHead(
            "perplexity needs a language-model head".into(),
        )),
    }
}

/// exp of the mean next-token negative log-likelihood, pooled over all
/// positions of all instances.
pub fn evaluate_perplexity<T: Scalar>(
    model: &TransformerModel<T>,
    d: &CalibrationDataset,
    counter: &PassCounter,
) -> Result<f64> {
    require_lm(model)?;
    nonempty(d)?;
    let parts = per_instance(d, |_, inst| {
        let out = model.forward(&inst.tokens, false, counter)?;
        let mut nll = 0.0;
        let targets = lm_targets(inst);
        for &(j, t) in &targets {
            let row: Vec<f64> = out.logits.row(j).iter().map(|v| v.as_f64()).collect();
            if t >= row.len() {
                return Err(Error::TokenOutOfVocab { token: t, vocab: row.len() });
            }
            nll += log_sum_exp(&row) - row[t];
        }
        Ok((nll, targets.len()))
    })?;
    let (nll, count) = parts
        .iter()
        .fold((0.0, 0usize), |(a, n), &(b, m)| (a + b, n + m));
    Ok((nll / count as f64).exp())
}

/// Normalized accuracy loss: 1 − max(acc_pruned − r, 0) / max(acc − r, 0).
pub fn acc_relevance(accuracy: f64, pruned_accuracy: f64, baseline: f64) -> Result<f64> {
    if accuracy <= baseline {
        return Err(Error::IllDefined { accuracy, baseline });
    }
    Ok(1.0 - (pruned_accuracy - baseline).max(0.0) / (accuracy - baseline))
}

/// Cosine change score per layer: for each instance the token-mean of
/// 1 − cos(X^l, X^(l+1)), then the instance mean. One forward pass per instance.
pub fn cos_sim_score<T: Scalar>(
    model: &TransformerModel<T>,
    d: &CalibrationDataset,
    counter: &PassCounter,
) -> Result<Vec<f64>> {
    nonempty(d)?;
    let layers = model.n_layers();
    let rows = per_instance(d, |i, inst| {
        let trace = model
            .forward(&inst.tokens, true, counter)?
            .trace
            .expect("capture requested");
        (0..layers)
            .map(|l| {
                let (x, y) = (trace.state(l), trace.state(l + 1));
                let n = x.rows();
                let mut total = 0.0;
                for j in 0..n {
                    let c = cosine(x.row(j), y.row(j)).ok_or(Error::ZeroNorm {
                        layer: l,
                        instance: i,
                        position: j,
                    })?;
                    if x.row(j) != y.row(j) {
                        total += 1.0 - c.as_f64();
                    }
                }
                Ok(total / n as f64)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok((0..layers)
        .map(|l| mean(&rows.iter().map(|r| r[l]).collect::<Vec<_>>()))
        .collect())
}

/// Jensen-Shannon divergence in nats, with a 1e-12 floor inside the logs.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-12;
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * ((x + FLOOR) / (y + FLOOR)).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

struct LastOutputs {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn last_outputs<T: Scalar>(
    model: &TransformerModel<T>,
    d: &CalibrationDataset,
    counter: &PassCounter,
) -> Result<Vec<LastOutputs>> {
    per_instance(d, |_, inst| {
        let out = model.forward(&inst.tokens, false, counter)?;
        Ok(LastOutputs {
            hidden: out.last_hidden().iter().map(|v| v.as_f64()).collect(),
            logits: out.last_logits().iter().map(|v| v.as_f64()).collect(),
        })
    })
}

fn compare_outputs(
    full: &[LastOutputs],
    pruned: &[LastOutputs],
    variant: OutputVariant,
    layer: usize,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(full.len());
    for (i, (a, b)) in full.iter().zip(pruned).enumerate() {
        let zero = Error::ZeroNorm {
            layer,
            instance: i,
            position: a.hidden.len().saturating_sub(1),
        };
        scores.push(match variant {
            OutputVariant::Cosine => 1.0 - cosine(&a.hidden, &b.hidden).ok_or(zero)?,
            OutputVariant::Norm => {
                let norm = a.hidden.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(zero);
                }
                let diff = a
                    .hidden
                    .iter()
                    .zip(&b.hidden)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                diff / norm
            }
            OutputVariant::Js => js_divergence(&softmax(&a.logits), &softmax(&b.logits)),
        });
    }
    Ok(mean(&scores))
}

/// Output dissimilarity between the full model and the model without block `l`,
/// measured at the last position.
pub fn output_similarity<T: Scalar>(
    model: &TransformerModel<T>,
    l: usize,
    d: &CalibrationDataset,
    variant: OutputVariant,
    counter: &PassCounter,
) -> Result<f64> {
    nonempty(d)?;
    let pruned = model.remove_layer(l)?;
    let full = last_outputs(model, d, counter)?;
    let cut = last_outputs(&pruned, d, counter)?;
    compare_outputs(&full, &cut, variant, l)
}

/// ACCURACY relevance of a single block.
pub fn acc_based_relevance<T: Scalar>(
    model: &TransformerModel<T>,
    l: usize,
    d: &CalibrationDataset,
    counter: &PassCounter,
) -> Result<f64> {
    let pruned = model.remove_layer(l)?;
    let r = d.random_baseline()?;
    let acc = evaluate_accuracy(model, d, counter)?;
    if acc <= r {
        return Err(Error::IllDefined { accuracy: acc, baseline: r });
    }
    acc_relevance(acc, evaluate_accuracy(&pruned, d, counter)?, r)
}

/// PPL without block `l` minus PPL of the full model.
pub fn perplexity_relevance<T: Scalar>(
    model: &TransformerModel<T>,
    l: usize,
    d: &CalibrationDataset,
    counter: &PassCounter,
) -> Result<f64> {
    require_lm(model)?;
    let pruned = model.remove_layer(l)?;
    Ok(evaluate_perplexity(&pruned, d, counter)? - evaluate_perplexity(model, d, counter)?)
}

/// Σ |w · ∂L/∂w| over each block's weights, with the last-position answer
/// cross-entropy summed over the dataset, so gradients add up across
/// instances before the product is taken. One forward and one backward pass
/// per instance covers every layer.
pub fn taylor_scores<T: Scalar>(
    model: &TransformerModel<T>,
    d: &CalibrationDataset,
    counter: &PassCounter,
) -> Result<Vec<f64>> {
    nonempty(d)?;
    let grads = per_instance(d, |_, inst| {
        let last = inst.tokens.len() - 1;
        let (_, g) = model.loss_and_gradient(&inst.tokens, &[(last, inst.answer())], counter)?;
        Ok(g.blocks)
    })?;
    let mut scores = Vec::with_capacity(model.n_layers());
    for l in 0..model.n_layers() {
        let weights = model.block(l).named();
        let mut total = 0.0;
        for (k, (_, w)) in weights.iter().enumerate() {
            // accumulate ∂L/∂w over the dataset first, then weigh by w
            let mut g = vec![0.0; w.numel()];
            for per in &grads {
                for (acc, v) in g.iter_mut().zip(per[l].named()[k].1.data()) {
                    *acc += v.as_f64();
                }
            }
            total += w
                .data()
                .iter()
                .zip(&g)
                .map(|(a, b)| (a.as_f64() * b).abs())
                .sum::<f64>();
        }
        scores.push(total);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::GradientNaN);
    }
    Ok(scores)
}

/// Taylor relevance of a single block.
pub fn taylor_relevance<T: Scalar>(
    model: &TransformerModel<T>,
    l: usize,
    d: &CalibrationDataset,
    counter: &PassCounter,
) -> Result<f64> {
    if l >= model.n_layers() {
        return Err(Error::LayerIndex { index: l, layers: model.n_layers() });
    }
    Ok(taylor_scores(model, d, counter)?[l])
}

/// Scores every block under `metric`.
pub fn score_all<T: Scalar>(
    model: &TransformerModel<T>,
    d: &CalibrationDataset,
    metric: MetricKind,
    opts: &ScoreOptions,
) -> Result<RelevanceReport> {
    let counter = PassCounter::new();
    let layers = model.n_layers();
    let mut raw_acc_drop = None;
    let mut full_accuracy = None;
    let mut baseline = None;
    let scores = match metric {
        MetricKind::Cosine => cos_sim_score(model, d, &counter)?,
        MetricKind::Accuracy => {
            let r = d.random_baseline_with(opts.baseline)?;
            let acc = evaluate_accuracy(model, d, &counter)?;
            if acc <= r {
                return Err(Error::IllDefined { accuracy: acc, baseline: r });
            }
            let pruned = (0..layers)
                .into_par_iter()
                .map(|l| evaluate_accuracy(&model.remove_layer(l)?, d, &counter))
                .collect::<Result<Vec<f64>>>()?;
            raw_acc_drop = Some(pruned.iter().map(|p| acc - p).collect());
            full_accuracy = Some(acc);
            baseline = Some(r);
            pruned
                .iter()
                .map(|&p| acc_relevance(acc, p, r))
                .collect::<Result<Vec<f64>>>()?
        }
        MetricKind::Perplexity => {
            let full = evaluate_perplexity(model, d, &counter)?;
            (0..layers)
                .into_par_iter()
                .map(|l| Ok(evaluate_perplexity(&model.remove_layer(l)?, d, &counter)? - full))
                .collect::<Result<Vec<f64>>>()?
        }
        MetricKind::OutCosine | MetricKind::OutNorm | MetricKind::OutJs => {
            let variant = match metric {
                MetricKind::OutCosine => OutputVariant::Cosine,
                MetricKind::OutNorm => OutputVariant::Norm,
                _ => OutputVariant::Js,
            };
            nonempty(d)?;
            let full = last_outputs(model, d, &counter)?;
            (0..layers)
                .into_par_iter()
                .map(|l| {
                    let cut = last_outputs(&model.remove_layer(l)?, d, &counter)?;
                    compare_outputs(&full, &cut, variant, l)
                })
                .collect::<Result<Vec<f64>>>()?
        }
        MetricKind::Taylor => taylor_scores(model, d, &counter)?,
        MetricKind::Random => {
            let mut r = rng::seeded(opts.seed);
            (0..layers).map(|_| r.random::<f64>()).collect()
        }
    };
    Ok(RelevanceReport {
        metric,
        scores,
        origin: model.origin().to_vec(),
        raw_acc_drop,
        full_accuracy,
        baseline,
        passes: counter.counts(),
        dataset_id: d.name.clone(),
        model_id: fnv_id(model.to_json().as_bytes()),
        higher_means_more_relevant: metric.higher_means_more_relevant(),
    })
}
