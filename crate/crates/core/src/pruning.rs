//! Block pruning guided by any relevance metric.

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{ColorScale, HeatmapMatrix};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_accuracy, score_all, MetricKind, RelevanceReport, ScoreOptions};
use crate::model::{PassCounter, TransformerModel};
use crate::numerics::Scalar;
use crate::tasks::{Baseline, CalibrationDataset};

pub const TRACE_FORMAT: &str = "layerlens-trace/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    OneShot,
    Iterative,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "oneshot" => Ok(Strategy::OneShot),
            "iterative" => Ok(Strategy::Iterative),
            _ => Err(Error::Config(format!("unknown strategy {s:?}"))),
        }
    }
}

/// How many blocks to remove.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Amount {
    /// Fraction of the model's blocks, rounded down.
    Ratio(f64),
    Layers(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub metric: MetricKind,
    pub strategy: Strategy,
    pub amount: Amount,
    /// Original block indices that are never removed.
    #[serde(default)]
    pub protect: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub baseline: Baseline,
}

impl PruneConfig {
    pub fn new(metric: MetricKind, strategy: Strategy, amount: Amount) -> Self {
        Self {
            metric,
            strategy,
            amount,
            protect: Vec::new(),
            seed: 0,
            baseline: Baseline::default(),
        }
    }

    /// Also protects the first and last two blocks of an `n_layers` model.
    pub fn protect_edges(mut self, n_layers: usize) -> Self {
        let edges = [0, 1, n_layers.saturating_sub(2), n_layers.saturating_sub(1)];
        self.protect.extend(edges.into_iter().filter(|&l| l < n_layers));
        self.protect.sort_unstable();
        self.protect.dedup();
        self
    }

    /// Number of blocks to remove from an `n_layers` model.
    pub fn k(&self, n_layers: usize) -> Result<usize> {
        let k = match self.amount {
            Amount::Ratio(p) => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::PruneInfeasible(format!("ratio {p} is outside [0, 1)")));
                }
                let k = (p * n_layers as f64 + 1e-9).floor() as usize;
                if k == 0 {
                    return Err(Error::NoOp(p));
                }
                k
            }
            Amount::Layers(0) => return Err(Error::NoOp(0.0)),
            Amount::Layers(k) => k,
        };
        if k >= n_layers {
            return Err(Error::PruneInfeasible(format!(
                "cannot remove {k} of {n_layers} blocks"
            )));
        }
        let free = (0..n_layers).filter(|l| !self.protect.contains(l)).count();
        if free < k {
            return Err(Error::PruneInfeasible(format!(
                "only {free} unprotected blocks for {k} removals"
            )));
        }
        Ok(k)
    }

    fn options(&self, round: usize) -> ScoreOptions {
        ScoreOptions {
            baseline: self.baseline,
            seed: rand::RngCore::next_u64(&mut crate::rng::derive(self.seed, round as u64 + 1)),
        }
    }
}

/// One scoring round: the report over the blocks still present, the blocks
/// it removed (original indices), and calibration accuracy afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneStep {
    pub report: RelevanceReport,
    pub removed: Vec<usize>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub metric: MetricKind,
    pub strategy: Strategy,
    pub original_layers: usize,
    /// Calibration accuracy before any removal.
    pub initial_accuracy: f64,
    pub steps: Vec<PruneStep>,
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    format: String,
    metric: MetricKind,
    strategy: Strategy,
    original_layers: usize,
    initial_accuracy: f64,
}

impl PruneTrace {
    pub fn removed(&self) -> Vec<usize> {
        self.steps.iter().flat_map(|s| s.removed.iter().copied()).collect()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.steps.last().map_or(self.initial_accuracy, |s| s.accuracy)
    }

    /// Header line, then one JSON step record per line.
    pub fn to_jsonl(&self) -> String {
        let header = TraceHeader {
            format: TRACE_FORMAT.into(),
            metric: self.metric,
            strategy: self.strategy,
            original_layers: self.original_layers,
            initial_accuracy: self.initial_accuracy,
        };
        let mut out = serde_json::to_string(&header).expect("trace header serializes");
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("trace steps serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let schema = |path: String, e: serde_json::Error| Error::Schema {
            path,
            message: e.to_string(),
        };
        let header: TraceHeader = serde_json::from_str(lines.next().ok_or(Error::Schema {
            path: "header".into(),
            message: "empty trace".into(),
        })?)
        .map_err(|e| schema("header".into(), e))?;
        if header.format != TRACE_FORMAT {
            return Err(Error::Schema {
                path: "header.format".into(),
                message: format!("expected {TRACE_FORMAT:?}, found {:?}", header.format),
            });
        }
        let steps = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| schema(format!("step {i}"), e)))
            .collect::<Result<Vec<PruneStep>>>()?;
        Ok(Self {
            metric: header.metric,
            strategy: header.strategy,
            original_layers: header.original_layers,
            initial_accuracy: header.initial_accuracy,
            steps,
        })
    }

    /// Steps × original blocks; blocks already gone at a step are empty cells.
    pub fn heatmap(&self) -> HeatmapMatrix {
        let cols = self.original_layers;
        let cells = self
            .steps
            .iter()
            .map(|s| {
                let mut row = vec![None; cols];
                for (&orig, &score) in s.report.origin.iter().zip(&s.report.scores) {
                    row[orig] = Some(score);
                }
                row
            })
            .collect();
        HeatmapMatrix {
            title: format!("{} {} pruning", self.metric, strategy_name(self.strategy)),
            row_labels: (0..self.steps.len()).map(|i| format!("step {i}")).collect(),
            col_labels: (0..cols).map(|l| l.to_string()).collect(),
            cells,
            scale: ColorScale::for_metric(self.metric),
        }
    }
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::OneShot => "one-shot",
        Strategy::Iterative => "iterative",
    }
}

/// Current indices of the `k` lowest-scoring unprotected blocks, lowest first;
/// equal scores go to the lower index.
fn lowest(report: &RelevanceReport, protect: &[usize], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..report.scores.len())
        .filter(|&i| !protect.contains(&report.origin[i]))
        .collect();
    idx.sort_by(|&a, &b| report.scores[a].total_cmp(&report.scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn original_layers<T: Scalar>(m: &TransformerModel<T>) -> usize {
    m.origin().iter().max().map_or(0, |&l| l + 1)
}

fn accuracy<T: Scalar>(m: &TransformerModel<T>, d: &CalibrationDataset) -> Result<f64> {
    evaluate_accuracy(m, d, &PassCounter::new())
}

/// Scores once and removes the `k` least relevant blocks together.
pub fn one_shot_prune<T: Scalar>(
    model: &TransformerModel<T>,
    d: &CalibrationDataset,
    cfg: &PruneConfig,
) -> Result<(TransformerModel<T>, PruneTrace)> {
    let k = cfg.k(model.n_layers())?;
    let initial = accuracy(model, d)?;
    let report = score_all(model, d, cfg.metric, &cfg.options(0))?;
    let chosen = lowest(&report, &cfg.protect, k);
    let pruned = model.remove_layers(&chosen)?;
    let mut removed: Vec<usize> = chosen.iter().map(|&i| model.origin()[i]).collect();
    removed.sort_unstable();
    let step = PruneStep {
        report,
        removed,
        accuracy: accuracy(&pruned, d)?,
    };
    Ok((
        pruned,
        PruneTrace {
            metric: cfg.metric,
            strategy: Strategy::OneShot,
            original_layers: original_layers(model),
            initial_accuracy: initial,
            steps: vec![step],
        },
    ))
}

/// `k` rounds of score, remove the least relevant block, re-score.
///
/// A failure after some rounds is reported as [`Error::Interrupted`] carrying
/// the number of completed rounds.
pub fn iterative_prune<T: Scalar>(
    model: &TransformerModel<T>,
    d: &CalibrationDataset,
    cfg: &PruneConfig,
) -> Result<(TransformerModel<T>, PruneTrace)> {
    let k = cfg.k(model.n_layers())?;
    let initial = accuracy(model, d)?;
    let mut current = model.clone();
    let mut steps = Vec::with_capacity(k);
    for round in 0..k {
        let attempt = (|| {
            let report = score_all(&current, d, cfg.metric, &cfg.options(round))?;
            let at = lowest(&report, &cfg.protect, 1)[0];
            let next = current.remove_layer(at)?;
            let acc = accuracy(&next, d)?;
            Ok((next, PruneStep {
                removed: vec![current.origin()[at]],
                report,
                accuracy: acc,
            }))
        })();
        match attempt {
            Ok((next, step)) => {
                current = next;
                steps.push(step);
            }
            Err(e) if round > 0 => {
                return Err(Error::Interrupted {
                    completed: round,
                    source: Box::new(e),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok((
        current,
        PruneTrace {
            metric: cfg.metric,
            strategy: Strategy::Iterative,
            original_layers: original_layers(model),
            initial_accuracy: initial,
            steps,
        },
    ))
}

pub fn prune<T: Scalar>(
    model: &TransformerModel<T>,
    d: &CalibrationDataset,
    cfg: &PruneConfig,
) -> Result<(TransformerModel<T>, PruneTrace)> {
    match cfg.strategy {
        Strategy::OneShot => one_shot_prune(model, d, cfg),
        Strategy::Iterative => iterative_prune(model, d, cfg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    /// Original block indices, ascending.
    pub removed: Vec<usize>,
    pub accuracy: f64,
    pub evaluated: usize,
}

pub const SUBSET_BUDGET: u128 = 10_000;

fn binomial(n: usize, k: usize) -> u128 {
    (0..k as u128).fold(1u128, |acc, i| acc * (n as u128 - i) / (i + 1))
}

/// Tries every set of `k` blocks and keeps the one whose removal leaves the
/// highest calibration accuracy; the lexicographically first set wins ties.
pub fn exhaustive_best_subset<T: Scalar>(
    model: &TransformerModel<T>,
    d: &CalibrationDataset,
    k: usize,
) -> Result<SubsetResult> {
    let n = model.n_layers();
    if k == 0 || k > 3 {
        return Err(Error::PruneInfeasible(format!("exhaustive search supports k in 1..=3, got {k}")));
    }
    if k >= n {
        return Err(Error::PruneInfeasible(format!("cannot remove {k} of {n} blocks")));
    }
    let combinations = binomial(n, k);
    if combinations > SUBSET_BUDGET {
        return Err(Error::Budget {
            combinations,
            budget: SUBSET_BUDGET,
        });
    }
    let subsets: Vec<Vec<usize>> = (0..n).combinations(k).collect();
    let accs = subsets
        .par_iter()
        .map(|s| accuracy(&model.remove_layers(s)?, d))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &a) in accs.iter().enumerate() {
        if a > accs[best] {
            best = i;
        }
    }
    Ok(SubsetResult {
        removed: subsets[best].iter().map(|&i| model.origin()[i]).collect(),
        accuracy: accs[best],
        evaluated: subsets.len(),
    })
}
