//! Statistics for comparing relevance metrics across tasks, and heatmap output.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::{MetricKind, RelevanceReport};

fn degenerate(msg: impl Into<String>) -> Error {
    Error::Degenerate(msg.into())
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(degenerate(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(degenerate("need at least two points"));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(degenerate("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks with 1 = lowest score (least relevant).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankVector {
    pub ranks: Vec<f64>,
    pub ties: TiePolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Tied scores share the mean of their ranks.
    Average,
    /// Tied scores are ordered by layer index.
    Ordinal,
}

impl RankVector {
    pub fn average(scores: &[f64]) -> Self {
        Self {
            ranks: average_ranks(scores),
            ties: TiePolicy::Average,
        }
    }

    pub fn ordinal(scores: &[f64]) -> Self {
        let mut ranks = vec![0.0; scores.len()];
        for (r, &i) in order(scores).iter().enumerate() {
            ranks[i] = (r + 1) as f64;
        }
        Self {
            ranks,
            ties: TiePolicy::Ordinal,
        }
    }
}

fn order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

/// 1-based ranks, ties averaged.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let idx = order(values);
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[i][j]`: layers with true rank i+1 and metric rank j+1.
    pub counts: Vec<Vec<u64>>,
    pub observations: u64,
    /// Fraction of layers whose metric rank differs from the true rank.
    pub off_diagonal_rate: f64,
    /// Fraction misranked by at most `band` positions.
    pub near_band_rate: f64,
    /// Fraction misranked by more than `band` positions.
    pub far_rate: f64,
    pub band: usize,
}

pub const DEFAULT_BAND: usize = 2;

/// Ranks every task's layers under the true scores (accuracy drop) and the
/// metric's scores and counts rank pairs. Ties are ordered by layer index so
/// each task contributes a permutation.
pub fn rank_confusion(
    true_scores: &[Vec<f64>],
    metric_scores: &[Vec<f64>],
    band: usize,
) -> Result<ConfusionMatrix> {
    if true_scores.len() != metric_scores.len() || true_scores.is_empty() {
        return Err(Error::MismatchedLayers(format!(
            "{} true score sets vs {} metric score sets",
            true_scores.len(),
            metric_scores.len()
        )));
    }
    let n = true_scores[0].len();
    let mut counts = vec![vec![0u64; n]; n];
    let (mut off, mut near, mut far, mut total) = (0u64, 0u64, 0u64, 0u64);
    for (t, (a, b)) in true_scores.iter().zip(metric_scores).enumerate() {
        if a.len() != n || b.len() != n {
            return Err(Error::MismatchedLayers(format!(
                "task {t} has {} and {} layers, expected {n}",
                a.len(),
                b.len()
            )));
        }
        let (ra, rb) = (RankVector::ordinal(a), RankVector::ordinal(b));
        for l in 0..n {
            let (i, j) = (ra.ranks[l] as usize - 1, rb.ranks[l] as usize - 1);
            counts[i][j] += 1;
            total += 1;
            let gap = i.abs_diff(j);
            if gap > 0 {
                off += 1;
                if gap <= band {
                    near += 1;
                } else {
                    far += 1;
                }
            }
        }
    }
    let rate = |c: u64| c as f64 / total as f64;
    Ok(ConfusionMatrix {
        counts,
        observations: true_scores.len() as u64,
        off_diagonal_rate: rate(off),
        near_band_rate: rate(near),
        far_rate: rate(far),
        band,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    /// Population variance of each layer's z-score across datasets.
    pub per_layer: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `per_layer`.
    pub sd: f64,
    /// Layers attaining the largest variance.
    pub max_layers: Vec<usize>,
}

/// (v − mean)/sd with population statistics.
pub fn zscore(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd.is_nan() || sd <= 0.0 {
        return Err(degenerate("score vector has zero variance"));
    }
    Ok(v.iter().map(|x| (x - mean) / sd).collect())
}

/// How much each layer's standardized relevance moves between datasets.
pub fn zscore_variance(score_sets: &[Vec<f64>]) -> Result<VarianceSummary> {
    if score_sets.len() < 2 {
        return Err(degenerate("need at least two datasets"));
    }
    let n = score_sets[0].len();
    if score_sets.iter().any(|s| s.len() != n) {
        return Err(Error::MismatchedLayers("score vectors differ in length".into()));
    }
    let z = score_sets.iter().map(|s| zscore(s)).collect::<Result<Vec<_>>>()?;
    let m = z.len() as f64;
    let per_layer: Vec<f64> = (0..n)
        .map(|l| {
            let mean = z.iter().map(|v| v[l]).sum::<f64>() / m;
            z.iter().map(|v| (v[l] - mean).powi(2)).sum::<f64>() / m
        })
        .collect();
    let mean = per_layer.iter().sum::<f64>() / n as f64;
    let sd = (per_layer.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let top = per_layer.iter().cloned().fold(f64::MIN, f64::max);
    let max_layers = (0..n).filter(|&l| top - per_layer[l] <= 1e-12).collect();
    Ok(VarianceSummary {
        per_layer,
        mean,
        sd,
        max_layers,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// min(W+, W−).
    pub w: f64,
    pub p: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
}

pub const EXACT_LIMIT: usize = 20;

/// Two-sided Wilcoxon signed-rank test on paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(degenerate("paired samples differ in length"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(degenerate("all differences are zero"));
    }
    if d.len() < 5 {
        return Err(degenerate(format!("need at least 5 nonzero differences, got {}", d.len())));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    let exact = n <= EXACT_LIMIT;
    let p = if exact {
        exact_p(&ranks, w)
    } else {
        normal_p(&abs, n, w)
    };
    Ok(WilcoxonResult { w, p, n, exact })
}

/// P(T ≤ w) doubled, with T the null distribution of W+ over all 2^n sign
/// patterns. Ranks are doubled so averaged ties stay integral.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let twice: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = twice.iter().sum();
    let mut ways = vec![0f64; max + 1];
    ways[0] = 1.0;
    for &r in &twice {
        for s in (r..=max).rev() {
            ways[s] += ways[s - r];
        }
    }
    let limit = (2.0 * w).round() as usize;
    let tail: f64 = ways[..=limit].iter().sum();
    let all = 2f64.powi(ranks.len() as i32);
    (2.0 * tail / all).min(1.0)
}

fn normal_p(abs: &[f64], n: usize, w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((mean - w).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * std.cdf(-z)).min(1.0)
}

/// 100·(acc − r)/(1 − r): 100 is perfect, 0 is chance. NaN when r ≥ 1.
pub fn normalized_score(acc: f64, r: f64) -> f64 {
    if r >= 1.0 {
        return f64::NAN;
    }
    100.0 * (acc - r) / (1.0 - r)
}

/// [`normalized_score`] clamped below at `floor`.
pub fn normalized_score_floored(acc: f64, r: f64, floor: f64) -> f64 {
    normalized_score(acc, r).max(floor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorScale {
    /// Green below zero, white at zero, purple above.
    Diverging,
    /// Yellow at the minimum to purple at the maximum.
    Sequential,
}

impl ColorScale {
    pub fn for_metric(metric: MetricKind) -> Self {
        if metric == MetricKind::Accuracy {
            ColorScale::Diverging
        } else {
            ColorScale::Sequential
        }
    }
}

pub const HEATMAP_FORMAT: &str = "layerlens-heatmap/1";
const PRUNED: &str = "x";

/// Rows (datasets, checkpoints, prune steps) × layer columns. `None` cells are
/// pruned blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub title: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
    pub scale: ColorScale,
}

#[derive(Serialize, Deserialize)]
struct HeatmapMeta {
    format: String,
    title: String,
    scale: ColorScale,
}

impl HeatmapMatrix {
    /// One row per report; columns are original block indices.
    pub fn from_reports(title: &str, labels: Vec<String>, reports: &[RelevanceReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| degenerate("no reports"))?;
        if labels.len() != reports.len() {
            return Err(degenerate("one label per report required"));
        }
        let cols = reports
            .iter()
            .flat_map(|r| r.origin.iter().copied())
            .max()
            .map_or(0, |m| m + 1);
        let cells = reports
            .iter()
            .map(|r| {
                let mut row = vec![None; cols];
                for (&o, &s) in r.origin.iter().zip(&r.scores) {
                    row[o] = Some(s);
                }
                row
            })
            .collect();
        Ok(Self {
            title: title.to_string(),
            row_labels: labels,
            col_labels: (0..cols).map(|c| c.to_string()).collect(),
            cells,
            scale: ColorScale::for_metric(first.metric),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.row_labels.len()
            || self.cells.iter().any(|r| r.len() != self.col_labels.len())
        {
            return Err(Error::Shape(format!(
                "heatmap with {} row labels and {} column labels has mismatched cells",
                self.row_labels.len(),
                self.col_labels.len()
            )));
        }
        Ok(())
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        self.validate()?;
        let meta = HeatmapMeta {
            format: HEATMAP_FORMAT.into(),
            title: self.title.clone(),
            scale: self.scale,
        };
        writeln!(w, "# {}", serde_json::to_string(&meta)?)?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(std::iter::once("row").chain(self.col_labels.iter().map(String::as_str)))?;
        for (label, row) in self.row_labels.iter().zip(&self.cells) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|c| c.map_or(PRUNED.to_string(), |v| v.to_string())));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let bad = |m: String| Error::Schema {
            path: "heatmap".into(),
            message: m,
        };
        let meta: HeatmapMeta = serde_json::from_str(
            first.strip_prefix("# ").ok_or_else(|| bad("missing metadata line".into()))?,
        )
        .map_err(|e| bad(e.to_string()))?;
        let mut rd = csv::Reader::from_reader(reader);
        let col_labels: Vec<String> = rd.headers()?.iter().skip(1).map(String::from).collect();
        let (mut row_labels, mut cells) = (Vec::new(), Vec::new());
        for rec in rd.records() {
            let rec = rec?;
            row_labels.push(rec.get(0).unwrap_or_default().to_string());
            cells.push(
                rec.iter()
                    .skip(1)
                    .map(|c| {
                        if c == PRUNED {
                            Ok(None)
                        } else {
                            c.parse::<f64>().map(Some).map_err(|e| bad(format!("{c:?}: {e}")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let m = Self {
            title: meta.title,
            row_labels,
            col_labels,
            cells,
            scale: meta.scale,
        };
        m.validate()?;
        Ok(m)
    }

    fn range(&self) -> (f64, f64) {
        let vals = self.cells.iter().flatten().flatten();
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    }

    /// Fill color of a value under this matrix's scale.
    pub fn color(&self, v: f64) -> (u8, u8, u8) {
        let (lo, hi) = self.range();
        let mix = |a: (f64, f64, f64), b: (f64, f64, f64), t: f64| {
            let t = t.clamp(0.0, 1.0);
            let c = |x: f64, y: f64| (x + (y - x) * t).round() as u8;
            (c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
        };
        const WHITE: (f64, f64, f64) = (255.0, 255.0, 255.0);
        const GREEN: (f64, f64, f64) = (27.0, 120.0, 55.0);
        const PURPLE: (f64, f64, f64) = (118.0, 42.0, 131.0);
        const YELLOW: (f64, f64, f64) = (255.0, 237.0, 160.0);
        match self.scale {
            ColorScale::Diverging => {
                let span = lo.abs().max(hi.abs()).max(1e-12);
                if v < 0.0 {
                    mix(WHITE, GREEN, -v / span)
                } else {
                    mix(WHITE, PURPLE, v / span)
                }
            }
            ColorScale::Sequential => {
                let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                mix(YELLOW, PURPLE, t)
            }
        }
    }

    /// Standalone SVG; pruned cells are gray with a cross.
    pub fn to_svg(&self) -> String {
        const CELL: usize = 28;
        const LEFT: usize = 90;
        const TOP: usize = 40;
        let (rows, cols) = (self.row_labels.len(), self.col_labels.len());
        let (width, height) = (LEFT + cols * CELL + 10, TOP + rows * CELL + 10);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
        );
        let _ = writeln!(s, r#"<text x="{LEFT}" y="14" font-size="12">{}</text>"#, escape(&self.title));
        for (j, label) in self.col_labels.iter().enumerate() {
            let x = LEFT + j * CELL + CELL / 2;
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, TOP - 6, escape(label));
        }
        for (i, (label, row)) in self.row_labels.iter().zip(&self.cells).enumerate() {
            let y = TOP + i * CELL;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                LEFT - 6,
                y + CELL / 2 + 4,
                escape(label)
            );
            for (j, cell) in row.iter().enumerate() {
                let x = LEFT + j * CELL;
                match cell {
                    Some(v) => {
                        let (r, g, b) = self.color(*v);
                        let _ = writeln!(
                            s,
                            r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#{r:02x}{g:02x}{b:02x}"><title>{v}</title></rect>"##
                        );
                    }
                    None => {
                        let _ = writeln!(
                            s,
                            r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#bdbdbd" class="pruned"/>"##
                        );
                        let (x2, y2) = (x + CELL, y + CELL);
                        let _ = writeln!(
                            s,
                            r##"<path d="M{x} {y}L{x2} {y2}M{x2} {y}L{x} {y2}" stroke="#636363" stroke-width="2"/>"##
                        );
                    }
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes the CSV matrix, and the SVG rendering when `svg` is given.
pub fn emit_heatmap(matrix: &HeatmapMatrix, csv_path: impl AsRef<Path>, svg: Option<&Path>) -> Result<()> {
    let mut buf = Vec::new();
    matrix.write_csv(&mut buf)?;
    std::fs::write(csv_path, buf)?;
    if let Some(path) = svg {
        std::fs::write(path, matrix.to_svg())?;
    }
    Ok(())
}
