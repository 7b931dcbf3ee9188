use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MetricKind;
use crate::error::{Error, Result};
use crate::model::PassCounts;

pub const REPORT_FORMAT: &str = "layerlens-report/1";

/// Per-layer scores of one metric on one (model, dataset) pair.
///
/// `scores[i]` belongs to the model's current block `i`, which was block
/// `origin[i]` of the unpruned model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub metric: MetricKind,
    pub scores: Vec<f64>,
    pub origin: Vec<usize>,
    /// Acc(f) − Acc(f without l), only for ACCURACY.
    pub raw_acc_drop: Option<Vec<f64>>,
    pub full_accuracy: Option<f64>,
    pub baseline: Option<f64>,
    pub passes: PassCounts,
    pub dataset_id: String,
    pub model_id: String,
    pub higher_means_more_relevant: bool,
}

/// 64-bit FNV-1a digest rendered as hex; used as a short content id.
pub fn fnv_id(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[derive(Serialize, Deserialize)]
struct JsonDoc {
    format: String,
    #[serde(flatten)]
    report: RelevanceReport,
}

#[derive(Serialize, Deserialize)]
struct Row {
    layer: usize,
    metric: MetricKind,
    score: f64,
    raw_acc_drop: Option<f64>,
    forward_passes: u64,
    backward_passes: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    model_id: String,
    dataset_id: String,
    origin: Vec<usize>,
    full_accuracy: Option<f64>,
    baseline: Option<f64>,
    higher_means_more_relevant: bool,
}

impl RelevanceReport {
    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    /// CSV with a leading `# {json}` line holding the ids and block origins.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let meta = Meta {
            format: REPORT_FORMAT.into(),
            model_id: self.model_id.clone(),
            dataset_id: self.dataset_id.clone(),
            origin: self.origin.clone(),
            full_accuracy: self.full_accuracy,
            baseline: self.baseline,
            higher_means_more_relevant: self.higher_means_more_relevant,
        };
        writeln!(w, "# {}", serde_json::to_string(&meta)?)?;
        let mut out = csv::Writer::from_writer(w);
        for (layer, &score) in self.scores.iter().enumerate() {
            out.serialize(Row {
                layer,
                metric: self.metric,
                score,
                raw_acc_drop: self.raw_acc_drop.as_ref().map(|d| d[layer]),
                forward_passes: self.passes.forward,
                backward_passes: self.passes.backward,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let meta: Meta = first
            .strip_prefix("# ")
            .ok_or_else(|| Error::Schema {
                path: "line 1".into(),
                message: "missing `# ` metadata line".into(),
            })
            .and_then(|s| {
                serde_json::from_str(s).map_err(|e| Error::Schema {
                    path: "line 1".into(),
                    message: e.to_string(),
                })
            })?;
        if meta.format != REPORT_FORMAT {
            return Err(Error::Schema {
                path: "format".into(),
                message: format!("expected {REPORT_FORMAT:?}, found {:?}", meta.format),
            });
        }
        let rows: Vec<Row> = csv::Reader::from_reader(reader)
            .deserialize()
            .collect::<std::result::Result<_, _>>()?;
        let first_row = rows.first().ok_or_else(|| Error::Schema {
            path: "rows".into(),
            message: "report has no layers".into(),
        })?;
        if rows.iter().enumerate().any(|(i, r)| r.layer != i || r.metric != first_row.metric) {
            return Err(Error::Schema {
                path: "rows".into(),
                message: "layers must be 0..L in order with a single metric".into(),
            });
        }
        if meta.origin.len() != rows.len() {
            return Err(Error::Schema {
                path: "origin".into(),
                message: format!("{} origins for {} layers", meta.origin.len(), rows.len()),
            });
        }
        let drops: Option<Vec<f64>> = rows.iter().map(|r| r.raw_acc_drop).collect();
        Ok(Self {
            metric: first_row.metric,
            scores: rows.iter().map(|r| r.score).collect(),
            origin: meta.origin,
            raw_acc_drop: drops,
            full_accuracy: meta.full_accuracy,
            baseline: meta.baseline,
            passes: PassCounts {
                forward: first_row.forward_passes,
                backward: first_row.backward_passes,
            },
            dataset_id: meta.dataset_id,
            model_id: meta.model_id,
            higher_means_more_relevant: meta.higher_means_more_relevant,
        })
    }

    pub fn to_json(&self) -> String {
        let doc = JsonDoc {
            format: REPORT_FORMAT.into(),
            report: self.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("reports always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: JsonDoc = serde_json::from_str(text).map_err(|e| Error::Schema {
            path: "report".into(),
            message: e.to_string(),
        })?;
        if doc.format != REPORT_FORMAT {
            return Err(Error::Schema {
                path: "format".into(),
                message: format!("expected {REPORT_FORMAT:?}, found {:?}", doc.format),
            });
        }
        Ok(doc.report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            std::fs::write(path, self.to_json())?;
        } else {
            let mut buf = Vec::new();
            self.write_csv(&mut buf)?;
            std::fs::write(path, buf)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&std::fs::read_to_string(path)?)
        } else {
            Self::read_csv(std::fs::File::open(path)?)
        }
    }
}
