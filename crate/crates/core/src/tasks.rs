//! Synthetic labeled sequence tasks.
//!
//! Every instance carries its prompt tokens, the answer options (head indices)
//! and a class label; `options[label]` is the correct answer.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DATASET_FORMAT: &str = "layerlens-dataset/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Binary string, label is the more frequent symbol. Odd lengths only.
    Majority,
    /// Binary string, label is the parity of the count of ones.
    Parity,
    /// Digits modulo `symbols`, label is their sum modulo `symbols`.
    Modsum,
    /// `k1 v1 .. kp vp QUERY kj`, label is the value bound to `kj`.
    Lookup,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Majority,
        TaskKind::Parity,
        TaskKind::Modsum,
        TaskKind::Lookup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Majority => "majority",
            TaskKind::Parity => "parity",
            TaskKind::Modsum => "modsum",
            TaskKind::Lookup => "lookup",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Task(format!("unknown task kind {s:?}")))
    }
}

/// Parameters of a synthetic task.
///
/// `min_len..=max_len` bounds the prompt length in tokens. `symbols` is the
/// modulus for MODSUM and the number of keys (and of values) for LOOKUP; the
/// binary tasks ignore it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    pub symbols: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, min_len: usize, max_len: usize, symbols: usize, seed: u64) -> Self {
        Self {
            kind,
            min_len,
            max_len,
            symbols,
            seed,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self.kind {
            TaskKind::Majority | TaskKind::Parity => 2,
            TaskKind::Modsum | TaskKind::Lookup => self.symbols,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self.kind {
            TaskKind::Majority => 2,
            TaskKind::Parity => 4,
            TaskKind::Modsum => self.symbols,
            TaskKind::Lookup => 2 * self.symbols + 1,
        }
    }

    /// Head index answering class `c`, for `c` in order.
    pub fn answer_tokens(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::Majority => vec![0, 1],
            TaskKind::Parity => vec![2, 3],
            TaskKind::Modsum => (0..self.symbols).collect(),
            TaskKind::Lookup => (self.symbols..2 * self.symbols).collect(),
        }
    }

    pub fn query_token(&self) -> Option<usize> {
        (self.kind == TaskKind::Lookup).then_some(2 * self.symbols)
    }

    /// Admissible prompt lengths.
    pub fn lengths(&self) -> Vec<usize> {
        (self.min_len..=self.max_len)
            .filter(|&n| match self.kind {
                TaskKind::Majority => n % 2 == 1,
                TaskKind::Parity | TaskKind::Modsum => n >= 1,
                TaskKind::Lookup => n >= 4 && n % 2 == 0 && (n - 2) / 2 <= self.symbols,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len > self.max_len {
            return Err(Error::Task(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        if matches!(self.kind, TaskKind::Modsum | TaskKind::Lookup) && self.symbols < 2 {
            return Err(Error::Task(format!(
                "{} needs at least 2 symbols",
                self.kind.name()
            )));
        }
        if self.lengths().is_empty() {
            return Err(Error::Task(format!(
                "no admissible {} prompt length in {}..={}",
                self.kind.name(),
                self.min_len,
                self.max_len
            )));
        }
        Ok(())
    }

    /// Distinct prompts available per class (every task here is label-symmetric).
    pub fn capacity_per_class(&self) -> u128 {
        let total = self
            .lengths()
            .into_iter()
            .map(|n| self.prompts_of_length(n))
            .fold(0u128, u128::saturating_add);
        total / self.n_classes() as u128
    }

    fn prompts_of_length(&self, n: usize) -> u128 {
        let pow = |b: u128, e: usize| (0..e).fold(1u128, |acc, _| acc.saturating_mul(b));
        match self.kind {
            TaskKind::Majority | TaskKind::Parity => pow(2, n),
            TaskKind::Modsum => pow(self.symbols as u128, n),
            TaskKind::Lookup => {
                let p = (n - 2) / 2;
                let k = self.symbols as u128;
                let ordered_keys = (0..p as u128).fold(1u128, |acc, i| acc.saturating_mul(k - i));
                ordered_keys
                    .saturating_mul(pow(k, p))
                    .saturating_mul(p as u128)
            }
        }
    }

    fn sample(&self, label: usize, r: &mut rng::Rng) -> Vec<usize> {
        let lengths = self.lengths();
        let n = lengths[r.random_range(0..lengths.len())];
        match self.kind {
            TaskKind::Majority => {
                let mut bits: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
                let ones = bits.iter().sum::<usize>();
                let majority = usize::from(2 * ones > n);
                if majority != label {
                    bits.iter_mut().for_each(|b| *b = 1 - *b);
                }
                bits
            }
            TaskKind::Parity => {
                let mut bits: Vec<usize> = (0..n - 1).map(|_| r.random_range(0..2)).collect();
                let ones = bits.iter().sum::<usize>();
                bits.push((label + ones) % 2);
                bits
            }
            TaskKind::Modsum => {
                let m = self.symbols;
                let mut digits: Vec<usize> = (0..n - 1).map(|_| r.random_range(0..m)).collect();
                let s = digits.iter().sum::<usize>() % m;
                digits.push((label + m - s) % m);
                digits
            }
            TaskKind::Lookup => {
                let k = self.symbols;
                let p = (n - 2) / 2;
                let mut keys: Vec<usize> = (0..k).collect();
                keys.shuffle(r);
                keys.truncate(p);
                let mut values: Vec<usize> = (0..p).map(|_| r.random_range(0..k)).collect();
                let q = r.random_range(0..p);
                values[q] = label;
                let mut tokens = Vec::with_capacity(n);
                for (key, value) in keys.iter().zip(&values) {
                    tokens.push(*key);
                    tokens.push(k + value);
                }
                tokens.push(2 * k);
                tokens.push(keys[q]);
                tokens
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub options: Vec<usize>,
}

impl Instance {
    /// Head index of the correct answer.
    pub fn answer(&self) -> usize {
        self.options[self.label]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationDataset {
    pub name: String,
    pub split: Split,
    pub n_classes: usize,
    pub task: Option<TaskSpec>,
    pub instances: Vec<Instance>,
}

/// How the chance level r(D) is defined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Uniform guess among each instance's options.
    #[default]
    UniformOptions,
    /// Guess drawn from the empirical label distribution.
    LabelMarginal,
}

impl CalibrationDataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        n_classes: usize,
        instances: Vec<Instance>,
    ) -> Result<Self> {
        let d = Self {
            name: name.into(),
            split,
            n_classes,
            task: None,
            instances,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.tokens.is_empty() {
                return Err(Error::Task(format!("instance {i} has no tokens")));
            }
            if inst.options.is_empty() {
                return Err(Error::Task(format!("instance {i} has no options")));
            }
            if inst.label >= self.n_classes || inst.label >= inst.options.len() {
                return Err(Error::Task(format!(
                    "instance {i} label {} outside {} classes / {} options",
                    inst.label,
                    self.n_classes,
                    inst.options.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// First pair of instances sharing a token sequence, if any.
    pub fn find_duplicate(&self) -> Option<(usize, usize)> {
        let mut seen: HashMap<&[usize], usize> = HashMap::new();
        for (i, inst) in self.instances.iter().enumerate() {
            if let Some(&first) = seen.get(inst.tokens.as_slice()) {
                return Some((first, i));
            }
            seen.insert(&inst.tokens, i);
        }
        None
    }

    pub fn max_len(&self) -> usize {
        self.instances.iter().map(|i| i.tokens.len()).max().unwrap_or(0)
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }

    /// Expected accuracy of a random predictor, r(D).
    pub fn random_baseline(&self) -> Result<f64> {
        self.random_baseline_with(Baseline::UniformOptions)
    }

    pub fn random_baseline_with(&self, kind: Baseline) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = self.len() as f64;
        Ok(match kind {
            Baseline::UniformOptions => {
                self.instances
                    .iter()
                    .map(|i| 1.0 / i.options.len() as f64)
                    .sum::<f64>()
                    / n
            }
            Baseline::LabelMarginal => self
                .label_counts()
                .iter()
                .map(|&c| (c as f64 / n).powi(2))
                .sum(),
        })
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            format: DATASET_FORMAT.to_string(),
            name: self.name.clone(),
            split: self.split,
            n_classes: self.n_classes,
            task: self.task.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for inst in &self.instances {
            serde_json::to_writer(&mut w, inst)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let first = lines.next().ok_or(Error::EmptyDataset)??;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::Schema {
            path: "header".into(),
            message: e.to_string(),
        })?;
        if header.format != DATASET_FORMAT {
            return Err(Error::Schema {
                path: "header.format".into(),
                message: format!("expected {DATASET_FORMAT:?}, found {:?}", header.format),
            });
        }
        let mut instances = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let inst = serde_json::from_str(&line).map_err(|e| Error::Schema {
                path: format!("line {}", i + 2),
                message: e.to_string(),
            })?;
            instances.push(inst);
        }
        let d = Self {
            name: header.name,
            split: header.split,
            n_classes: header.n_classes,
            task: header.task,
            instances,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    name: String,
    split: Split,
    n_classes: usize,
    #[serde(default)]
    task: Option<TaskSpec>,
}

/// Draws disjoint, internally distinct train and test sets with labels
/// balanced to within one instance per class.
pub fn generate(
    spec: &TaskSpec,
    n_train: usize,
    n_test: usize,
) -> Result<(CalibrationDataset, CalibrationDataset)> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Task("train and test counts must be at least 1".into()));
    }
    let c = spec.n_classes();
    let per_class = n_train.div_ceil(c) + n_test.div_ceil(c);
    let capacity = spec.capacity_per_class();
    if per_class as u128 > capacity {
        return Err(Error::InfeasibleDistinctness {
            requested: per_class,
            capacity,
        });
    }

    let mut r = rng::seeded(spec.seed);
    let mut seen = std::collections::HashSet::new();
    let options = spec.answer_tokens();
    let mut draw = |count: usize, r: &mut rng::Rng| -> Result<Vec<Instance>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % c;
            let mut attempts = 0usize;
            let tokens = loop {
                let t = spec.sample(label, r);
                if seen.insert(t.clone()) {
                    break t;
                }
                attempts += 1;
                if attempts > 100_000 {
                    return Err(Error::InfeasibleDistinctness {
                        requested: per_class,
                        capacity,
                    });
                }
            };
            out.push(Instance {
                tokens,
                label,
                options: options.clone(),
            });
        }
        out.shuffle(r);
        Ok(out)
    };
    let train = draw(n_train, &mut r)?;
    let test = draw(n_test, &mut r)?;
    let make = |split: Split, instances: Vec<Instance>| CalibrationDataset {
        name: format!("{}-{}", spec.kind.name(), if split == Split::Train { "train" } else { "test" }),
        split,
        n_classes: c,
        task: Some(spec.clone()),
        instances,
    };
    Ok((make(Split::Train, train), make(Split::Test, test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(options: usize) -> Instance {
        Instance {
            tokens: vec![0],
            label: 0,
            options: (0..options).collect(),
        }
    }

    #[test]
    fn uniform_baseline_examples() {
        let two = CalibrationDataset::new("t", Split::Train, 2, vec![inst(2), inst(2)]).unwrap();
        assert_eq!(two.random_baseline().unwrap(), 0.5);
        let four = CalibrationDataset::new("t", Split::Train, 4, vec![inst(4); 3]).unwrap();
        assert_eq!(four.random_baseline().unwrap(), 0.25);
        let mixed = CalibrationDataset::new(
            "t",
            Split::Train,
            4,
            vec![inst(2), inst(4), inst(2), inst(4)],
        )
        .unwrap();
        assert_eq!(mixed.random_baseline().unwrap(), 0.375);
    }

    #[test]
    fn empty_dataset_has_no_baseline() {
        let d = CalibrationDataset::new("t", Split::Train, 2, vec![]).unwrap();
        assert!(matches!(d.random_baseline(), Err(Error::EmptyDataset)));
    }

    #[test]
    fn marginal_baseline() {
        let mut a = inst(2);
        a.label = 1;
        let d = CalibrationDataset::new("t", Split::Train, 2, vec![inst(2), inst(2), inst(2), a])
            .unwrap();
        let r = d.random_baseline_with(Baseline::LabelMarginal).unwrap();
        assert!((r - (0.75f64.powi(2) + 0.25f64.powi(2))).abs() < 1e-15);
    }

    #[test]
    fn majority_layout() {
        let spec = TaskSpec::new(TaskKind::Majority, 9, 9, 0, 1);
        let (train, _) = generate(&spec, 10, 4).unwrap();
        assert_eq!(train.n_classes, 2);
        for i in &train.instances {
            assert_eq!(i.tokens.len(), 9);
            assert_eq!(i.options, vec![0, 1]);
        }
    }

    #[test]
    fn infeasible_requests_are_rejected() {
        // length-1 parity has one prompt per class
        let spec = TaskSpec::new(TaskKind::Parity, 1, 1, 0, 1);
        assert!(matches!(
            generate(&spec, 2, 2),
            Err(Error::InfeasibleDistinctness { .. })
        ));
        let even_only = TaskSpec::new(TaskKind::Majority, 2, 2, 0, 1);
        assert!(matches!(generate(&even_only, 1, 1), Err(Error::Task(_))));
        let ok = TaskSpec::new(TaskKind::Parity, 3, 3, 0, 1);
        assert!(generate(&ok, 0, 1).is_err());
    }

    #[test]
    fn exhausting_the_space_still_works() {
        // 2^3 prompts, 4 per class: exactly enough
        let spec = TaskSpec::new(TaskKind::Parity, 3, 3, 0, 5);
        let (train, test) = generate(&spec, 4, 4).unwrap();
        assert_eq!(train.len() + test.len(), 8);
    }
}
