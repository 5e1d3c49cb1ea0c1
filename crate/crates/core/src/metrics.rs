//! ROC AUC, accuracy, average precision and the results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::{binary_label, Dataset, TaskId, TaskSpec};
use crate::models::ModelKind;
use crate::{Error, Result};

/// Default decision threshold; a score equal to it counts as positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Parallel lists of ids, scores in [0, 1] and 0/1 labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredSet {
    pub image_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(image_ids: Vec<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if image_ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "scored set lengths differ: {} ids, {} scores, {} labels",
                image_ids.len(),
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("score {s} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|l| **l > 1) {
            return Err(Error::InvalidArgument(format!("label {l} is not 0 or 1")));
        }
        Ok(ScoredSet {
            image_ids,
            scores,
            labels,
        })
    }

    /// Ids are generated as zero-padded indices.
    pub fn from_scores(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| format!("{i:06}")).collect();
        ScoredSet::new(ids, scores, labels)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn prevalence(&self) -> f64 {
        self.positives() as f64 / self.len() as f64
    }

    pub fn flipped(&self) -> ScoredSet {
        ScoredSet {
            image_ids: self.image_ids.clone(),
            scores: self.scores.clone(),
            labels: self.labels.iter().map(|l| 1 - l).collect(),
        }
    }
}

/// Tie-aware ROC AUC by the Mann-Whitney rank sum with midranks.
pub fn roc_auc(s: &ScoredSet) -> Result<f64> {
    let p = s.positives();
    let n = s.negatives();
    if p == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "AUC needs both classes, got {p} positives and {n} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // midranks are half-integers, so every sum below is exact
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if s.labels[k] == 1 {
                rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p * n) as f64)
}

/// Fraction of records with `(score >= threshold) == label`.
pub fn accuracy(s: &ScoredSet, threshold: f64) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let correct = s
        .scores
        .iter()
        .zip(&s.labels)
        .filter(|(&score, &label)| (score >= threshold) == (label == 1))
        .count();
    Ok(correct as f64 / s.len() as f64)
}

/// Ranking used by [`average_precision`]: score descending, then image_id.
pub fn ap_ranking(s: &ScoredSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| {
        s.scores[b]
            .total_cmp(&s.scores[a])
            .then_with(|| s.image_ids[a].cmp(&s.image_ids[b]))
    });
    order
}

/// Non-interpolated AP: sum over cutoffs of `(R_k - R_{k-1}) * P_k`.
pub fn average_precision(s: &ScoredSet) -> Result<f64> {
    let p = s.positives();
    if p == 0 {
        return Err(Error::InvalidArgument("average precision needs a positive".into()));
    }
    let total = p as f64;
    let mut ap = 0.0f64;
    let mut tp = 0usize;
    let mut prev_recall = 0.0f64;
    for (k, &i) in ap_ranking(s).iter().enumerate() {
        tp += s.labels[i] as usize;
        let recall = tp as f64 / total;
        let precision = tp as f64 / (k + 1) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub auc: f64,
    pub accuracy: f64,
    pub average_precision: f64,
}

impl CellMetrics {
    pub fn compute(s: &ScoredSet) -> Result<Self> {
        Ok(CellMetrics {
            auc: roc_auc(s)?,
            accuracy: accuracy(s, DEFAULT_THRESHOLD)?,
            average_precision: average_precision(s)?,
        })
    }
}

/// Results table: one row per model, AUC / accuracy / AP per task.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub cells: BTreeMap<(ModelKind, TaskId), CellMetrics>,
}

pub const REPORT_COLUMNS: [&str; 6] = [
    "Task1 AUC",
    "Task1 Test Acc",
    "Task1 Avg Prec",
    "Task2 AUC",
    "Task2 Test Acc",
    "Task2 Avg Prec",
];

const CSV_COLUMNS: [&str; 6] = [
    "task1_auc",
    "task1_acc",
    "task1_avg_prec",
    "task2_auc",
    "task2_acc",
    "task2_avg_prec",
];

const MISSING: &str = "-";

impl EvalReport {
    pub fn get(&self, model: ModelKind, task: TaskId) -> Option<&CellMetrics> {
        self.cells.get(&(model, task))
    }

    fn row_values(&self, model: ModelKind) -> [Option<f64>; 6] {
        let mut out = [None; 6];
        for (t, task) in TaskId::ALL.into_iter().enumerate() {
            if let Some(c) = self.get(model, task) {
                out[3 * t] = Some(c.auc);
                out[3 * t + 1] = Some(c.accuracy);
                out[3 * t + 2] = Some(c.average_precision);
            }
        }
        out
    }

    /// Fixed-width table. An empty report renders the header only; otherwise
    /// all four model rows appear, with `-` for missing cells.
    pub fn render_text(&self) -> String {
        let label_width = ModelKind::ALL
            .iter()
            .map(|m| m.display_name().chars().count())
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = write!(out, "{:label_width$}", "");
        for c in REPORT_COLUMNS {
            let _ = write!(out, "  {c:>14}");
        }
        out.push('\n');
        if self.cells.is_empty() {
            return out;
        }
        for model in ModelKind::ALL {
            let _ = write!(out, "{:label_width$}", model.display_name());
            for v in self.row_values(model) {
                match v {
                    Some(v) => {
                        let _ = write!(out, "  {v:>14.4}");
                    }
                    None => {
                        let _ = write!(out, "  {MISSING:>14}");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Same rows as the text table; missing cells are empty fields.
    pub fn render_csv(&self) -> String {
        let mut out = format!("model,{}\n", CSV_COLUMNS.join(","));
        if self.cells.is_empty() {
            return out;
        }
        for model in ModelKind::ALL {
            out.push_str(model.as_str());
            for v in self.row_values(model) {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Computes every cell of the results table.
pub fn build_report(results: &BTreeMap<(ModelKind, TaskId), ScoredSet>) -> Result<EvalReport> {
    let mut cells = BTreeMap::new();
    for (&key, set) in results {
        cells.insert(key, CellMetrics::compute(set)?);
    }
    Ok(EvalReport { cells })
}

pub const SUBMISSION_HEADER: &str = "image_id,melanoma,seborrheic_keratosis";

/// Two-score prediction file; `#` lines are comments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Submission {
    pub comments: Vec<String>,
    /// `(image_id, melanoma score, seborrheic keratosis score)`.
    pub rows: Vec<(String, f64, f64)>,
}

impl Submission {
    pub fn score(&self, task: TaskId, row: usize) -> f64 {
        let (_, m, k) = &self.rows[row];
        match task {
            TaskId::Task1 => *m,
            TaskId::Task2 => *k,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        for c in &self.comments {
            writeln!(out, "# {c}").map_err(io)?;
        }
        writeln!(out, "{SUBMISSION_HEADER}").map_err(io)?;
        for (id, m, k) in &self.rows {
            // shortest round-trip formatting keeps the file lossless
            writeln!(out, "{id},{m},{k}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Submission> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut sub = Submission::default();
        let mut saw_header = false;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end();
            if let Some(c) = line.strip_prefix('#') {
                sub.comments.push(c.trim_start().to_string());
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if !saw_header {
                if line != SUBMISSION_HEADER {
                    return Err(Error::parse(&name, line_no, format!("expected header `{SUBMISSION_HEADER}`")));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [id, m, k] = fields[..] else {
                return Err(Error::parse(&name, line_no, "expected 3 fields"));
            };
            let parse = |v: &str| -> Result<f64> {
                let x: f64 = v
                    .parse()
                    .map_err(|_| Error::parse(&name, line_no, format!("bad score `{v}`")))?;
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::parse(&name, line_no, format!("score {x} outside [0, 1]")));
                }
                Ok(x)
            };
            sub.rows.push((id.to_string(), parse(m)?, parse(k)?));
        }
        if !saw_header {
            return Err(Error::parse(&name, 1, "missing header"));
        }
        Ok(sub)
    }

    /// Joins with ground truth; every row id must be labelled.
    pub fn scored_set(&self, dataset: &Dataset, task: TaskSpec) -> Result<ScoredSet> {
        let mut ids = Vec::with_capacity(self.rows.len());
        let mut scores = Vec::with_capacity(self.rows.len());
        let mut labels = Vec::with_capacity(self.rows.len());
        for (row, (id, _, _)) in self.rows.iter().enumerate() {
            let record = dataset
                .get(id)
                .ok_or_else(|| Error::Missing(format!("no ground truth for `{id}`")))?;
            ids.push(id.clone());
            scores.push(self.score(task.id, row));
            labels.push(binary_label(record, task));
        }
        ScoredSet::new(ids, scores, labels)
    }
}
