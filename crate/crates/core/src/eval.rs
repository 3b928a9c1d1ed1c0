//! Count-classification metrics: 11-point interpolated average precision,
//! per-class AP and mAP, the random-score baseline and confusion matrices.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::CountLabel;
use crate::exec::Execution;
use crate::seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("average precision needs at least one positive")]
    NoPositives,
    #[error("total_positives {total} is below the {listed} relevant items listed")]
    TooFewPositives { total: usize, listed: usize },
    #[error("non-finite score at position {0}")]
    NonFiniteScore(usize),
    #[error("{scores} score vectors for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score vector {index} has {len} entries, expected {expected}")]
    ScoreWidth { index: usize, len: usize, expected: usize },
    #[error("no labels to evaluate")]
    Empty,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const NUM_CLASSES: usize = CountLabel::COUNT;

/// Scored items for one query or class, in input order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankedList {
    pub items: Vec<(f64, bool)>,
    /// Relevant items in the whole collection, which may exceed the relevant
    /// items present in `items` (truncated lists).
    pub total_positives: usize,
}

impl RankedList {
    pub fn new(items: Vec<(f64, bool)>) -> Self {
        let total_positives = items.iter().filter(|i| i.1).count();
        Self {
            items,
            total_positives,
        }
    }

    pub fn with_total_positives(items: Vec<(f64, bool)>, total_positives: usize) -> Self {
        Self {
            items,
            total_positives,
        }
    }

    /// Relevance flags in rank order: descending score, ties kept in input
    /// order.
    pub fn ranked_relevance(&self) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        idx.sort_by(|&a, &b| self.items[b].0.total_cmp(&self.items[a].0));
        idx.into_iter().map(|i| self.items[i].1).collect()
    }
}

/// The eleven interpolated precisions as exact fractions `(tp, k)`, one per
/// recall threshold `t / 10`, `t = 0..=10`. A threshold no rank reaches
/// gets `(0, 1)`.
pub fn interpolated_precisions(list: &RankedList) -> Result<[(u64, u64); 11]> {
    let listed = list.items.iter().filter(|i| i.1).count();
    if list.total_positives == 0 {
        return Err(EvalError::NoPositives);
    }
    if list.total_positives < listed {
        return Err(EvalError::TooFewPositives {
            total: list.total_positives,
            listed,
        });
    }
    if let Some(i) = list.items.iter().position(|i| !i.0.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    let p = list.total_positives as u64;
    // (tp, k) at every rank
    let mut points = Vec::with_capacity(list.items.len());
    let mut tp = 0u64;
    for (k, rel) in list.ranked_relevance().into_iter().enumerate() {
        tp += rel as u64;
        points.push((tp, k as u64 + 1));
    }
    let mut out = [(0u64, 1u64); 11];
    for (t, slot) in out.iter_mut().enumerate() {
        let t = t as u64;
        // recall tp / p >= t / 10, compared exactly
        for &(tp, k) in points.iter().filter(|&&(tp, _)| 10 * tp >= t * p) {
            if tp * slot.1 > slot.0 * k {
                *slot = (tp, k);
            }
        }
    }
    Ok(out)
}

/// 11-point interpolated average precision: the mean over recall thresholds
/// `0, 0.1, ..., 1` of the best precision at any rank reaching that recall.
pub fn average_precision_voc07(list: &RankedList) -> Result<f64> {
    let pts = interpolated_precisions(list)?;
    Ok(pts.iter().map(|&(tp, k)| tp as f64 / k as f64).sum::<f64>() / 11.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAp {
    /// `None` for a class without test images.
    pub per_class: [Option<f64>; NUM_CLASSES],
    /// Mean over the defined classes.
    pub mean: f64,
}

fn check_scores(scores: &[Vec<f32>], labels: &[CountLabel]) -> Result<()> {
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    for (index, s) in scores.iter().enumerate() {
        if s.len() != NUM_CLASSES {
            return Err(EvalError::ScoreWidth {
                index,
                len: s.len(),
                expected: NUM_CLASSES,
            });
        }
    }
    Ok(())
}

/// One-vs-rest AP of every class and their unweighted mean. Classes absent
/// from `labels` are left out of the mean with a warning.
pub fn map_per_class(scores: &[Vec<f32>], labels: &[CountLabel]) -> Result<ClassAp> {
    check_scores(scores, labels)?;
    let mut per_class = [None; NUM_CLASSES];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let list = RankedList::new(
            scores
                .iter()
                .zip(labels)
                .map(|(s, l)| (s[c] as f64, l.index() == c))
                .collect(),
        );
        if list.total_positives == 0 {
            warn!("class {c} has no test images; excluded from mAP");
            continue;
        }
        *slot = Some(average_precision_voc07(&list)?);
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ClassAp {
        per_class,
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
    })
}

/// Per-class AP of uniform random scores, averaged over `trials` seeded
/// trials.
pub fn chance_baseline(labels: &[CountLabel], trials: usize, base_seed: u64, exec: Execution) -> Result<ClassAp> {
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let trials = trials.max(1);
    let runs = exec.map_range(trials, |t| {
        let mut rng = seed::rng(seed::derive(base_seed, &[t as u64]));
        let scores: Vec<Vec<f32>> = labels
            .iter()
            .map(|_| (0..NUM_CLASSES).map(|_| rng.gen::<f32>()).collect())
            .collect();
        map_per_class(&scores, labels)
    });
    let mut sums = [0.0f64; NUM_CLASSES];
    let mut defined = [false; NUM_CLASSES];
    for r in runs {
        let r = r?;
        for c in 0..NUM_CLASSES {
            if let Some(ap) = r.per_class[c] {
                sums[c] += ap;
                defined[c] = true;
            }
        }
    }
    let mut per_class = [None; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        if defined[c] {
            per_class[c] = Some(sums[c] / trials as f64);
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ClassAp {
        per_class,
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
    })
}

/// Index of the largest score; the lowest index wins exact ties.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    /// Row-normalized proportions; an empty row stays zero.
    pub fn row_normalized(&self) -> [[f64; NUM_CLASSES]; NUM_CLASSES] {
        let mut out = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        for (r, row) in self.counts.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n > 0 {
                for c in 0..NUM_CLASSES {
                    out[r][c] = row[c] as f64 / n as f64;
                }
            }
        }
        out
    }

    /// Diagonal of the row-normalized matrix; `None` for an empty row.
    pub fn recall(&self) -> [Option<f64>; NUM_CLASSES] {
        let norm = self.row_normalized();
        let mut out = [None; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            if self.counts[c].iter().sum::<u64>() > 0 {
                out[c] = Some(norm[c][c]);
            }
        }
        out
    }

    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().flatten().sum();
        let diag: u64 = (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum();
        if total == 0 {
            0.0
        } else {
            diag as f64 / total as f64
        }
    }
}

pub fn confusion(scores: &[Vec<f32>], labels: &[CountLabel]) -> Result<ConfusionMatrix> {
    check_scores(scores, labels)?;
    let mut m = ConfusionMatrix::default();
    for (s, l) in scores.iter().zip(labels) {
        m.counts[l.index()][argmax(s)] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap: ClassAp,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
}

pub fn evaluate_scores(scores: &[Vec<f32>], labels: &[CountLabel]) -> Result<EvalReport> {
    let ap = map_per_class(scores, labels)?;
    let confusion = confusion(scores, labels)?;
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        ap,
        confusion,
    })
}

/// Writes the report as long-format CSV: `section,row,col,value`, with
/// sections `ap`, `map`, `accuracy`, `count` and `percent`.
pub fn write_report_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let mut lines = vec!["section,row,col,value".to_string()];
    for (c, ap) in report.ap.per_class.iter().enumerate() {
        let v = ap.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
        lines.push(format!("ap,{},,{v}", CountLabel::ALL[c]));
    }
    lines.push(format!("map,,,{:.6}", report.ap.mean));
    lines.push(format!("accuracy,,,{:.6}", report.accuracy));
    let norm = report.confusion.row_normalized();
    for r in 0..NUM_CLASSES {
        for c in 0..NUM_CLASSES {
            lines.push(format!(
                "count,{},{},{}",
                CountLabel::ALL[r],
                CountLabel::ALL[c],
                report.confusion.counts[r][c]
            ));
        }
    }
    for r in 0..NUM_CLASSES {
        for c in 0..NUM_CLASSES {
            lines.push(format!(
                "percent,{},{},{:.4}",
                CountLabel::ALL[r],
                CountLabel::ALL[c],
                100.0 * norm[r][c]
            ));
        }
    }
    for l in lines {
        writeln!(f, "{l}").map_err(io)?;
    }
    f.flush().map_err(io)
}
