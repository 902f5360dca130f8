//! Macro-F1 evaluation: per-class precision/recall/F1 over all k classes
//! (multiclass) or per-unit binary scores over all m units (multilabel),
//! averaged without support weighting.
//!
//! Zero-division convention: precision, recall, or F1 with a zero
//! denominator is 0. By default absent classes still enter the macro
//! mean at 0 — the strictest common convention; [`AbsentClasses`]
//! selects the laxer variant that drops zero-support classes from the
//! mean, since benchmark conventions differ on this point.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {preds} predictions vs {truth} labels")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("class index out of range in {what}: value {value}, limit {limit}")]
    IndexOutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },
    #[error("shape mismatch: predictions {preds:?} vs labels {truth:?}")]
    ShapeMismatch {
        preds: (usize, usize),
        truth: (usize, usize),
    },
}

/// Scores of one class (or one multilabel unit).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of ground-truth samples (positives, for multilabel units).
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Multiclass,
    Multilabel,
}

/// How classes (or units) with zero ground-truth support enter the
/// macro mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsentClasses {
    /// Count them at score 0 (the default, strictest convention).
    #[default]
    ScoreZero,
    /// Drop them from the mean.
    Exclude,
}

fn macro_mean(per_class: &[ClassScore], absent: AbsentClasses) -> f64 {
    match absent {
        AbsentClasses::ScoreZero => {
            per_class.iter().map(|s| s.f1).sum::<f64>() / per_class.len() as f64
        }
        AbsentClasses::Exclude => {
            let present: Vec<f64> = per_class
                .iter()
                .filter(|s| s.support > 0)
                .map(|s| s.f1)
                .collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        }
    }
}

/// Per-class breakdown plus the unweighted macro mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub kind: ReportKind,
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
    /// Multiclass only: entry (r, c) counts truth r predicted as c.
    pub confusion: Option<Array2<u64>>,
}

impl EvalReport {
    /// CSV rows `name,precision,recall,f1,support`, one per class/unit,
    /// then a final `macro` row carrying the unweighted means and the
    /// total support.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "name,precision,recall,f1,support")?;
        let prefix = match self.kind {
            ReportKind::Multiclass => "class",
            ReportKind::Multilabel => "unit",
        };
        for (i, s) in self.per_class.iter().enumerate() {
            writeln!(
                w,
                "{prefix}_{i},{},{},{},{}",
                s.precision, s.recall, s.f1, s.support
            )?;
        }
        let n = self.per_class.len() as f64;
        let mp = self.per_class.iter().map(|s| s.precision).sum::<f64>() / n;
        let mr = self.per_class.iter().map(|s| s.recall).sum::<f64>() / n;
        let total: u64 = self.per_class.iter().map(|s| s.support).sum();
        writeln!(w, "macro,{mp},{mr},{},{total}", self.macro_f1)
    }
}

fn score_from_counts(tp: u64, fp: u64, fn_: u64) -> ClassScore {
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassScore {
        precision,
        recall,
        f1,
        support: tp + fn_,
    }
}

/// `k × k` counts; entry (r, c) is the number of samples with truth r
/// predicted as c. Row sums are the class supports.
pub fn confusion_matrix(
    preds: &[u16],
    truth: &[u16],
    k: usize,
) -> Result<Array2<u64>, MetricsError> {
    if preds.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            truth: truth.len(),
        });
    }
    let mut m = Array2::zeros((k, k));
    for (&p, &t) in preds.iter().zip(truth.iter()) {
        if p as usize >= k {
            return Err(MetricsError::IndexOutOfRange {
                what: "predictions",
                value: p as usize,
                limit: k,
            });
        }
        if t as usize >= k {
            return Err(MetricsError::IndexOutOfRange {
                what: "labels",
                value: t as usize,
                limit: k,
            });
        }
        m[[t as usize, p as usize]] += 1;
    }
    Ok(m)
}

/// Macro F1 over all `k` classes under the default convention (absent
/// classes included at score 0).
pub fn macro_f1_multiclass(
    preds: &[u16],
    truth: &[u16],
    k: usize,
) -> Result<EvalReport, MetricsError> {
    macro_f1_multiclass_with(preds, truth, k, AbsentClasses::default())
}

/// [`macro_f1_multiclass`] with an explicit absent-class convention.
pub fn macro_f1_multiclass_with(
    preds: &[u16],
    truth: &[u16],
    k: usize,
    absent: AbsentClasses,
) -> Result<EvalReport, MetricsError> {
    let confusion = confusion_matrix(preds, truth, k)?;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[[c, c]];
        let fn_ = confusion.row(c).sum() - tp;
        let fp = confusion.column(c).sum() - tp;
        per_class.push(score_from_counts(tp, fp, fn_));
    }
    let macro_f1 = macro_mean(&per_class, absent);
    Ok(EvalReport {
        kind: ReportKind::Multiclass,
        per_class,
        macro_f1,
        confusion: Some(confusion),
    })
}

/// Macro F1 over the m units, each scored as an independent binary task
/// on its positive class, under the default convention.
pub fn macro_f1_multilabel(
    preds: ArrayView2<'_, u8>,
    truth: ArrayView2<'_, u8>,
) -> Result<EvalReport, MetricsError> {
    macro_f1_multilabel_with(preds, truth, AbsentClasses::default())
}

/// [`macro_f1_multilabel`] with an explicit absent-class convention
/// (units with no ground-truth positives).
pub fn macro_f1_multilabel_with(
    preds: ArrayView2<'_, u8>,
    truth: ArrayView2<'_, u8>,
    absent: AbsentClasses,
) -> Result<EvalReport, MetricsError> {
    if preds.dim() != truth.dim() {
        return Err(MetricsError::ShapeMismatch {
            preds: preds.dim(),
            truth: truth.dim(),
        });
    }
    let m = preds.ncols();
    let mut per_class = Vec::with_capacity(m);
    for j in 0..m {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for i in 0..preds.nrows() {
            match (preds[[i, j]], truth[[i, j]]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        per_class.push(score_from_counts(tp, fp, fn_));
    }
    let macro_f1 = macro_mean(&per_class, absent);
    Ok(EvalReport {
        kind: ReportKind::Multilabel,
        per_class,
        macro_f1,
        confusion: None,
    })
}
