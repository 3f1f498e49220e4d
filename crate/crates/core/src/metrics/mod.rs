//! Group fairness metrics over prediction logs.
//!
//! Everything is derived from exact integer tallies per subgroup, so results
//! are independent of record order and of how counting is parallelized.
//!
//! Multi-valued attributes are handled in two ways:
//! * per-group values compare a subgroup against the pooled rest of the data
//!   (one-vs-rest);
//! * overall values take the spread (max − min) of the per-group rate.
//!
//! With exactly two subgroups both reduce to the usual binary formulas.

mod io;
pub(crate) mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{read_predictions, read_predictions_str, write_predictions};
pub use report::{average_reports, evaluate, report_to_csv, GroupReport, GroupRow, OverallRow};

/// Default decision threshold applied to scores.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no prediction records")]
    EmptyRecords,
    #[error("record `{id}` has no value for attribute `{attribute}`")]
    MissingAttribute { id: String, attribute: String },
    #[error("record `{id}` is invalid: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("group `{0}` has no records")]
    EmptyGroup(String),
    #[error("attribute `{attribute}` has {found} non-empty subgroup(s); at least 2 are required")]
    InsufficientGroups { attribute: String, found: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One evaluated example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub y_true: u8,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_pred: Option<u8>,
    #[serde(default)]
    pub groups: BTreeMap<String, String>,
}

impl PredictionRecord {
    /// Stored prediction, or the binarized score when none was stored.
    pub fn prediction(&self, threshold: f64) -> u8 {
        self.y_pred.unwrap_or_else(|| binarize(self.score, threshold))
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |reason: String| MetricsError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if self.y_true > 1 {
            return Err(bad(format!("y_true = {} is not binary", self.y_true)));
        }
        if let Some(p) = self.y_pred {
            if p > 1 {
                return Err(bad(format!("y_pred = {p} is not binary")));
            }
        }
        if !(self.score.is_finite() && (0.0..=1.0).contains(&self.score)) {
            return Err(bad(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

/// 1 iff `score >= threshold`; a score exactly at the threshold is positive.
pub fn binarize(score: f64, threshold: f64) -> u8 {
    u8::from(score >= threshold)
}

/// Confusion counts for one subgroup.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n: u64,
    pub predicted_positive: u64,
    /// Records with `y_true = 1`.
    pub positives: u64,
    /// Records with `y_true = 0`.
    pub negatives: u64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub correct: u64,
}

impl Counts {
    fn add_record(&mut self, y_true: u8, y_pred: u8) {
        self.n += 1;
        self.predicted_positive += u64::from(y_pred);
        if y_true == 1 {
            self.positives += 1;
            self.true_positives += u64::from(y_pred);
        } else {
            self.negatives += 1;
            self.false_positives += u64::from(y_pred);
        }
        self.correct += u64::from(y_true == y_pred);
    }

    fn plus(self, o: Counts) -> Counts {
        Counts {
            n: self.n + o.n,
            predicted_positive: self.predicted_positive + o.predicted_positive,
            positives: self.positives + o.positives,
            negatives: self.negatives + o.negatives,
            true_positives: self.true_positives + o.true_positives,
            false_positives: self.false_positives + o.false_positives,
            correct: self.correct + o.correct,
        }
    }

    fn minus(self, o: Counts) -> Counts {
        Counts {
            n: self.n - o.n,
            predicted_positive: self.predicted_positive - o.predicted_positive,
            positives: self.positives - o.positives,
            negatives: self.negatives - o.negatives,
            true_positives: self.true_positives - o.true_positives,
            false_positives: self.false_positives - o.false_positives,
            correct: self.correct - o.correct,
        }
    }

    pub fn selection_rate(&self) -> Option<f64> {
        ratio(self.predicted_positive, self.n)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.correct, self.n)
    }

    /// True-positive rate; `None` without positive labels.
    pub fn tpr(&self) -> Option<f64> {
        ratio(self.true_positives, self.positives)
    }

    /// False-positive rate; `None` without negative labels.
    pub fn fpr(&self) -> Option<f64> {
        ratio(self.false_positives, self.negatives)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-subgroup counts for one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Tally {
    pub attribute: String,
    pub threshold: f64,
    pub groups: BTreeMap<String, Counts>,
}

impl Tally {
    pub fn from_records(
        records: &[PredictionRecord],
        attribute: &str,
        threshold: f64,
    ) -> Result<Tally, MetricsError> {
        if records.is_empty() {
            return Err(MetricsError::EmptyRecords);
        }
        const CHUNK: usize = 4096;
        let chunks: Vec<&[PredictionRecord]> = records.chunks(CHUNK).collect();
        let partials = crate::par::map(&chunks, |chunk| {
            let mut groups: BTreeMap<&str, Counts> = BTreeMap::new();
            for r in chunk.iter() {
                r.validate()?;
                let g = r
                    .groups
                    .get(attribute)
                    .ok_or_else(|| MetricsError::MissingAttribute {
                        id: r.id.clone(),
                        attribute: attribute.to_string(),
                    })?;
                groups
                    .entry(g.as_str())
                    .or_default()
                    .add_record(r.y_true, r.prediction(threshold));
            }
            Ok::<_, MetricsError>(groups)
        });
        let mut groups: BTreeMap<String, Counts> = BTreeMap::new();
        for partial in partials {
            for (g, c) in partial? {
                let slot = groups.entry(g.to_string()).or_default();
                *slot = slot.plus(c);
            }
        }
        Ok(Tally {
            attribute: attribute.to_string(),
            threshold,
            groups,
        })
    }

    pub fn total(&self) -> Counts {
        self.groups.values().fold(Counts::default(), |a, c| a.plus(*c))
    }

    /// Counts of every record outside `group`.
    pub fn complement(&self, group: &str) -> Counts {
        let own = self.groups.get(group).copied().unwrap_or_default();
        self.total().minus(own)
    }

    fn require_two(&self) -> Result<(), MetricsError> {
        if self.groups.len() < 2 {
            return Err(MetricsError::InsufficientGroups {
                attribute: self.attribute.clone(),
                found: self.groups.len(),
            });
        }
        Ok(())
    }
}

/// Pr[ŷ = 1 | group].
pub fn selection_rate(tally: &Tally, group: &str) -> Result<f64, MetricsError> {
    tally
        .groups
        .get(group)
        .and_then(Counts::selection_rate)
        .ok_or_else(|| MetricsError::EmptyGroup(group.to_string()))
}

/// One-vs-rest values per group plus the overall spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disparity {
    pub per_group: BTreeMap<String, f64>,
    pub overall: f64,
}

/// Demographic parity difference.
pub fn dpd(tally: &Tally) -> Result<Disparity, MetricsError> {
    tally.require_two()?;
    let mut per_group = BTreeMap::new();
    let mut rates = Vec::new();
    for (g, c) in &tally.groups {
        let own = c.selection_rate().expect("tallied groups are non-empty");
        let rest = tally
            .complement(g)
            .selection_rate()
            .expect("two groups guarantee a non-empty complement");
        per_group.insert(g.clone(), (own - rest).abs());
        rates.push(own);
    }
    Ok(Disparity {
        per_group,
        overall: spread(&rates).expect("at least two rates"),
    })
}

fn spread(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Some(max - min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rate {
    Tpr,
    Fpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Group,
    Complement,
}

/// A conditional rate that could not be computed because its stratum
/// (`y_true = 1` for TPR, `y_true = 0` for FPR) is empty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UndefinedRate {
    pub group: String,
    pub rate: Rate,
    pub side: Side,
}

/// Equalized-odds decomposition for one group against the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EodEntry {
    pub tpr_gap: Option<f64>,
    pub fpr_gap: Option<f64>,
    /// max of the defined gaps; `None` when neither is defined.
    pub eod: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eod {
    pub per_group: BTreeMap<String, EodEntry>,
    /// Spread of TPR over groups that have positives.
    pub overall_tpr_gap: Option<f64>,
    /// Spread of FPR over groups that have negatives.
    pub overall_fpr_gap: Option<f64>,
    pub overall: Option<f64>,
    pub undefined: Vec<UndefinedRate>,
}

fn max_defined(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Equalized odds difference. Groups lacking a stratum are flagged and left
/// out of that rate's comparison instead of being imputed.
pub fn eod(tally: &Tally) -> Result<Eod, MetricsError> {
    tally.require_two()?;
    let mut per_group = BTreeMap::new();
    let mut undefined = Vec::new();
    let mut tprs = Vec::new();
    let mut fprs = Vec::new();
    for (g, c) in &tally.groups {
        let rest = tally.complement(g);
        let mut gap = |own: Option<f64>, other: Option<f64>, rate: Rate| {
            if own.is_none() {
                undefined.push(UndefinedRate {
                    group: g.clone(),
                    rate,
                    side: Side::Group,
                });
            }
            if other.is_none() {
                undefined.push(UndefinedRate {
                    group: g.clone(),
                    rate,
                    side: Side::Complement,
                });
            }
            Some((own? - other?).abs())
        };
        let tpr_gap = gap(c.tpr(), rest.tpr(), Rate::Tpr);
        let fpr_gap = gap(c.fpr(), rest.fpr(), Rate::Fpr);
        tprs.extend(c.tpr());
        fprs.extend(c.fpr());
        per_group.insert(
            g.clone(),
            EodEntry {
                tpr_gap,
                fpr_gap,
                eod: max_defined(tpr_gap, fpr_gap),
            },
        );
    }
    let overall_tpr_gap = spread(&tprs);
    let overall_fpr_gap = spread(&fprs);
    Ok(Eod {
        per_group,
        overall_tpr_gap,
        overall_fpr_gap,
        overall: max_defined(overall_tpr_gap, overall_fpr_gap),
        undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub per_group: BTreeMap<String, f64>,
    /// Unweighted mean over groups.
    pub macro_average: f64,
}

pub fn group_accuracy(tally: &Tally) -> Result<Accuracy, MetricsError> {
    if tally.groups.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let per_group: BTreeMap<String, f64> = tally
        .groups
        .iter()
        .map(|(g, c)| {
            c.accuracy()
                .map(|a| (g.clone(), a))
                .ok_or_else(|| MetricsError::EmptyGroup(g.clone()))
        })
        .collect::<Result<_, _>>()?;
    let macro_average = per_group.values().sum::<f64>() / per_group.len() as f64;
    Ok(Accuracy {
        per_group,
        macro_average,
    })
}

/// max − min of per-group accuracy.
pub fn accuracy_parity_gap(tally: &Tally) -> Result<f64, MetricsError> {
    tally.require_two()?;
    let acc = group_accuracy(tally)?;
    let values: Vec<f64> = acc.per_group.values().copied().collect();
    Ok(spread(&values).expect("two groups"))
}
