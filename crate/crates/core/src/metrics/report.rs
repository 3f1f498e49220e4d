use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    accuracy_parity_gap, dpd, eod, group_accuracy, MetricsError, PredictionRecord, Tally,
    UndefinedRate,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub n: u64,
    pub positives: u64,
    pub negatives: u64,
    pub accuracy: f64,
    pub selection_rate: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    /// One-vs-rest demographic parity difference.
    pub dpd_ovr: Option<f64>,
    pub tpr_gap_ovr: Option<f64>,
    pub fpr_gap_ovr: Option<f64>,
    /// One-vs-rest equalized odds difference.
    pub eod_ovr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallRow {
    pub n: u64,
    pub macro_accuracy: f64,
    pub micro_accuracy: f64,
    pub overall_dpd: Option<f64>,
    pub overall_tpr_gap: Option<f64>,
    pub overall_fpr_gap: Option<f64>,
    pub overall_eod: Option<f64>,
    pub accuracy_parity_gap: Option<f64>,
}

/// All metrics for one attribute and one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub attribute: String,
    pub threshold: f64,
    pub groups: Vec<GroupRow>,
    pub overall: OverallRow,
    /// Conditional rates left out of the EOD comparison.
    #[serde(default)]
    pub undefined_rates: Vec<UndefinedRate>,
    /// Metrics that could not be computed at all, with the reason.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl GroupReport {
    pub fn row(&self, group: &str) -> Option<&GroupRow> {
        self.groups.iter().find(|r| r.group == group)
    }
}

/// Computes every metric for `attribute`. Metrics that need two subgroups are
/// left empty (with a note) on single-group input; accuracy is still filled.
pub fn evaluate(
    records: &[PredictionRecord],
    attribute: &str,
    threshold: f64,
) -> Result<GroupReport, MetricsError> {
    let tally = Tally::from_records(records, attribute, threshold)?;
    report_from_tally(&tally)
}

pub(crate) fn report_from_tally(tally: &Tally) -> Result<GroupReport, MetricsError> {
    let acc = group_accuracy(tally)?;
    let mut notes = Vec::new();
    let mut note = |e: MetricsError| notes.push(e.to_string());
    let dpd = dpd(tally).map_err(&mut note).ok();
    let eod = eod(tally).map_err(&mut note).ok();
    let gap = accuracy_parity_gap(tally).ok();

    let groups = tally
        .groups
        .iter()
        .map(|(g, c)| {
            let e = eod.as_ref().map(|e| e.per_group[g]);
            GroupRow {
                group: g.clone(),
                n: c.n,
                positives: c.positives,
                negatives: c.negatives,
                accuracy: acc.per_group[g],
                selection_rate: c.selection_rate().expect("non-empty group"),
                tpr: c.tpr(),
                fpr: c.fpr(),
                dpd_ovr: dpd.as_ref().map(|d| d.per_group[g]),
                tpr_gap_ovr: e.and_then(|e| e.tpr_gap),
                fpr_gap_ovr: e.and_then(|e| e.fpr_gap),
                eod_ovr: e.and_then(|e| e.eod),
            }
        })
        .collect();
    let total = tally.total();
    Ok(GroupReport {
        attribute: tally.attribute.clone(),
        threshold: tally.threshold,
        groups,
        overall: OverallRow {
            n: total.n,
            macro_accuracy: acc.macro_average,
            micro_accuracy: total.accuracy().expect("non-empty"),
            overall_dpd: dpd.as_ref().map(|d| d.overall),
            overall_tpr_gap: eod.as_ref().and_then(|e| e.overall_tpr_gap),
            overall_fpr_gap: eod.as_ref().and_then(|e| e.overall_fpr_gap),
            overall_eod: eod.as_ref().and_then(|e| e.overall),
            accuracy_parity_gap: gap,
        },
        undefined_rates: eod.map(|e| e.undefined).unwrap_or_default(),
        notes,
    })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Element-wise mean of several reports over the same attribute (for example
/// one per seed). Counts are summed; optional values average over the reports
/// where they are defined.
pub fn average_reports(reports: &[GroupReport]) -> Option<GroupReport> {
    let first = reports.first()?;
    let mut names: Vec<String> = reports
        .iter()
        .flat_map(|r| r.groups.iter().map(|g| g.group.clone()))
        .collect();
    names.sort();
    names.dedup();
    let rows_for = |name: &str| -> Vec<&GroupRow> {
        reports.iter().filter_map(|r| r.row(name)).collect()
    };
    let groups = names
        .iter()
        .map(|name| {
            let rows = rows_for(name);
            GroupRow {
                group: name.clone(),
                n: rows.iter().map(|r| r.n).sum(),
                positives: rows.iter().map(|r| r.positives).sum(),
                negatives: rows.iter().map(|r| r.negatives).sum(),
                accuracy: mean(rows.iter().map(|r| r.accuracy)),
                selection_rate: mean(rows.iter().map(|r| r.selection_rate)),
                tpr: mean_defined(rows.iter().map(|r| r.tpr)),
                fpr: mean_defined(rows.iter().map(|r| r.fpr)),
                dpd_ovr: mean_defined(rows.iter().map(|r| r.dpd_ovr)),
                tpr_gap_ovr: mean_defined(rows.iter().map(|r| r.tpr_gap_ovr)),
                fpr_gap_ovr: mean_defined(rows.iter().map(|r| r.fpr_gap_ovr)),
                eod_ovr: mean_defined(rows.iter().map(|r| r.eod_ovr)),
            }
        })
        .collect();
    let o = |f: fn(&OverallRow) -> Option<f64>| mean_defined(reports.iter().map(|r| f(&r.overall)));
    let mut undefined: Vec<UndefinedRate> =
        reports.iter().flat_map(|r| r.undefined_rates.clone()).collect();
    undefined.sort();
    undefined.dedup();
    let mut notes: Vec<String> = reports.iter().flat_map(|r| r.notes.clone()).collect();
    notes.sort();
    notes.dedup();
    Some(GroupReport {
        attribute: first.attribute.clone(),
        threshold: first.threshold,
        groups,
        overall: OverallRow {
            n: reports.iter().map(|r| r.overall.n).sum(),
            macro_accuracy: mean(reports.iter().map(|r| r.overall.macro_accuracy)),
            micro_accuracy: mean(reports.iter().map(|r| r.overall.micro_accuracy)),
            overall_dpd: o(|r| r.overall_dpd),
            overall_tpr_gap: o(|r| r.overall_tpr_gap),
            overall_fpr_gap: o(|r| r.overall_fpr_gap),
            overall_eod: o(|r| r.overall_eod),
            accuracy_parity_gap: o(|r| r.accuracy_parity_gap),
        },
        undefined_rates: undefined,
        notes,
    })
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with one row per subgroup and a final `__overall__` row. Numbers use
/// the shortest representation that parses back to the same f64.
pub fn report_to_csv(report: &GroupReport) -> String {
    let mut out = String::from(
        "group,n,positives,negatives,accuracy,selection_rate,tpr,fpr,dpd,tpr_gap,fpr_gap,eod,accuracy_parity_gap\n",
    );
    for r in &report.groups {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},",
            csv_field(&r.group),
            r.n,
            r.positives,
            r.negatives,
            r.accuracy,
            r.selection_rate,
            fmt_opt(r.tpr),
            fmt_opt(r.fpr),
            fmt_opt(r.dpd_ovr),
            fmt_opt(r.tpr_gap_ovr),
            fmt_opt(r.fpr_gap_ovr),
            fmt_opt(r.eod_ovr),
        );
    }
    let o = &report.overall;
    let _ = writeln!(
        out,
        "__overall__,{},,,{},,,,{},{},{},{},{}",
        o.n,
        o.macro_accuracy,
        fmt_opt(o.overall_dpd),
        fmt_opt(o.overall_tpr_gap),
        fmt_opt(o.overall_fpr_gap),
        fmt_opt(o.overall_eod),
        fmt_opt(o.accuracy_parity_gap),
    );
    out
}

/// Quotes a CSV field when it contains a delimiter, quote or newline.
pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
