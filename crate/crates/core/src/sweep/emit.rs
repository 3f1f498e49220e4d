use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::svg::{line_chart, ChartSeries};
use super::{SweepError, SweepResult};
use crate::fsutil::write_atomic;
use crate::metrics::report::{csv_field, fmt_opt};
use crate::metrics::GroupReport;

/// Group label of the whole-population row.
pub const OVERALL: &str = "__overall__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Svg,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Json, Format::Csv, Format::Svg];
}

const COLUMNS: [&str; 15] = [
    "n",
    "positives",
    "negatives",
    "accuracy",
    "macro_accuracy",
    "micro_accuracy",
    "selection_rate",
    "tpr",
    "fpr",
    "dpd",
    "tpr_gap",
    "fpr_gap",
    "eod",
    "accuracy_parity_gap",
    "criterion",
];

pub fn metric_columns() -> &'static [&'static str] {
    &COLUMNS
}

type Metrics = Vec<(&'static str, Option<f64>)>;

/// Every metric of `report` flattened per group (subgroups first, then
/// [`OVERALL`]), one value per entry of [`metric_columns`]. Group rows carry
/// one-vs-rest gaps; the overall row carries max − min gaps.
pub fn row_metrics(report: &GroupReport, criterion: Option<f64>) -> Vec<(String, Metrics)> {
    let mut out = Vec::with_capacity(report.groups.len() + 1);
    for g in &report.groups {
        let vals = [
            Some(g.n as f64),
            Some(g.positives as f64),
            Some(g.negatives as f64),
            Some(g.accuracy),
            None,
            None,
            Some(g.selection_rate),
            g.tpr,
            g.fpr,
            g.dpd_ovr,
            g.tpr_gap_ovr,
            g.fpr_gap_ovr,
            g.eod_ovr,
            None,
            None,
        ];
        out.push((g.group.clone(), COLUMNS.iter().copied().zip(vals).collect()));
    }
    let o = &report.overall;
    let pos: u64 = report.groups.iter().map(|g| g.positives).sum();
    let neg: u64 = report.groups.iter().map(|g| g.negatives).sum();
    let vals = [
        Some(o.n as f64),
        Some(pos as f64),
        Some(neg as f64),
        None,
        Some(o.macro_accuracy),
        Some(o.micro_accuracy),
        None,
        None,
        None,
        o.overall_dpd,
        o.overall_tpr_gap,
        o.overall_fpr_gap,
        o.overall_eod,
        o.accuracy_parity_gap,
        criterion,
    ];
    out.push((OVERALL.to_string(), COLUMNS.iter().copied().zip(vals).collect()));
    out
}

fn csv_line(out: &mut String, kind: &str, variant: &str, lambda: Option<f64>, seed: Option<u64>, group: &str, vals: &[Option<f64>]) {
    let _ = write!(
        out,
        "{kind},{},{},{},{}",
        csv_field(variant),
        fmt_opt(lambda),
        seed.map(|s| s.to_string()).unwrap_or_default(),
        csv_field(group)
    );
    for v in vals {
        out.push(',');
        out.push_str(&fmt_opt(*v));
    }
    out.push('\n');
}

/// Long-form CSV: `row` lines per (variant, λ, seed, group), `baseline`
/// lines per reference model, and `mean` / `se` lines per (variant, λ, group).
pub fn to_csv(result: &SweepResult) -> String {
    let mut out = String::from("kind,variant,lambda,seed,group");
    for c in COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in &result.rows {
        for (group, m) in row_metrics(&r.report, Some(r.criterion)) {
            let vals: Vec<_> = m.iter().map(|p| p.1).collect();
            csv_line(&mut out, "row", &r.variant, Some(r.lambda), Some(r.seed), &group, &vals);
        }
    }
    for b in &result.baselines {
        for (group, m) in row_metrics(&b.report, Some(b.criterion)) {
            let vals: Vec<_> = m.iter().map(|p| p.1).collect();
            csv_line(&mut out, "baseline", &b.name, None, Some(b.seed), &group, &vals);
        }
    }
    for a in &result.aggregates {
        for (kind, pick) in [("mean", 0), ("se", 1)] {
            let vals: Vec<_> = COLUMNS
                .iter()
                .map(|c| a.stats.get(*c).map(|s| if pick == 0 { s.mean } else { s.se }))
                .collect();
            csv_line(&mut out, kind, &a.variant, Some(a.lambda), None, &a.group, &vals);
        }
    }
    out
}

const CHARTS: [(&str, &str, &str); 3] = [
    ("acc.svg", "macro_accuracy", "Macro accuracy"),
    ("dpd.svg", "dpd", "Demographic parity difference"),
    ("eod.svg", "eod", "Equalized odds difference"),
];

fn overall_metric(report: &GroupReport, metric: &str) -> Option<f64> {
    row_metrics(report, None)
        .pop()
        .and_then(|(_, m)| m.into_iter().find(|p| p.0 == metric).and_then(|p| p.1))
}

/// One chart of an overall metric against λ. Series follow variant order;
/// points within a series are drawn in (λ, seed) order whatever the row order.
pub fn chart(result: &SweepResult, metric: &str, title: &str) -> String {
    let mut series = Vec::new();
    for variant in result.variants() {
        let mut rows: Vec<_> = result.rows.iter().filter(|r| r.variant == variant).collect();
        rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.seed.cmp(&b.seed)));
        let points = rows
            .iter()
            .filter_map(|r| overall_metric(&r.report, metric).map(|v| (r.lambda, v)))
            .collect();
        let mut mean: Vec<(f64, f64)> = result
            .aggregates
            .iter()
            .filter(|a| a.variant == variant && a.group == OVERALL)
            .filter_map(|a| a.stats.get(metric).map(|s| (a.lambda, s.mean)))
            .collect();
        mean.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.push(ChartSeries {
            name: variant,
            points,
            mean,
        });
    }
    let mut names: Vec<&str> = Vec::new();
    for b in &result.baselines {
        if !names.contains(&b.name.as_str()) {
            names.push(&b.name);
        }
    }
    let refs: Vec<(String, f64)> = names
        .into_iter()
        .filter_map(|name| {
            let v: Vec<f64> = result
                .baselines
                .iter()
                .filter(|b| b.name == name)
                .filter_map(|b| overall_metric(&b.report, metric))
                .collect();
            (!v.is_empty()).then(|| (name.to_string(), v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect();
    line_chart(title, "λ", metric, &series, &refs)
}

/// Writes the requested artifacts into `dir` (created if missing) and returns
/// their paths. Every file is written atomically.
pub fn emit(result: &SweepResult, formats: &[Format], dir: &Path) -> Result<Vec<PathBuf>, SweepError> {
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    if formats.contains(&Format::Json) {
        let mut text = serde_json::to_string_pretty(result).map_err(|e| {
            SweepError::io(&dir.join("result.json"), std::io::Error::other(e))
        })?;
        text.push('\n');
        files.push((dir.join("result.json"), text.into_bytes()));
    }
    if formats.contains(&Format::Csv) {
        files.push((dir.join("result.csv"), to_csv(result).into_bytes()));
    }
    if formats.contains(&Format::Svg) {
        for (file, metric, title) in CHARTS {
            files.push((dir.join(file), chart(result, metric, title).into_bytes()));
        }
    }
    if files.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir).map_err(|e| SweepError::io(dir, e))?;
    let mut out = Vec::with_capacity(files.len());
    for (path, bytes) in files {
        write_atomic(&path, &bytes).map_err(|e| SweepError::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::tests::synthetic_result;
    use super::*;

    #[test]
    fn empty_format_list_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("run");
        let r = synthetic_result(&[0.0, 1.0], &[13], |l, _| l);
        assert!(emit(&r, &[], &target).unwrap().is_empty());
        assert!(!target.exists());
    }

    #[test]
    fn csv_shape() {
        let r = synthetic_result(&[0.0, 0.5], &[13, 14], |l, s| l + s as f64 / 100.0);
        let csv = to_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        // 4 rows × 3 groups, 2 λ × 3 groups × (mean, se)
        assert_eq!(lines.len(), 1 + 12 + 12);
        assert!(lines[0].starts_with("kind,variant,lambda,seed,group,n,"));
        assert!(lines[1].starts_with("row,merge,0,13,A,"));
        assert!(csv.contains("\nmean,merge,0.5,,__overall__,"));
    }

    #[test]
    fn overall_metric_lookup() {
        let r = synthetic_result(&[0.0], &[13], |_, _| 0.25);
        assert_eq!(overall_metric(&r.rows[0].report, "macro_accuracy"), Some(0.25));
        assert_eq!(overall_metric(&r.rows[0].report, "fpr_gap"), None);
    }

    #[test]
    fn all_formats() {
        let dir = tempfile::tempdir().unwrap();
        let r = synthetic_result(&[0.0, 1.0], &[13, 14], |l, s| l * s as f64);
        let files = emit(&r, &Format::ALL, dir.path()).unwrap();
        let names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["result.json", "result.csv", "acc.svg", "dpd.svg", "eod.svg"]);
        let back: SweepResult =
            serde_json::from_slice(&std::fs::read(dir.path().join("result.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
