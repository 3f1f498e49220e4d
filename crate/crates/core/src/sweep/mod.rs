//! Coefficient sweeps over merged and injected models, coefficient selection
//! and worst-subgroup ranking.
//!
//! A sweep evaluates one edited model per (variant, λ, seed) point. Points are
//! independent and run concurrently; rows are always assembled in
//! variant × grid × seed order.

mod emit;
mod pipeline;
mod svg;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arith::{self, ArithError, TaskVector, WeightedVector};
use crate::ckpt::Checkpoint;
use crate::lab::{predict, Example, LabError};
use crate::metrics::{evaluate, GroupReport, MetricsError, DEFAULT_THRESHOLD};

pub use emit::{chart, emit, metric_columns, row_metrics, to_csv, Format, OVERALL};
pub use pipeline::{prepare_seed, run_pipeline, write_run, PipelineConfig, PipelineRun, SeedArtifacts};
pub use svg::{line_chart, ChartSeries};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep config: {0}")]
    InvalidConfig(String),
    #[error("need {requested} non-excluded groups, report has {available}")]
    InsufficientGroups { requested: usize, available: usize },
    #[error("sweep result has no rows")]
    EmptyResult,
    #[error("{variant} at λ={lambda}, seed {seed}: {source}")]
    Point {
        variant: String,
        lambda: f64,
        seed: u64,
        #[source]
        source: Box<SweepError>,
    },
    #[error(transparent)]
    Arith(#[from] ArithError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error(transparent)]
    Ckpt(#[from] crate::ckpt::CkptError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SweepError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        SweepError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Merge,
    Inject,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Merge => "merge",
            Mode::Inject => "inject",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Mode::Merge => merge_grid(),
            Mode::Inject => inject_grid(),
        }
    }
}

/// 0.0, 0.1, …, 1.0
pub fn merge_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// 0.0, 0.2, …, 1.0
pub fn inject_grid() -> Vec<f64> {
    (0..=5).map(|i| i as f64 / 5.0).collect()
}

pub fn default_seeds() -> Vec<u64> {
    vec![13, 14, 15]
}

/// What `select_lambda` maximizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Macro-averaged subgroup accuracy on the training split.
    #[default]
    TrainAccuracy,
    /// Macro-averaged subgroup accuracy on the evaluation split.
    EvalAccuracy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub attribute: String,
    #[serde(default)]
    pub criterion: Criterion,
    #[serde(default)]
    pub eval_split: Split,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl SweepConfig {
    pub fn new(mode: Mode, attribute: impl Into<String>) -> Self {
        SweepConfig {
            grid: mode.default_grid(),
            seeds: default_seeds(),
            attribute: attribute.into(),
            criterion: Criterion::default(),
            eval_split: Split::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        if self.grid.is_empty() {
            return Err(SweepError::InvalidConfig("grid is empty".into()));
        }
        if let Some(x) = self.grid.iter().find(|x| !x.is_finite()) {
            return Err(SweepError::InvalidConfig(format!("grid value {x} is not finite")));
        }
        if let Some(w) = self.grid.windows(2).find(|w| w[0] >= w[1]) {
            return Err(SweepError::InvalidConfig(format!(
                "grid must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if self.seeds.is_empty() {
            return Err(SweepError::InvalidConfig("seeds are empty".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(SweepError::InvalidConfig("seeds repeat".into()));
        }
        if self.attribute.is_empty() {
            return Err(SweepError::InvalidConfig("attribute is empty".into()));
        }
        if !(self.threshold.is_finite() && (0.0..=1.0).contains(&self.threshold)) {
            return Err(SweepError::InvalidConfig(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Report on the evaluation split plus the selection-criterion value.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: GroupReport,
    pub criterion: f64,
}

pub trait Evaluator: Sync {
    fn evaluate(&self, model: &Checkpoint) -> Result<Evaluation, SweepError>;
}

/// Scores toy-model checkpoints on one corpus split.
#[derive(Debug, Clone)]
pub struct ToyEvaluator {
    pub attribute: String,
    pub threshold: f64,
    pub criterion: Criterion,
    pub eval: Vec<Example>,
    /// Training split, scored only when the criterion needs it.
    pub train: Vec<Example>,
}

impl ToyEvaluator {
    pub fn new(config: &SweepConfig, train: &[Example], test: &[Example]) -> Self {
        let eval = match config.eval_split {
            Split::Train => train,
            Split::Test => test,
        };
        ToyEvaluator {
            attribute: config.attribute.clone(),
            threshold: config.threshold,
            criterion: config.criterion,
            eval: eval.to_vec(),
            train: train.to_vec(),
        }
    }

    fn report(&self, model: &Checkpoint, examples: &[Example]) -> Result<GroupReport, SweepError> {
        let preds = predict(model, examples)?;
        Ok(evaluate(&preds, &self.attribute, self.threshold)?)
    }
}

impl Evaluator for ToyEvaluator {
    fn evaluate(&self, model: &Checkpoint) -> Result<Evaluation, SweepError> {
        let report = self.report(model, &self.eval)?;
        let criterion = match self.criterion {
            Criterion::EvalAccuracy => report.overall.macro_accuracy,
            Criterion::TrainAccuracy if self.eval == self.train => report.overall.macro_accuracy,
            Criterion::TrainAccuracy => self.report(model, &self.train)?.overall.macro_accuracy,
        };
        Ok(Evaluation { report, criterion })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub lambda: f64,
    pub seed: u64,
    pub criterion: f64,
    pub report: GroupReport,
}

/// An unedited reference model (base, FFT, LoRA) evaluated the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub name: String,
    pub seed: u64,
    pub criterion: f64,
    pub report: GroupReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation over √n; zero for a single seed.
    pub se: f64,
    pub n: usize,
}

impl Stat {
    /// `None` when no value is defined.
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        };
        Some(Stat { mean, se, n })
    }
}

/// Across-seed statistics of every metric of one group (or the overall row)
/// at one (variant, λ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub lambda: f64,
    pub group: String,
    pub stats: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub variant: String,
    pub lambda: f64,
    pub mean_criterion: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Checkpoint and vector ids per seed, keyed by role.
    pub checkpoints: BTreeMap<u64, BTreeMap<String, String>>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub mode: Mode,
    pub config: SweepConfig,
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<AggregateRow>,
    #[serde(default)]
    pub baselines: Vec<BaselineRow>,
    #[serde(default)]
    pub selections: Vec<Selection>,
    /// Injection mode: the groups whose vectors were injected, worst first.
    #[serde(default)]
    pub worst_groups: Vec<String>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl SweepResult {
    pub fn from_rows(mode: Mode, config: SweepConfig, rows: Vec<SweepRow>) -> Self {
        let aggregates = aggregate(&rows);
        SweepResult {
            mode,
            config,
            rows,
            aggregates,
            baselines: Vec::new(),
            selections: Vec::new(),
            worst_groups: Vec::new(),
            provenance: Provenance::default(),
        }
    }

    /// Variants in first-appearance order.
    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant.clone());
            }
        }
        out
    }

    pub fn row(&self, variant: &str, lambda: f64, seed: u64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.lambda == lambda && r.seed == seed)
    }

    pub fn aggregate(&self, variant: &str, lambda: f64, group: &str) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.variant == variant && a.lambda == lambda && a.group == group)
    }

    pub fn baseline(&self, name: &str, seed: u64) -> Option<&BaselineRow> {
        self.baselines.iter().find(|b| b.name == name && b.seed == seed)
    }

    /// Mean criterion of a baseline across seeds.
    pub fn baseline_mean(&self, name: &str) -> Option<f64> {
        let mut v: Vec<(u64, f64)> = self
            .baselines
            .iter()
            .filter(|b| b.name == name)
            .map(|b| (b.seed, b.criterion))
            .collect();
        v.sort_by_key(|p| p.0);
        let values: Vec<f64> = v.into_iter().map(|p| p.1).collect();
        Stat::of(&values).map(|s| s.mean)
    }
}

/// Recomputes every across-seed aggregate from the rows. Values are summed
/// in seed order, so the result does not depend on row order.
pub fn aggregate(rows: &[SweepRow]) -> Vec<AggregateRow> {
    // (variant, λ) in first-appearance order
    let mut keys: Vec<(&str, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| k.0 == r.variant && k.1 == r.lambda) {
            keys.push((&r.variant, r.lambda));
        }
    }
    let mut out = Vec::new();
    for (variant, lambda) in keys {
        let mut members: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| r.variant == variant && r.lambda == lambda)
            .collect();
        members.sort_by_key(|r| r.seed);
        let mut groups: BTreeMap<String, BTreeMap<&'static str, Vec<f64>>> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for r in &members {
            for (group, metrics) in row_metrics(&r.report, Some(r.criterion)) {
                if !order.contains(&group) {
                    order.push(group.clone());
                }
                let slot = groups.entry(group).or_default();
                for (name, value) in metrics {
                    let values = slot.entry(name).or_default();
                    if let Some(v) = value {
                        values.push(v);
                    }
                }
            }
        }
        for group in order {
            let stats = groups[&group]
                .iter()
                .filter_map(|(name, values)| Stat::of(values).map(|s| (name.to_string(), s)))
                .collect();
            out.push(AggregateRow {
                variant: variant.to_string(),
                lambda,
                group,
                stats,
            });
        }
    }
    out
}

/// One seed's inputs to a merge sweep.
pub struct MergeInput<'a> {
    pub seed: u64,
    pub base: &'a Checkpoint,
    pub vectors: &'a [TaskVector],
    pub evaluator: &'a dyn Evaluator,
}

/// One seed's inputs to an injection sweep.
pub struct InjectInput<'a> {
    pub seed: u64,
    pub sft: &'a Checkpoint,
    pub worst: &'a TaskVector,
    pub evaluator: &'a dyn Evaluator,
}

fn check_seeds(config: &SweepConfig, seeds: &[u64]) -> Result<(), SweepError> {
    if seeds != config.seeds.as_slice() {
        return Err(SweepError::InvalidConfig(format!(
            "inputs cover seeds {seeds:?}, config lists {:?}",
            config.seeds
        )));
    }
    Ok(())
}

fn run_points<F>(
    config: &SweepConfig,
    variant: &str,
    seeds: &[u64],
    point: F,
) -> Result<Vec<SweepRow>, SweepError>
where
    F: Fn(f64, usize) -> Result<Evaluation, SweepError> + Sync,
{
    let n = seeds.len();
    let results = crate::par::map_range(config.grid.len() * n, |k| {
        let (lambda, s) = (config.grid[k / n], k % n);
        point(lambda, s).map_err(|e| SweepError::Point {
            variant: variant.to_string(),
            lambda,
            seed: seeds[s],
            source: Box::new(e),
        })
    });
    let mut rows = Vec::with_capacity(results.len());
    for (k, res) in results.into_iter().enumerate() {
        let ev = res?;
        rows.push(SweepRow {
            variant: variant.to_string(),
            lambda: config.grid[k / n],
            seed: seeds[k % n],
            criterion: ev.criterion,
            report: ev.report,
        });
    }
    Ok(rows)
}

/// Merges every seed's vector set into its base with one uniform λ per grid
/// point and evaluates the result.
pub fn lambda_sweep(config: &SweepConfig, inputs: &[MergeInput<'_>]) -> Result<SweepResult, SweepError> {
    config.validate()?;
    let seeds: Vec<u64> = inputs.iter().map(|i| i.seed).collect();
    check_seeds(config, &seeds)?;
    for inp in inputs {
        // surface incompatibility once, before the grid fans out
        let parts: Vec<WeightedVector> =
            inp.vectors.iter().map(|v| WeightedVector::new(v.clone(), 0.0)).collect();
        arith::merge(inp.base, &parts).map_err(|e| SweepError::Point {
            variant: "merge".into(),
            lambda: 0.0,
            seed: inp.seed,
            source: Box::new(e.into()),
        })?;
    }
    let rows = run_points(config, "merge", &seeds, |lambda, s| {
        let inp = &inputs[s];
        let parts: Vec<WeightedVector> = inp
            .vectors
            .iter()
            .map(|v| WeightedVector::new(v.clone(), lambda))
            .collect();
        let merged = arith::merge(inp.base, &parts)?;
        inp.evaluator.evaluate(&merged)
    })?;
    Ok(SweepResult::from_rows(Mode::Merge, config.clone(), rows))
}

/// Evaluates `sft + λ·worst` over the grid for every seed. Rows are labelled
/// with `variant`.
pub fn inject_sweep(
    config: &SweepConfig,
    variant: &str,
    inputs: &[InjectInput<'_>],
) -> Result<SweepResult, SweepError> {
    config.validate()?;
    let seeds: Vec<u64> = inputs.iter().map(|i| i.seed).collect();
    check_seeds(config, &seeds)?;
    let rows = run_points(config, variant, &seeds, |lambda, s| {
        let inp = &inputs[s];
        let edited = arith::inject(inp.sft, inp.worst, lambda)?;
        inp.evaluator.evaluate(&edited)
    })?;
    Ok(SweepResult::from_rows(Mode::Inject, config.clone(), rows))
}

/// λ with the highest across-seed mean criterion among `variant`'s rows
/// (all rows when `None`). Ties go to the smallest λ. Independent of row
/// order.
pub fn select_lambda(result: &SweepResult, variant: Option<&str>) -> Result<Selection, SweepError> {
    let mut pts: Vec<(f64, u64, &str, f64)> = result
        .rows
        .iter()
        .filter(|r| variant.is_none_or(|v| r.variant == v))
        .map(|r| (r.lambda, r.seed, r.variant.as_str(), r.criterion))
        .collect();
    if pts.is_empty() {
        return Err(SweepError::EmptyResult);
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(b.2)));
    let mut best: Option<(f64, f64)> = None;
    for chunk in pts.chunk_by(|a, b| a.0 == b.0) {
        let values: Vec<f64> = chunk.iter().map(|p| p.3).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        if best.is_none_or(|(_, m)| mean > m) {
            best = Some((chunk[0].0, mean));
        }
    }
    let (lambda, mean_criterion) = best.expect("nonempty");
    Ok(Selection {
        variant: variant.map_or_else(|| result.variants().join("+"), str::to_string),
        lambda,
        mean_criterion,
    })
}

/// Ranking score of one group: the mean of its one-vs-rest DPD and EOD,
/// undefined values counting as zero.
pub fn disparity_score(report: &GroupReport, group: &str) -> Option<f64> {
    let row = report.row(group)?;
    Some((row.dpd_ovr.unwrap_or(0.0) + row.eod_ovr.unwrap_or(0.0)) / 2.0)
}

/// The `k` groups with the largest `(dpd_ovr + eod_ovr) / 2`, ties broken by
/// larger `n`, then by name. Exclusions match case-insensitively.
pub fn worst_subgroups(
    report: &GroupReport,
    k: usize,
    exclusions: &[String],
) -> Result<Vec<String>, SweepError> {
    let mut ranked: Vec<(f64, u64, &str)> = report
        .groups
        .iter()
        .filter(|g| !exclusions.iter().any(|x| x.eq_ignore_ascii_case(&g.group)))
        .map(|g| {
            let score = (g.dpd_ovr.unwrap_or(0.0) + g.eod_ovr.unwrap_or(0.0)) / 2.0;
            (score, g.n, g.group.as_str())
        })
        .collect();
    if ranked.len() < k {
        return Err(SweepError::InsufficientGroups {
            requested: k,
            available: ranked.len(),
        });
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(b.2)));
    Ok(ranked.into_iter().take(k).map(|r| r.2.to_string()).collect())
}
