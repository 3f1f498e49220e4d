//! The full protocol on the synthetic lab: per seed, generate a corpus, build
//! the initial model θ₀, the pooled fine-tune (FFT), an optional LoRA
//! fine-tune and one fine-tune per subgroup; then sweep merges or injections
//! of the subgroup task vectors.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    default_seeds, emit, inject_sweep, lambda_sweep, select_lambda, worst_subgroups, BaselineRow,
    Criterion, Evaluator, Format, InjectInput, MergeInput, Mode, Provenance, Split, SweepConfig,
    SweepError, SweepResult, ToyEvaluator,
};
use crate::arith::{diff, TaskVector};
use crate::ckpt::{checkpoint_id, to_bytes, write_checkpoint, Checkpoint};
use crate::fsutil::{sha256_file, sha256_hex};
use crate::lab::corpus::group_slug;
use crate::lab::model::{train_checkpoint_from, train_subgroup_from};
use crate::lab::{
    gen_corpus, train_lora, Corpus, CorpusSpec, LoraConfig, ModelShape, ToyModel, TrainConfig,
    TrainProvenance,
};
use crate::manifest::RunManifest;
use crate::metrics::{average_reports, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSettings {
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
        }
    }
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_worst_k() -> usize {
    2
}
fn default_exclusions() -> Vec<String> {
    vec!["Other".to_string()]
}
fn yes() -> bool {
    true
}

/// Configuration file of `sweep`. The corpus seed is replaced by each sweep
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub train: TrainSettings,
    /// LoRA baseline; absent means none.
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Defaults to the mode's grid.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub criterion: Criterion,
    #[serde(default)]
    pub eval_split: Split,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Number of worst subgroups injected in `inject` mode.
    #[serde(default = "default_worst_k")]
    pub worst_k: usize,
    #[serde(default = "default_exclusions")]
    pub exclusions: Vec<String>,
    #[serde(default = "yes")]
    pub save_checkpoints: bool,
}

impl PipelineConfig {
    pub fn new(corpus: CorpusSpec) -> Self {
        PipelineConfig {
            corpus,
            model: ModelShape::default(),
            train: TrainSettings::default(),
            lora: None,
            seeds: default_seeds(),
            grid: None,
            criterion: Criterion::default(),
            eval_split: Split::default(),
            threshold: DEFAULT_THRESHOLD,
            worst_k: default_worst_k(),
            exclusions: default_exclusions(),
            save_checkpoints: true,
        }
    }

    /// Seven gender subgroups with a LoRA baseline.
    pub fn gender() -> Self {
        PipelineConfig {
            lora: Some(LoraConfig::default()),
            ..Self::new(CorpusSpec::gender(0))
        }
    }

    /// Eight race subgroups with a LoRA baseline.
    pub fn race() -> Self {
        PipelineConfig {
            lora: Some(LoraConfig::default()),
            ..Self::new(CorpusSpec::race(0))
        }
    }

    pub fn sweep_config(&self, mode: Mode) -> SweepConfig {
        SweepConfig {
            grid: self.grid.clone().unwrap_or_else(|| mode.default_grid()),
            seeds: self.seeds.clone(),
            attribute: self.corpus.attribute.clone(),
            criterion: self.criterion,
            eval_split: self.eval_split,
            threshold: self.threshold,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            seed,
        }
    }

    pub fn validate(&self, mode: Mode) -> Result<(), SweepError> {
        self.sweep_config(mode).validate()?;
        self.corpus.validate()?;
        self.train_config(0).validate()?;
        if self.model.dim == 0 || self.model.hidden == 0 {
            return Err(SweepError::InvalidConfig("model dimensions must be ≥ 1".into()));
        }
        if mode == Mode::Inject && self.worst_k == 0 {
            return Err(SweepError::InvalidConfig("worst_k must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Everything trained for one seed.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub corpus: Corpus,
    pub base: Checkpoint,
    pub fft: Checkpoint,
    pub lora: Option<Checkpoint>,
    /// Subgroup task vectors `θ_g − θ₀`, in corpus group order.
    pub vectors: Vec<(String, TaskVector)>,
}

impl SeedArtifacts {
    pub fn vector(&self, group: &str) -> Option<&TaskVector> {
        self.vectors.iter().find(|v| v.0 == group).map(|v| &v.1)
    }

    fn init(&self, cfg: &PipelineConfig) -> ToyModel {
        ToyModel::init(cfg.model, self.seed)
    }

    /// Fine-tunes θ₀ on each listed subgroup and stores its task vector.
    pub fn add_subgroups(&mut self, cfg: &PipelineConfig, groups: &[String]) -> Result<(), SweepError> {
        let init = self.init(cfg);
        let tc = cfg.train_config(self.seed);
        let attr = self.corpus.attribute().to_string();
        let id = self.corpus.id();
        let trained = crate::par::map(groups, |g| {
            train_subgroup_from(&init, &self.corpus.train, &attr, g, &tc, &id)
        });
        for (g, ckpt) in groups.iter().zip(trained) {
            let tv = diff(&ckpt?, &self.base)?;
            self.vectors.push((g.clone(), tv));
        }
        Ok(())
    }

    /// Role → checkpoint id, for provenance.
    pub fn ids(&self) -> std::collections::BTreeMap<String, String> {
        let mut m = std::collections::BTreeMap::new();
        m.insert("corpus".to_string(), self.corpus.id());
        m.insert("base".to_string(), checkpoint_id(&self.base));
        m.insert("fft".to_string(), checkpoint_id(&self.fft));
        if let Some(l) = &self.lora {
            m.insert("lora".to_string(), checkpoint_id(l));
        }
        for (g, v) in &self.vectors {
            m.insert(format!("vector:{g}"), checkpoint_id(&v.to_checkpoint()));
        }
        m
    }

    /// `(relative path, checkpoint)` for every artifact worth saving.
    pub fn files(&self) -> Vec<(String, Checkpoint)> {
        let dir = format!("checkpoints/seed-{}", self.seed);
        let mut out = vec![
            (format!("{dir}/base.ckpt"), self.base.clone()),
            (format!("{dir}/fft.ckpt"), self.fft.clone()),
        ];
        if let Some(l) = &self.lora {
            out.push((format!("{dir}/lora.ckpt"), l.clone()));
        }
        for (g, v) in &self.vectors {
            out.push((format!("{dir}/vector-{}.ckpt", group_slug(g)), v.to_checkpoint()));
        }
        out
    }
}

/// Corpus, θ₀, FFT and (if configured) LoRA for one seed; no subgroup
/// vectors yet.
pub fn prepare_seed(cfg: &PipelineConfig, seed: u64) -> Result<SeedArtifacts, SweepError> {
    let corpus = gen_corpus(&cfg.corpus.with_seed(seed))?;
    let init = ToyModel::init(cfg.model, seed);
    let mut base = init.to_checkpoint();
    base.set_metadata("model", "toy-mlp");
    base.set_metadata("seed", seed.to_string());
    base.set_metadata("subset", "none");
    let tc = cfg.train_config(seed);
    let prov = TrainProvenance {
        dataset_id: corpus.id(),
        subset: "all".into(),
    };
    let fft = train_checkpoint_from(&init, &corpus.train, &tc, &prov)?;
    let lora = match cfg.lora {
        Some(l) => Some(train_lora(&corpus.train, &base, l, &tc, &prov)?.0),
        None => None,
    };
    Ok(SeedArtifacts {
        seed,
        corpus,
        base,
        fft,
        lora,
        vectors: Vec::new(),
    })
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub mode: Mode,
    pub result: SweepResult,
    pub artifacts: Vec<SeedArtifacts>,
}

fn baselines(
    arts: &[SeedArtifacts],
    evals: &[ToyEvaluator],
) -> Result<Vec<BaselineRow>, SweepError> {
    let mut jobs: Vec<(&str, usize, &Checkpoint)> = Vec::new();
    for (i, a) in arts.iter().enumerate() {
        jobs.push(("base", i, &a.base));
        jobs.push(("fft", i, &a.fft));
        if let Some(l) = &a.lora {
            jobs.push(("lora", i, l));
        }
    }
    let evaluated = crate::par::map(&jobs, |(_, i, c)| evals[*i].evaluate(c));
    jobs.iter()
        .zip(evaluated)
        .map(|((name, i, _), ev)| {
            let ev = ev?;
            Ok(BaselineRow {
                name: name.to_string(),
                seed: arts[*i].seed,
                criterion: ev.criterion,
                report: ev.report,
            })
        })
        .collect()
}

/// Runs the whole protocol in memory.
pub fn run_pipeline(cfg: &PipelineConfig, mode: Mode) -> Result<PipelineRun, SweepError> {
    cfg.validate(mode)?;
    let sc = cfg.sweep_config(mode);
    let mut arts = crate::par::map(&cfg.seeds, |&s| prepare_seed(cfg, s))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let evals: Vec<ToyEvaluator> = arts
        .iter()
        .map(|a| ToyEvaluator::new(&sc, &a.corpus.train, &a.corpus.test))
        .collect();
    let base_rows = baselines(&arts, &evals)?;

    let mut notes = Vec::new();
    let mut worst = Vec::new();
    let groups = match mode {
        Mode::Merge => arts[0].corpus.group_names(),
        Mode::Inject => {
            let fft: Vec<_> = base_rows
                .iter()
                .filter(|b| b.name == "fft")
                .map(|b| b.report.clone())
                .collect();
            let avg = average_reports(&fft).ok_or(SweepError::EmptyResult)?;
            worst = worst_subgroups(&avg, cfg.worst_k, &cfg.exclusions)?;
            notes.push(format!(
                "worst subgroups ranked on the seed-averaged FFT report ({:?} split), excluding {:?}",
                cfg.eval_split, cfg.exclusions
            ));
            worst.clone()
        }
    };
    for a in arts.iter_mut() {
        a.add_subgroups(cfg, &groups)?;
    }

    let mut result = match mode {
        Mode::Merge => {
            let vecs: Vec<Vec<TaskVector>> = arts
                .iter()
                .map(|a| a.vectors.iter().map(|v| v.1.clone()).collect())
                .collect();
            let inputs: Vec<MergeInput<'_>> = arts
                .iter()
                .zip(&vecs)
                .zip(&evals)
                .map(|((a, v), e)| MergeInput {
                    seed: a.seed,
                    base: &a.base,
                    vectors: v,
                    evaluator: e,
                })
                .collect();
            lambda_sweep(&sc, &inputs)?
        }
        Mode::Inject => {
            let mut rows = Vec::new();
            for g in &worst {
                let inputs: Vec<InjectInput<'_>> = arts
                    .iter()
                    .zip(&evals)
                    .map(|(a, e)| InjectInput {
                        seed: a.seed,
                        sft: &a.fft,
                        worst: a.vector(g).expect("trained above"),
                        evaluator: e,
                    })
                    .collect();
                rows.extend(inject_sweep(&sc, g, &inputs)?.rows);
            }
            SweepResult::from_rows(Mode::Inject, sc.clone(), rows)
        }
    };
    result.baselines = base_rows;
    result.worst_groups = worst;
    result.selections = result
        .variants()
        .iter()
        .map(|v| select_lambda(&result, Some(v)))
        .collect::<Result<_, _>>()?;
    result.provenance = Provenance {
        checkpoints: arts.iter().map(|a| (a.seed, a.ids())).collect(),
        notes,
    };
    Ok(PipelineRun {
        mode,
        result,
        artifacts: arts,
    })
}

/// Writes results, charts, (optionally) checkpoints and `manifest.json`
/// under `dir`.
pub fn write_run(
    dir: &Path,
    run: &PipelineRun,
    cfg: &PipelineConfig,
    command: &str,
    started: Instant,
) -> Result<Vec<PathBuf>, SweepError> {
    let mut written = emit(&run.result, &Format::ALL, dir)?;
    let config = serde_json::json!({ "mode": run.mode, "pipeline": cfg });
    let mut manifest = RunManifest::new(command, config);
    for a in &run.artifacts {
        for (rel, ckpt) in a.files() {
            let path = dir.join(&rel);
            if cfg.save_checkpoints {
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| SweepError::io(parent, e))?;
                }
                write_checkpoint(&ckpt, &path)?;
                written.push(path);
            }
            manifest.inputs.insert(rel, sha256_hex(&to_bytes(&ckpt)));
        }
    }
    for p in &written {
        let digest = sha256_file(p).map_err(|e| SweepError::io(p, e))?;
        let rel = p.strip_prefix(dir).unwrap_or(p).display().to_string();
        if !manifest.inputs.contains_key(&rel) {
            manifest.outputs.insert(rel, digest);
        }
    }
    manifest.duration_secs = started.elapsed().as_secs_f64();
    let path = dir.join("manifest.json");
    manifest.write(&path).map_err(|e| SweepError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        let mut spec = CorpusSpec::from_counts("g", &[("A", 50), ("B", 50), ("Other", 10)], 220, 0);
        spec.vocab_size = 60;
        let mut cfg = PipelineConfig::new(spec);
        cfg.model = ModelShape { dim: 256, hidden: 4 };
        cfg.train.epochs = 3;
        cfg.seeds = vec![13, 14];
        cfg.lora = Some(LoraConfig { rank: 2, alpha: 4.0 });
        cfg
    }

    #[test]
    fn config_parses_with_defaults() {
        let text = r#"{"corpus": {"attribute": "gender", "size": 100,
            "groups": [{"name": "A", "proportion": 0.5}, {"name": "B", "proportion": 0.5}]}}"#;
        let cfg: PipelineConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.seeds, vec![13, 14, 15]);
        assert_eq!(cfg.worst_k, 2);
        assert_eq!(cfg.sweep_config(Mode::Inject).grid.len(), 6);
        assert!(cfg.lora.is_none());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"corpus": null, "bogus": 1}"#).is_err());
    }

    #[test]
    fn merge_pipeline_small() {
        let mut cfg = small();
        cfg.grid = Some(vec![0.0, 0.5, 1.0]);
        let run = run_pipeline(&cfg, Mode::Merge).unwrap();
        let r = &run.result;
        assert_eq!(r.rows.len(), 6);
        assert_eq!(r.selections.len(), 1);
        for a in &run.artifacts {
            assert_eq!(a.vectors.len(), 3);
            let base = r.baseline("base", a.seed).unwrap();
            assert_eq!(r.row("merge", 0.0, a.seed).unwrap().report, base.report);
        }
        assert_eq!(r.baselines.len(), 6);
    }

    #[test]
    fn inject_pipeline_small() {
        let mut cfg = small();
        cfg.worst_k = 1;
        cfg.lora = None;
        let run = run_pipeline(&cfg, Mode::Inject).unwrap();
        let r = &run.result;
        assert_eq!(r.worst_groups.len(), 1);
        assert_ne!(r.worst_groups[0], "Other");
        assert_eq!(r.rows.len(), 6 * 2);
        for a in &run.artifacts {
            let fft = r.baseline("fft", a.seed).unwrap();
            assert_eq!(r.row(&r.worst_groups[0], 0.0, a.seed).unwrap().report, fft.report);
        }
    }
}
