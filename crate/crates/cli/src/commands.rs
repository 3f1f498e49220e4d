use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use tvfair::arith::{self, Alignment, TaskVector, WeightedVector};
use tvfair::ckpt::{read_checkpoint, write_checkpoint, Checkpoint};
use tvfair::fsutil::{sha256_file, write_atomic};
use tvfair::lab::corpus::{read_corpus, read_spec, subset};
use tvfair::lab::model::train_checkpoint_from;
use tvfair::lab::{
    gen_corpus, train_lora, write_corpus, LoraConfig, ModelShape, ToyModel, TrainConfig,
    TrainProvenance,
};
use tvfair::manifest::RunManifest;
use tvfair::metrics::{evaluate, read_predictions, report_to_csv, write_predictions, GroupReport};
use tvfair::sweep::{run_pipeline, write_run, Mode, PipelineConfig};

use crate::error::CliError;
use crate::{
    ApplyArgs, DiffArgs, EvalArgs, GenDataArgs, InjectArgs, MergeArgs, ModeArg, PredictArgs,
    ReportFormat, SplitArg, SweepArgs, TrainToyArgs,
};

/// Collects input digests while a command runs and writes the manifest last.
struct Run {
    started: Instant,
    manifest: RunManifest,
}

impl Run {
    fn new<A: Serialize>(command: &str, args: &A) -> Self {
        let config = serde_json::to_value(args).expect("flags serialize");
        Run {
            started: Instant::now(),
            manifest: RunManifest::new(command, config),
        }
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = sha256_file(path).map_err(|e| CliError::io(path, e))?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = sha256_file(path).map_err(|e| CliError::io(path, e))?;
        self.manifest.outputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    fn finish(mut self, manifest_path: &Path) -> Result<(), CliError> {
        self.manifest.duration_secs = self.started.elapsed().as_secs_f64();
        self.manifest
            .write(manifest_path)
            .map_err(|e| CliError::io(manifest_path, e))
    }
}

/// `<out>.manifest.json`
fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn read(run: &mut Run, path: &Path) -> Result<Checkpoint, CliError> {
    let ckpt = read_checkpoint(path)?;
    run.input(path)?;
    Ok(ckpt)
}

fn read_vector(run: &mut Run, path: &Path) -> Result<TaskVector, CliError> {
    Ok(TaskVector::from_checkpoint(&read(run, path)?)?)
}

fn write_ckpt(run: &mut Run, ckpt: &Checkpoint, out: &Path) -> Result<(), CliError> {
    write_checkpoint(ckpt, out)?;
    run.output(out)
}

fn check_lambda(lambda: f64) -> Result<(), CliError> {
    if lambda.is_finite() {
        Ok(())
    } else {
        Err(CliError::usage("E_COEFFICIENT", format!("λ = {lambda} is not finite")))
    }
}

fn alignment(intersect: bool) -> Alignment {
    if intersect {
        Alignment::Intersect
    } else {
        Alignment::Strict
    }
}

fn note_skipped(skipped: &[String]) {
    if !skipped.is_empty() {
        eprintln!("note: skipped tensors not present on both sides: {}", skipped.join(", "));
    }
}

pub fn diff(a: DiffArgs) -> Result<(), CliError> {
    let mut run = Run::new("diff", &a);
    let task = read(&mut run, &a.task)?;
    let base = read(&mut run, &a.base)?;
    let (tv, skipped) = arith::diff_with(&task, &base, alignment(a.intersect))?;
    note_skipped(&skipped);
    write_ckpt(&mut run, &tv.to_checkpoint(), &a.out)?;
    run.finish(&manifest_path(&a.out))
}

pub fn apply(a: ApplyArgs) -> Result<(), CliError> {
    check_lambda(a.lambda)?;
    let mut run = Run::new("apply", &a);
    let base = read(&mut run, &a.base)?;
    let tv = read_vector(&mut run, &a.vector)?;
    let out = arith::apply(&base, &arith::scale(&tv, a.lambda)?)?;
    write_ckpt(&mut run, &out, &a.out)?;
    run.finish(&manifest_path(&a.out))
}

pub fn merge(a: MergeArgs) -> Result<(), CliError> {
    let mut run = Run::new("merge", &a);
    let base = read(&mut run, &a.base)?;
    let mut parts = Vec::with_capacity(a.vectors.len());
    for v in &a.vectors {
        parts.push(WeightedVector::new(read_vector(&mut run, &v.path)?, v.lambda));
    }
    let (out, skipped) = arith::merge_with(&base, &parts, alignment(a.intersect))?;
    note_skipped(&skipped);
    write_ckpt(&mut run, &out, &a.out)?;
    run.finish(&manifest_path(&a.out))
}

pub fn inject(a: InjectArgs) -> Result<(), CliError> {
    check_lambda(a.lambda)?;
    let mut run = Run::new("inject", &a);
    let sft = read(&mut run, &a.sft)?;
    let tv = read_vector(&mut run, &a.worst)?;
    let out = arith::inject(&sft, &tv, a.lambda)?;
    write_ckpt(&mut run, &out, &a.out)?;
    run.finish(&manifest_path(&a.out))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn report_text(r: &GroupReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "attribute: {}  threshold: {}  n: {}", r.attribute, r.threshold, r.overall.n);
    let _ = writeln!(s, "group\tn\taccuracy\tselection_rate\ttpr\tfpr\tdpd\teod");
    for g in &r.groups {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            g.group,
            g.n,
            g.accuracy,
            g.selection_rate,
            opt(g.tpr),
            opt(g.fpr),
            opt(g.dpd_ovr),
            opt(g.eod_ovr)
        );
    }
    let o = &r.overall;
    let _ = writeln!(s, "DPD: {}", opt(o.overall_dpd));
    let _ = writeln!(s, "EOD: {}", opt(o.overall_eod));
    let _ = writeln!(s, "TPR gap: {}", opt(o.overall_tpr_gap));
    let _ = writeln!(s, "FPR gap: {}", opt(o.overall_fpr_gap));
    let _ = writeln!(s, "macro accuracy: {}", o.macro_accuracy);
    let _ = writeln!(s, "micro accuracy: {}", o.micro_accuracy);
    let _ = writeln!(s, "accuracy parity gap: {}", opt(o.accuracy_parity_gap));
    for u in &r.undefined_rates {
        let _ = writeln!(s, "note: {:?} undefined for {} ({:?} side)", u.rate, u.group, u.side);
    }
    for n in &r.notes {
        let _ = writeln!(s, "note: {n}");
    }
    s
}

fn report_json(r: &GroupReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    if !(a.threshold.is_finite() && (0.0..=1.0).contains(&a.threshold)) {
        return Err(CliError::usage(
            "E_THRESHOLD",
            format!("threshold {} outside [0, 1]", a.threshold),
        ));
    }
    let mut run = Run::new("eval", &a);
    let records = read_predictions(&a.preds)?;
    run.input(&a.preds)?;
    let report = evaluate(&records, &a.attribute, a.threshold)?;
    let text = match a.format {
        ReportFormat::Text => report_text(&report),
        ReportFormat::Json => report_json(&report),
        ReportFormat::Csv => report_to_csv(&report),
    };
    let mut first = None;
    for (path, body) in [(&a.json, report_json(&report)), (&a.csv, report_to_csv(&report))] {
        if let Some(p) = path {
            write_atomic(p, body.as_bytes()).map_err(|e| CliError::io(p, e))?;
            run.output(p)?;
            first.get_or_insert(p.clone());
        }
    }
    print!("{text}");
    match first {
        Some(p) => run.finish(&manifest_path(&p)),
        None => Ok(()),
    }
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut run = Run::new("gen-data", &a);
    let mut spec = read_spec(&a.spec)?;
    run.input(&a.spec)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let corpus = gen_corpus(&spec)?;
    write_corpus(&corpus, &a.out)?;
    for f in ["spec.json", "train.jsonl", "test.jsonl"] {
        run.output(&a.out.join(f))?;
    }
    run.finish(&a.out.join("manifest.json"))
}

pub fn train_toy(a: TrainToyArgs) -> Result<(), CliError> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    cfg.validate()?;
    let lora = LoraConfig {
        rank: a.rank,
        alpha: a.alpha,
    };
    if a.lora && (a.rank == 0 || !(a.alpha.is_finite() && a.alpha > 0.0)) {
        return Err(CliError::usage("E_INVALID_HYPER", "LoRA needs rank ≥ 1 and alpha > 0"));
    }
    let mut run = Run::new("train-toy", &a);
    let corpus = read_corpus(&a.data)?;
    for f in ["spec.json", "train.jsonl", "test.jsonl"] {
        run.input(&a.data.join(f))?;
    }
    let init = match &a.base {
        Some(p) => ToyModel::from_checkpoint(&read(&mut run, p)?)?,
        None => ToyModel::init(
            ModelShape {
                dim: a.dim,
                hidden: a.hidden,
            },
            a.seed,
        ),
    };
    let examples = match &a.group {
        Some(g) => {
            let s = subset(&corpus.train, corpus.attribute(), g);
            if s.is_empty() {
                return Err(CliError::runtime(
                    "E_EMPTY_GROUP",
                    format!("subgroup `{g}` has no training examples"),
                ));
            }
            s
        }
        None => corpus.train.clone(),
    };
    let prov = TrainProvenance {
        dataset_id: corpus.id(),
        subset: a.group.clone().unwrap_or_else(|| "all".into()),
    };
    let ckpt = if a.lora {
        let (ckpt, adapter) = train_lora(&examples, &init.to_checkpoint(), lora, &cfg, &prov)?;
        if let Some(p) = &a.adapter_out {
            write_ckpt(&mut run, &adapter.to_checkpoint(), p)?;
        }
        ckpt
    } else {
        train_checkpoint_from(&init, &examples, &cfg, &prov)?
    };
    if let Some(w) = ckpt.metadata().get("warning") {
        eprintln!("warning: {w} in the training subset");
    }
    write_ckpt(&mut run, &ckpt, &a.out)?;
    run.finish(&manifest_path(&a.out))
}

pub fn predict(a: PredictArgs) -> Result<(), CliError> {
    let mut run = Run::new("predict", &a);
    let ckpt = read(&mut run, &a.ckpt)?;
    let corpus = read_corpus(&a.data)?;
    let split = match a.split {
        SplitArg::Train => "train.jsonl",
        SplitArg::Test => "test.jsonl",
    };
    run.input(&a.data.join(split))?;
    let examples = match a.split {
        SplitArg::Train => &corpus.train,
        SplitArg::Test => &corpus.test,
    };
    let preds = tvfair::lab::predict(&ckpt, examples)?;
    write_predictions(&preds, &a.out)?;
    run.output(&a.out)?;
    run.finish(&manifest_path(&a.out))
}

fn load_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let parsed = if is_toml {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::usage("E_CONFIG", format!("{}: {e}", path.display())))
}

pub fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mode = match a.mode {
        ModeArg::Merge => Mode::Merge,
        ModeArg::Inject => Mode::Inject,
    };
    let cfg = load_config(&a.config)?;
    cfg.validate(mode)?;
    let run = run_pipeline(&cfg, mode)?;
    write_run(&a.out, &run, &cfg, &format!("sweep --mode {}", mode.as_str()), started)?;
    for s in &run.result.selections {
        println!("{}: λ* = {} (mean criterion {})", s.variant, s.lambda, s.mean_criterion);
    }
    Ok(())
}
