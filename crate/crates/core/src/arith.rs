//! Task-vector algebra over checkpoints.
//!
//! All arithmetic is carried out in f32. Half-precision inputs are widened on
//! entry and every produced checkpoint is F32 unless the caller narrows it
//! with [`cast_checkpoint`].

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ckpt::{Checkpoint, CkptError, Dtype, Tensor};
use crate::par;

pub const ROLE_KEY: &str = "role";
pub const ROLE_TASK_VECTOR: &str = "task_vector";
pub const BASE_ID_KEY: &str = "base_id";
pub const TASK_ID_KEY: &str = "task_id";
/// Metadata key that accumulates the edit history of a checkpoint.
pub const EDITS_KEY: &str = "edits";

#[derive(Debug, Error)]
pub enum ArithError {
    #[error("tensor name sets differ: only in {left_label}: {left_only:?}; only in {right_label}: {right_only:?}")]
    NameSetMismatch {
        left_label: &'static str,
        right_label: &'static str,
        left_only: Vec<String>,
        right_only: Vec<String>,
    },
    #[error("shape mismatch for tensor `{name}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("coefficient {0} is not finite")]
    NonFiniteCoefficient(f64),
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("checkpoint is not a task vector (role = {0:?})")]
    NotATaskVector(Option<String>),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

/// How binary operations treat operands whose tensor-name sets differ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Alignment {
    /// Any difference is a [`ArithError::NameSetMismatch`].
    #[default]
    Strict,
    /// Operate on the common names; the others are reported as skipped.
    Intersect,
}

/// An f32 tensor held unpacked for arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Delta {
    fn from_tensor(t: &Tensor) -> Self {
        Delta {
            shape: t.shape().to_vec(),
            values: t.to_f32_vec(),
        }
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(self.shape.clone(), &self.values).expect("delta shape matches values")
    }

    fn map(&self, f: impl Fn(f32) -> f32 + Sync + Send) -> Delta {
        let mut values = vec![0.0f32; self.values.len()];
        par::fill_indexed(&mut values, |i| f(self.values[i]));
        Delta {
            shape: self.shape.clone(),
            values,
        }
    }

    fn zip(&self, other: &Delta, f: impl Fn(f32, f32) -> f32 + Sync + Send) -> Delta {
        let mut values = vec![0.0f32; self.values.len()];
        par::fill_indexed(&mut values, |i| f(self.values[i], other.values[i]));
        Delta {
            shape: self.shape.clone(),
            values,
        }
    }
}

/// Identifies where a task vector came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Source {
    pub base_id: String,
    pub task_id: String,
}

/// A weight-space displacement: per-tensor F32 deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    deltas: BTreeMap<String, Delta>,
    pub source: Source,
}

/// A task vector with its merge coefficient.
#[derive(Debug, Clone)]
pub struct WeightedVector {
    pub vector: TaskVector,
    pub coefficient: f64,
}

impl WeightedVector {
    pub fn new(vector: TaskVector, coefficient: f64) -> Self {
        Self {
            vector,
            coefficient,
        }
    }
}

impl TaskVector {
    pub fn deltas(&self) -> impl Iterator<Item = (&str, &Delta)> {
        self.deltas.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Delta> {
        self.deltas.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.deltas.keys().cloned().collect()
    }

    pub fn numel(&self) -> usize {
        self.deltas.values().map(|d| d.values.len()).sum()
    }

    /// Same layout and identical element bits; ignores provenance.
    pub fn bitwise_eq(&self, other: &TaskVector) -> bool {
        self.deltas.len() == other.deltas.len()
            && self.deltas.iter().zip(&other.deltas).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape == b.shape
                    && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// A zero displacement with the same tensor layout as `like`.
    pub fn zeros_like(like: &Checkpoint) -> TaskVector {
        let deltas = like
            .tensors()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    Delta {
                        shape: t.shape().to_vec(),
                        values: vec![0.0; t.numel()],
                    },
                )
            })
            .collect();
        TaskVector {
            deltas,
            source: Source::default(),
        }
    }

    /// Serializable form, tagged with `role=task_vector` and its source ids.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_tensors(
            self.deltas.iter().map(|(n, d)| (n.clone(), d.to_tensor())),
        )
        .expect("task vector names are valid checkpoint names");
        ckpt.set_metadata(ROLE_KEY, ROLE_TASK_VECTOR);
        ckpt.set_metadata(BASE_ID_KEY, self.source.base_id.clone());
        ckpt.set_metadata(TASK_ID_KEY, self.source.task_id.clone());
        ckpt
    }

    /// Reads back a checkpoint written by [`TaskVector::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<TaskVector, ArithError> {
        let role = ckpt.metadata().get(ROLE_KEY);
        if role.map(String::as_str) != Some(ROLE_TASK_VECTOR) {
            return Err(ArithError::NotATaskVector(role.cloned()));
        }
        let meta = |k: &str| ckpt.metadata().get(k).cloned().unwrap_or_default();
        Ok(TaskVector {
            deltas: ckpt
                .tensors()
                .map(|(n, t)| (n.to_string(), Delta::from_tensor(t)))
                .collect(),
            source: Source {
                base_id: meta(BASE_ID_KEY),
                task_id: meta(TASK_ID_KEY),
            },
        })
    }
}

/// Pairs up names present in both maps, enforcing `alignment` and equal
/// shapes. Returns the common names and the skipped ones.
fn align<'a, A, B>(
    left: &'a BTreeMap<String, A>,
    right: &'a BTreeMap<String, B>,
    labels: (&'static str, &'static str),
    alignment: Alignment,
    shape_a: impl Fn(&A) -> &[usize],
    shape_b: impl Fn(&B) -> &[usize],
) -> Result<(Vec<&'a str>, Vec<String>), ArithError> {
    let left_only: Vec<String> = left
        .keys()
        .filter(|k| !right.contains_key(*k))
        .cloned()
        .collect();
    let right_only: Vec<String> = right
        .keys()
        .filter(|k| !left.contains_key(*k))
        .cloned()
        .collect();
    if alignment == Alignment::Strict && !(left_only.is_empty() && right_only.is_empty()) {
        return Err(ArithError::NameSetMismatch {
            left_label: labels.0,
            right_label: labels.1,
            left_only,
            right_only,
        });
    }
    let mut common = Vec::new();
    for (name, a) in left {
        if let Some(b) = right.get(name) {
            if shape_a(a) != shape_b(b) {
                return Err(ArithError::ShapeMismatch {
                    name: name.clone(),
                    left: shape_a(a).to_vec(),
                    right: shape_b(b).to_vec(),
                });
            }
            common.push(name.as_str());
        }
    }
    let mut skipped = left_only;
    skipped.extend(right_only);
    skipped.sort();
    Ok((common, skipped))
}

fn unpack(ckpt: &Checkpoint) -> BTreeMap<String, Delta> {
    ckpt.tensors()
        .map(|(n, t)| (n.to_string(), Delta::from_tensor(t)))
        .collect()
}

fn checked_coefficient(lambda: f64) -> Result<f32, ArithError> {
    let c = lambda as f32;
    if !lambda.is_finite() || !c.is_finite() {
        return Err(ArithError::NonFiniteCoefficient(lambda));
    }
    Ok(c)
}

/// `base + delta`, leaving `base` untouched when the delta is zero so a zero
/// displacement preserves every bit (including the sign of zero).
#[inline]
fn displace(base: f32, delta: f32) -> f32 {
    if delta == 0.0 {
        base
    } else {
        base + delta
    }
}

/// Task vector `task − base`.
pub fn diff(task: &Checkpoint, base: &Checkpoint) -> Result<TaskVector, ArithError> {
    diff_with(task, base, Alignment::Strict).map(|(tv, _)| tv)
}

/// [`diff`] with an explicit alignment mode; also returns skipped names.
pub fn diff_with(
    task: &Checkpoint,
    base: &Checkpoint,
    alignment: Alignment,
) -> Result<(TaskVector, Vec<String>), ArithError> {
    let t = unpack(task);
    let b = unpack(base);
    let (common, skipped) = align(&t, &b, ("task", "base"), alignment, |d| &d.shape, |d| &d.shape)?;
    let deltas = common
        .into_iter()
        .map(|name| (name.to_string(), t[name].zip(&b[name], |x, y| x - y)))
        .collect();
    let id = crate::ckpt::checkpoint_id;
    Ok((
        TaskVector {
            deltas,
            source: Source {
                base_id: id(base),
                task_id: id(task),
            },
        },
        skipped,
    ))
}

pub fn add(a: &TaskVector, b: &TaskVector) -> Result<TaskVector, ArithError> {
    let (common, _) = align(&a.deltas, &b.deltas, ("left", "right"), Alignment::Strict, |d| &d.shape, |d| &d.shape)?;
    let deltas = common
        .into_iter()
        .map(|name| (name.to_string(), a.deltas[name].zip(&b.deltas[name], |x, y| x + y)))
        .collect();
    Ok(TaskVector {
        deltas,
        source: Source {
            base_id: a.source.base_id.clone(),
            task_id: format!("({})+({})", a.source.task_id, b.source.task_id),
        },
    })
}

pub fn negate(tv: &TaskVector) -> TaskVector {
    TaskVector {
        deltas: tv
            .deltas
            .iter()
            .map(|(n, d)| (n.clone(), d.map(|x| -x)))
            .collect(),
        source: Source {
            base_id: tv.source.base_id.clone(),
            task_id: format!("-({})", tv.source.task_id),
        },
    }
}

pub fn scale(tv: &TaskVector, lambda: f64) -> Result<TaskVector, ArithError> {
    let c = checked_coefficient(lambda)?;
    Ok(TaskVector {
        deltas: tv
            .deltas
            .iter()
            .map(|(n, d)| (n.clone(), d.map(|x| c * x)))
            .collect(),
        source: Source {
            base_id: tv.source.base_id.clone(),
            task_id: format!("{lambda}*({})", tv.source.task_id),
        },
    })
}

fn append_edit(meta: &mut BTreeMap<String, String>, edit: String) {
    meta.entry(EDITS_KEY.to_string())
        .and_modify(|e| {
            e.push(';');
            e.push_str(&edit);
        })
        .or_insert(edit);
}

/// `base + tv`, as an F32 checkpoint carrying base's metadata plus an edit
/// record.
pub fn apply(base: &Checkpoint, tv: &TaskVector) -> Result<Checkpoint, ArithError> {
    merge_impl(base, &[(tv, 1.0f32)], Alignment::Strict, format!("apply:{}", tv.source.task_id))
        .map(|(c, _)| c)
}

/// `base + Σ λ_i · Δ_i`.
///
/// Each element is accumulated as a left fold starting from the base value,
/// adding `λ_i · Δ_i` in the order given. Terms that evaluate to zero are
/// skipped, so an empty list or all-zero coefficients reproduce `base`
/// bit for bit.
pub fn merge(base: &Checkpoint, parts: &[WeightedVector]) -> Result<Checkpoint, ArithError> {
    merge_with(base, parts, Alignment::Strict).map(|(c, _)| c)
}

/// [`merge`] with an explicit alignment mode; also returns skipped names.
/// In intersect mode, base tensors absent from a vector are carried over.
pub fn merge_with(
    base: &Checkpoint,
    parts: &[WeightedVector],
    alignment: Alignment,
) -> Result<(Checkpoint, Vec<String>), ArithError> {
    let mut weighted = Vec::with_capacity(parts.len());
    for p in parts {
        weighted.push((&p.vector, checked_coefficient(p.coefficient)?));
    }
    let edit = parts
        .iter()
        .map(|p| format!("{}*{}", p.coefficient, p.vector.source.task_id))
        .collect::<Vec<_>>()
        .join("+");
    merge_impl(base, &weighted, alignment, format!("merge:{edit}"))
}

fn merge_impl(
    base: &Checkpoint,
    parts: &[(&TaskVector, f32)],
    alignment: Alignment,
    edit: String,
) -> Result<(Checkpoint, Vec<String>), ArithError> {
    let base_tensors: BTreeMap<String, &Tensor> =
        base.tensors().map(|(n, t)| (n.to_string(), t)).collect();
    let mut skipped = Vec::new();
    // Validate everything before computing anything: no partial outputs.
    for (tv, _) in parts {
        let (_, s) = align(&base_tensors, &tv.deltas, ("base", "vector"), alignment, |t| t.shape(), |d| &d.shape)?;
        skipped.extend(s);
    }
    skipped.sort();
    skipped.dedup();

    let mut out = Checkpoint::new();
    for (name, tensor) in base.tensors() {
        let base_vals = tensor.to_f32_vec();
        let terms: Vec<(&[f32], f32)> = parts
            .iter()
            .filter(|(_, c)| *c != 0.0)
            .filter_map(|(tv, c)| tv.deltas.get(name).map(|d| (d.values.as_slice(), *c)))
            .collect();
        let mut values = vec![0.0f32; base_vals.len()];
        par::fill_indexed(&mut values, |i| {
            terms
                .iter()
                .fold(base_vals[i], |acc, (d, c)| displace(acc, c * d[i]))
        });
        out.insert(name, Tensor::from_f32(tensor.shape().to_vec(), &values)?)?;
    }
    let mut meta = base.metadata().clone();
    append_edit(&mut meta, edit);
    Ok((out.with_metadata(meta), skipped))
}

/// `θ_sft + λ · Δ_worst`; identical to a single-term [`merge`].
pub fn inject(sft: &Checkpoint, worst: &TaskVector, lambda: f64) -> Result<Checkpoint, ArithError> {
    merge(sft, &[WeightedVector::new(worst.clone(), lambda)])
}

/// Global L2 norm over every element, accumulated in f64.
pub fn vector_norm(tv: &TaskVector) -> f64 {
    dot(tv, tv).sqrt()
}

fn dot(a: &TaskVector, b: &TaskVector) -> f64 {
    a.deltas
        .iter()
        .filter_map(|(n, da)| b.deltas.get(n).map(|db| (da, db)))
        .map(|(da, db)| {
            da.values
                .iter()
                .zip(&db.values)
                .map(|(x, y)| *x as f64 * *y as f64)
                .sum::<f64>()
        })
        .sum()
}

/// Cosine similarity of two vectors with identical layouts, clamped to [-1, 1].
pub fn vector_cosine(a: &TaskVector, b: &TaskVector) -> Result<f64, ArithError> {
    align(&a.deltas, &b.deltas, ("left", "right"), Alignment::Strict, |d| &d.shape, |d| &d.shape)?;
    let na = vector_norm(a);
    let nb = vector_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(ArithError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Narrows (or widens) every tensor to `dtype`.
pub fn cast_checkpoint(ckpt: &Checkpoint, dtype: Dtype) -> Checkpoint {
    Checkpoint::from_tensors(ckpt.tensors().map(|(n, t)| (n.to_string(), t.cast(dtype))))
        .expect("names already valid")
        .with_metadata(ckpt.metadata().clone())
}

/// Widens every tensor to F32.
pub fn upcast(ckpt: &Checkpoint) -> Checkpoint {
    cast_checkpoint(ckpt, Dtype::F32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use half::f16;

    fn ck(pairs: &[(&str, &[f32])]) -> Checkpoint {
        Checkpoint::from_tensors(
            pairs
                .iter()
                .map(|(n, v)| (n.to_string(), Tensor::from_f32(vec![v.len()], v).unwrap())),
        )
        .unwrap()
    }

    fn vals(c: &Checkpoint, n: &str) -> Vec<f32> {
        c.get(n).unwrap().to_f32_vec()
    }

    #[test]
    fn diff_is_elementwise() {
        let tv = diff(&ck(&[("w", &[3.0, 3.0])]), &ck(&[("w", &[1.0, 2.0])])).unwrap();
        assert_eq!(tv.get("w").unwrap().values, vec![2.0, 1.0]);
        let same = ck(&[("w", &[5.0, -1.0])]);
        assert!(diff(&same, &same).unwrap().get("w").unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn diff_reports_extra_base_tensor() {
        let err = diff(&ck(&[("w", &[1.0])]), &ck(&[("w", &[1.0]), ("v", &[0.0])])).unwrap_err();
        match err {
            ArithError::NameSetMismatch { right_only, left_only, .. } => {
                assert_eq!(right_only, vec!["v"]);
                assert!(left_only.is_empty());
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn intersect_mode_skips_and_reports() {
        let (tv, skipped) = diff_with(
            &ck(&[("w", &[2.0]), ("u", &[1.0])]),
            &ck(&[("w", &[1.0]), ("v", &[0.0])]),
            Alignment::Intersect,
        )
        .unwrap();
        assert_eq!(tv.names(), vec!["w"]);
        assert_eq!(skipped, vec!["u", "v"]);
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let base = ck(&[("w", &[1.0, 2.0])]);
        let err = diff(&ck(&[("w", &[1.0, 2.0, 3.0])]), &base).unwrap_err();
        assert!(matches!(err, ArithError::ShapeMismatch { name, .. } if name == "w"));
        let tv = diff(&ck(&[("w", &[1.0])]), &ck(&[("w", &[0.0])])).unwrap();
        assert!(matches!(apply(&base, &tv), Err(ArithError::ShapeMismatch { .. })));
    }

    #[test]
    fn add_negate_scale() {
        let zero = ck(&[("w", &[0.0, 0.0])]);
        let a = diff(&ck(&[("w", &[1.0, 2.0])]), &zero).unwrap();
        let b = diff(&ck(&[("w", &[3.0, -2.0])]), &zero).unwrap();
        assert_eq!(add(&a, &b).unwrap().get("w").unwrap().values, vec![4.0, 0.0]);
        assert!(add(&a, &negate(&a)).unwrap().get("w").unwrap().values.iter().all(|v| *v == 0.0));
        let n = diff(&ck(&[("w", &[1.0, -2.0, 0.0])]), &ck(&[("w", &[0.0, 0.0, 0.0])])).unwrap();
        assert_eq!(negate(&n).get("w").unwrap().values, vec![-1.0, 2.0, 0.0]);
        assert!(negate(&negate(&n)).bitwise_eq(&n));
        assert!(scale(&a, 0.0).unwrap().get("w").unwrap().values.iter().all(|v| *v == 0.0));
        assert_eq!(scale(&a, 1.0).unwrap().get("w").unwrap().values, a.get("w").unwrap().values);
        assert!(matches!(scale(&a, f64::NAN), Err(ArithError::NonFiniteCoefficient(_))));
        assert!(matches!(scale(&a, 1e300), Err(ArithError::NonFiniteCoefficient(_))));
    }

    #[test]
    fn merge_zero_coefficients_is_identity() {
        let base = ck(&[("w", &[1.5, -0.0, 3.25])]);
        let tv = diff(&ck(&[("w", &[2.0, 1.0, -1.0])]), &base).unwrap();
        let merged = merge(&base, &[WeightedVector::new(tv.clone(), 0.0)]).unwrap();
        assert_eq!(merged.get("w"), base.get("w"));
        assert_eq!(merge(&base, &[]).unwrap().get("w"), base.get("w"));
        let applied = apply(&base, &TaskVector::zeros_like(&base)).unwrap();
        assert_eq!(applied.get("w"), base.get("w"));
    }

    #[test]
    fn merge_single_unit_matches_apply_and_inject() {
        let base = ck(&[("w", &[1.0, 2.0])]);
        let tv = diff(&ck(&[("w", &[0.3, 7.0])]), &base).unwrap();
        let m = merge(&base, &[WeightedVector::new(tv.clone(), 1.0)]).unwrap();
        assert_eq!(m.get("w"), apply(&base, &tv).unwrap().get("w"));
        let i = inject(&base, &tv, 0.4).unwrap();
        let m4 = merge(&base, &[WeightedVector::new(tv, 0.4)]).unwrap();
        assert_eq!(i, m4);
    }

    #[test]
    fn merge_records_edit_and_keeps_metadata() {
        let mut base = ck(&[("w", &[1.0])]);
        base.set_metadata("seed", "13");
        let tv = TaskVector::zeros_like(&base);
        let m = merge(&base, &[WeightedVector::new(tv, 0.5)]).unwrap();
        assert_eq!(m.metadata()["seed"], "13");
        assert!(m.metadata()[EDITS_KEY].starts_with("merge:0.5*"));
    }

    #[test]
    fn half_inputs_are_upcast() {
        let base = Checkpoint::from_tensors([(
            "w",
            Tensor::from_f16(vec![2], &[f16::from_f32(1.0), f16::from_f32(0.5)]).unwrap(),
        )])
        .unwrap();
        let task = ck(&[("w", &[2.0, 0.5])]);
        let tv = diff(&task, &base).unwrap();
        assert_eq!(tv.get("w").unwrap().values, vec![1.0, 0.0]);
        let out = apply(&base, &tv).unwrap();
        assert_eq!(out.get("w").unwrap().dtype(), Dtype::F32);
        assert_eq!(vals(&out, "w"), vec![2.0, 0.5]);
    }

    #[test]
    fn norm_and_cosine() {
        let base = ck(&[("w", &[0.0, 0.0])]);
        let tv = diff(&ck(&[("w", &[3.0, 4.0])]), &base).unwrap();
        assert_eq!(vector_norm(&TaskVector::zeros_like(&base)), 0.0);
        assert_eq!(vector_norm(&tv), 5.0);
        assert!((vector_cosine(&tv, &tv).unwrap() - 1.0).abs() < 1e-6);
        assert!((vector_cosine(&tv, &negate(&tv)).unwrap() + 1.0).abs() < 1e-6);
        assert!(matches!(
            vector_cosine(&tv, &TaskVector::zeros_like(&base)),
            Err(ArithError::ZeroVector)
        ));
    }

    #[test]
    fn task_vector_checkpoint_roundtrip() {
        let tv = diff(&ck(&[("w", &[1.0])]), &ck(&[("w", &[0.5])])).unwrap();
        let c = tv.to_checkpoint();
        assert_eq!(c.metadata()[ROLE_KEY], ROLE_TASK_VECTOR);
        assert_eq!(TaskVector::from_checkpoint(&c).unwrap(), tv);
        assert!(matches!(
            TaskVector::from_checkpoint(&ck(&[("w", &[1.0])])),
            Err(ArithError::NotATaskVector(None))
        ));
    }
}
