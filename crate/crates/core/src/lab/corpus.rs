//! Synthetic subgroup-annotated corpus.
//!
//! Each example belongs to one subgroup of a single protected attribute and
//! carries a binary label drawn with the subgroup's base rate. Tokens come
//! from three pools:
//!
//! * cue tokens `h*` (hateful) and `b*` (benign): a positive example draws
//!   from `h*` with probability `cue_rate` and from `b*` with probability
//!   `cue_leak`; negatives swap the two;
//! * neutral filler tokens `w*`;
//! * group markers `@<group><k>`, emitted per position with probability
//!   `marker_rate`. A subgroup's `bias` skews its marker rate by label
//!   (`m·(1+bias)` for positives, capped at 0.5, and `m/(1+bias)` for
//!   negatives), so the marker becomes a label cue for that group only.
//!
//! With zero bias everywhere, the non-marker tokens have the same
//! label-conditional distribution in every subgroup.
//!
//! Example `i` is generated from its own ChaCha stream `(seed, i + 1)`, so
//! generation can proceed in parallel without changing the output.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabError;

/// Subgroup sizes of the gender split (Men … Other).
pub const GENDER_COUNTS: [(&str, u32); 7] = [
    ("Men", 817),
    ("Non-binary", 114),
    ("Trans men", 178),
    ("Trans unspecified", 173),
    ("Trans women", 148),
    ("Women", 2057),
    ("Other", 59),
];

/// Subgroup sizes of the race split.
pub const RACE_COUNTS: [(&str, u32); 8] = [
    ("Asian", 311),
    ("Black", 1007),
    ("Latinx", 368),
    ("Native American", 153),
    ("Middle Eastern", 493),
    ("Pacific Islander", 138),
    ("White", 580),
    ("Other", 302),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub proportion: f64,
    #[serde(default = "default_base_rate")]
    pub base_rate: f64,
    #[serde(default)]
    pub bias: f64,
}

fn default_base_rate() -> f64 {
    0.35
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub attribute: String,
    pub groups: Vec<GroupSpec>,
    pub size: usize,
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "defaults::min_tokens")]
    pub min_tokens: usize,
    #[serde(default = "defaults::max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "defaults::marker_rate")]
    pub marker_rate: f64,
    #[serde(default = "defaults::markers_per_group")]
    pub markers_per_group: usize,
    #[serde(default = "defaults::cue_rate")]
    pub cue_rate: f64,
    #[serde(default = "defaults::cue_leak")]
    pub cue_leak: f64,
    #[serde(default = "defaults::train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn vocab_size() -> usize {
        100
    }
    pub fn min_tokens() -> usize {
        8
    }
    pub fn max_tokens() -> usize {
        16
    }
    pub fn marker_rate() -> f64 {
        0.1
    }
    pub fn markers_per_group() -> usize {
        4
    }
    pub fn cue_rate() -> f64 {
        0.3
    }
    pub fn cue_leak() -> f64 {
        0.05
    }
    pub fn train_fraction() -> f64 {
        0.8
    }
}

impl CorpusSpec {
    /// Proportions taken from `counts`, uniform base rate, zero bias.
    pub fn from_counts(attribute: &str, counts: &[(&str, u32)], size: usize, seed: u64) -> Self {
        let total: u32 = counts.iter().map(|(_, c)| c).sum();
        CorpusSpec {
            attribute: attribute.to_string(),
            groups: counts
                .iter()
                .map(|(name, c)| GroupSpec {
                    name: name.to_string(),
                    proportion: *c as f64 / total as f64,
                    base_rate: default_base_rate(),
                    bias: 0.0,
                })
                .collect(),
            size,
            vocab_size: defaults::vocab_size(),
            min_tokens: defaults::min_tokens(),
            max_tokens: defaults::max_tokens(),
            marker_rate: defaults::marker_rate(),
            markers_per_group: defaults::markers_per_group(),
            cue_rate: defaults::cue_rate(),
            cue_leak: defaults::cue_leak(),
            train_fraction: defaults::train_fraction(),
            seed,
        }
    }

    /// Seven gender subgroups, 3,546 examples.
    pub fn gender(seed: u64) -> Self {
        Self::from_counts("gender", &GENDER_COUNTS, 3546, seed)
    }

    /// Eight race subgroups, 3,352 examples.
    pub fn race(seed: u64) -> Self {
        Self::from_counts("race", &RACE_COUNTS, 3352, seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        CorpusSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut GroupSpec> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::InvalidSpec(m));
        if self.attribute.is_empty() {
            return bad("attribute name is empty".into());
        }
        if self.groups.is_empty() {
            return bad("no subgroups".into());
        }
        let mut names: Vec<&str> = self.groups.iter().map(|g| g.name.as_str()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate subgroup name".into());
        }
        let sum: f64 = self.groups.iter().map(|g| g.proportion).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("proportions sum to {sum}, not 1"));
        }
        for g in &self.groups {
            if g.name.is_empty() {
                return bad("empty subgroup name".into());
            }
            if !(g.proportion.is_finite() && g.proportion >= 0.0) {
                return bad(format!("{}: invalid proportion {}", g.name, g.proportion));
            }
            if !(g.base_rate > 0.0 && g.base_rate < 1.0) {
                return bad(format!("{}: base rate {} outside (0, 1)", g.name, g.base_rate));
            }
            if !(g.bias.is_finite() && g.bias >= 0.0) {
                return bad(format!("{}: bias {} must be ≥ 0", g.name, g.bias));
            }
        }
        if self.size < 10 * self.groups.len() {
            return bad(format!(
                "size {} is below 10 × {} groups",
                self.size,
                self.groups.len()
            ));
        }
        if self.vocab_size < 20 {
            return bad("vocab_size must be at least 20".into());
        }
        if self.min_tokens > self.max_tokens {
            return bad("min_tokens > max_tokens".into());
        }
        if self.markers_per_group == 0 {
            return bad("markers_per_group must be ≥ 1".into());
        }
        let unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        if !unit(self.marker_rate) || !unit(self.cue_rate) || !unit(self.cue_leak) {
            return bad("marker_rate, cue_rate and cue_leak must lie in [0, 1]".into());
        }
        if self.cue_rate + self.cue_leak > 1.0 {
            return bad("cue_rate + cue_leak exceeds 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Stable short identifier derived from the spec contents.
    pub fn id(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        crate::fsutil::sha256_hex(&json)[..16].to_string()
    }

    fn cue_pool(&self) -> usize {
        (self.vocab_size / 10).max(1)
    }

    /// Per-position marker probability for a subgroup and label.
    pub fn marker_probability(&self, group: &GroupSpec, y: u8) -> f64 {
        let m = self.marker_rate;
        if y == 1 {
            (m * (1.0 + group.bias)).min(0.5)
        } else {
            m / (1.0 + group.bias)
        }
    }

    /// Probability that a non-marker position is a hateful cue, a benign cue,
    /// or neutral, given the label.
    pub fn content_probabilities(&self, y: u8) -> (f64, f64, f64) {
        let (h, b) = if y == 1 {
            (self.cue_rate, self.cue_leak)
        } else {
            (self.cue_leak, self.cue_rate)
        };
        (h, b, 1.0 - h - b)
    }

    pub fn hate_cue_count(&self) -> usize {
        self.cue_pool()
    }

    pub fn neutral_count(&self) -> usize {
        self.vocab_size - 2 * self.cue_pool()
    }
}

/// Lowercase alphanumeric form of a subgroup name, used in marker tokens.
pub fn group_slug(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    pub y_true: u8,
    pub groups: BTreeMap<String, String>,
}

impl Example {
    pub fn group(&self, attribute: &str) -> Option<&str> {
        self.groups.get(attribute).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpus {
    pub fn id(&self) -> String {
        self.spec.id()
    }

    pub fn attribute(&self) -> &str {
        &self.spec.attribute
    }

    /// Training examples of one subgroup.
    pub fn train_subset(&self, group: &str) -> Vec<Example> {
        subset(&self.train, &self.spec.attribute, group)
    }

    pub fn group_names(&self) -> Vec<String> {
        self.spec.groups.iter().map(|g| g.name.clone()).collect()
    }
}

pub fn subset(examples: &[Example], attribute: &str, group: &str) -> Vec<Example> {
    examples
        .iter()
        .filter(|e| e.group(attribute) == Some(group))
        .cloned()
        .collect()
}

fn example_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn generate_example(spec: &CorpusSpec, weights: &WeightedIndex<f64>, idx: usize) -> Example {
    let mut rng = example_rng(spec.seed, idx as u64 + 1);
    let group = &spec.groups[weights.sample(&mut rng)];
    let y = u8::from(rng.random::<f64>() < group.base_rate);
    let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
    let marker_p = spec.marker_probability(group, y);
    let (hate_p, benign_p, _) = spec.content_probabilities(y);
    let slug = group_slug(&group.name);
    let pool = spec.cue_pool();
    let neutral = spec.neutral_count();
    let tokens = (0..len)
        .map(|_| {
            if rng.random::<f64>() < marker_p {
                return format!("@{slug}{}", rng.random_range(0..spec.markers_per_group));
            }
            let u = rng.random::<f64>();
            if u < hate_p {
                format!("h{}", rng.random_range(0..pool))
            } else if u < hate_p + benign_p {
                format!("b{}", rng.random_range(0..pool))
            } else {
                format!("w{}", rng.random_range(0..neutral))
            }
        })
        .collect();
    Example {
        id: format!("ex{idx:06}"),
        tokens,
        y_true: y,
        groups: BTreeMap::from([(spec.attribute.clone(), group.name.clone())]),
    }
}

/// Generates the corpus and its per-subgroup stratified train/test split.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus, LabError> {
    spec.validate()?;
    let weights = WeightedIndex::new(spec.groups.iter().map(|g| g.proportion))
        .map_err(|e| LabError::InvalidSpec(e.to_string()))?;
    let examples = crate::par::map_range(spec.size, |i| generate_example(spec, &weights, i));

    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_group
            .entry(e.group(&spec.attribute).expect("generated with attribute"))
            .or_default()
            .push(i);
    }
    let mut split_rng = example_rng(spec.seed, 0);
    let mut is_train = vec![false; examples.len()];
    for indices in by_group.values_mut() {
        indices.shuffle(&mut split_rng);
        let n_train = (indices.len() as f64 * spec.train_fraction).round() as usize;
        for &i in &indices[..n_train] {
            is_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = examples
        .into_iter()
        .zip(is_train)
        .partition(|(_, t)| *t);
    Ok(Corpus {
        spec: spec.clone(),
        train: train.into_iter().map(|(e, _)| e).collect(),
        test: test.into_iter().map(|(e, _)| e).collect(),
    })
}

fn to_jsonl(examples: &[Example]) -> String {
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(e).expect("example serializes"));
        s.push('\n');
    }
    s
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> LabError + '_ {
    move |source| LabError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>, LabError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LabError::Parse {
                what: format!("{}:{}", path.display(), i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_spec(path: &Path) -> Result<CorpusSpec, LabError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let spec: CorpusSpec = serde_json::from_str(&text).map_err(|e| LabError::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Writes `spec.json`, `train.jsonl` and `test.jsonl` into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), LabError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = [
        (
            "spec.json",
            serde_json::to_string_pretty(&corpus.spec).expect("spec serializes") + "\n",
        ),
        ("train.jsonl", to_jsonl(&corpus.train)),
        ("test.jsonl", to_jsonl(&corpus.test)),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        crate::fsutil::write_atomic(&p, body.as_bytes()).map_err(io_err(&p))?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus, LabError> {
    Ok(Corpus {
        spec: read_spec(&dir.join("spec.json"))?,
        train: read_examples(&dir.join("train.jsonl"))?,
        test: read_examples(&dir.join("test.jsonl"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_groups(size: usize, seed: u64) -> CorpusSpec {
        let mut s = CorpusSpec::from_counts("g", &[("a", 1), ("b", 1)], size, seed);
        s.groups[0].bias = 0.0;
        s
    }

    #[test]
    fn gender_defaults_follow_counts() {
        let s = CorpusSpec::gender(13);
        s.validate().unwrap();
        assert_eq!(s.groups.len(), 7);
        assert!((s.groups[5].proportion - 2057.0 / 3546.0).abs() < 1e-15);
        assert_eq!(CorpusSpec::race(13).groups.len(), 8);
    }

    #[test]
    fn invalid_specs() {
        let mut s = two_groups(1000, 1);
        s.groups[0].proportion = 0.6;
        assert!(matches!(gen_corpus(&s), Err(LabError::InvalidSpec(_))));
        let mut s = two_groups(15, 1);
        assert!(gen_corpus(&s).is_err());
        s.size = 100;
        s.groups[1].base_rate = 1.0;
        assert!(gen_corpus(&s).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let c = gen_corpus(&two_groups(1000, 7)).unwrap();
        assert_eq!(c.train.len() + c.test.len(), 1000);
        for g in ["a", "b"] {
            let n_train = subset(&c.train, "g", g).len();
            let n_test = subset(&c.test, "g", g).len();
            let n = n_train + n_test;
            // 500 expected; 4 binomial standard deviations is ±64
            assert!((n as i64 - 500).abs() < 64, "group {g} has {n}");
            assert_eq!(n_train, (n as f64 * 0.8).round() as usize);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_corpus(&two_groups(300, 5)).unwrap();
        let b = gen_corpus(&two_groups(300, 5)).unwrap();
        assert_eq!(a, b);
        let c = gen_corpus(&two_groups(300, 6)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn token_lengths_and_groups() {
        let s = CorpusSpec::gender(3);
        let c = gen_corpus(&s).unwrap();
        for e in c.train.iter().chain(&c.test) {
            assert!((s.min_tokens..=s.max_tokens).contains(&e.tokens.len()));
            let g = e.group("gender").unwrap();
            assert!(s.groups.iter().any(|x| x.name == g));
            for t in &e.tokens {
                if let Some(m) = t.strip_prefix('@') {
                    assert!(m.starts_with(&group_slug(g)));
                }
            }
        }
    }

    #[test]
    fn roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_corpus(&two_groups(200, 9)).unwrap();
        write_corpus(&c, dir.path()).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), c);
    }
}
