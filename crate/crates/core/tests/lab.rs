use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvfair::lab::model::{loss_and_grad, samples, train_from, Grads};
use tvfair::lab::{
    featurize, gen_corpus, grad_check, grad_check_with, predict, train, train_lora, train_subgroup, CorpusSpec,
    Example, LoraConfig, ModelShape, Sample, ToyModel, TrainConfig, TrainProvenance,
};

fn ex(id: usize, tokens: &[&str], y: u8, g: &str) -> Example {
    Example {
        id: format!("e{id}"),
        tokens: tokens.iter().map(|s| s.to_string()).collect(),
        y_true: y,
        groups: BTreeMap::from([("g".to_string(), g.to_string())]),
    }
}

fn prov(subset: &str) -> TrainProvenance {
    TrainProvenance {
        dataset_id: "test".into(),
        subset: subset.into(),
    }
}

/// Reference FNV-1a/64 and hashed bag-of-tokens.
fn oracle_features(tokens: &[String], dim: usize) -> DVector<f64> {
    let mut v = DVector::zeros(dim);
    for t in tokens {
        let mut h: u64 = 14695981039346656037;
        for b in t.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        v[(h % dim as u64) as usize] += 1.0;
    }
    v
}

/// Dense forward pass: σ(w2 · tanh(W1ᵀx + b1) + b2).
fn oracle_score(m: &ToyModel, x: &DVector<f64>) -> f64 {
    let (d, h) = (m.shape.dim, m.shape.hidden);
    let w1 = DMatrix::from_row_slice(d, h, &m.w1);
    let pre = w1.transpose() * x + DVector::from_column_slice(&m.b1);
    let z = pre.map(f64::tanh).dot(&DVector::from_column_slice(&m.w2)) + m.b2;
    1.0 / (1.0 + (-z).exp())
}

fn w1_of(ckpt: &tvfair::ckpt::Checkpoint) -> Vec<f64> {
    ckpt.get("W1").unwrap().to_f32_vec().into_iter().map(f64::from).collect()
}

#[test]
fn featurize_matches_reference_hash() {
    let corpus = gen_corpus(&CorpusSpec::gender(13)).unwrap();
    for e in corpus.test.iter().take(200) {
        let dense = featurize(&e.tokens, 512).to_dense(512);
        assert_eq!(DVector::from_vec(dense), oracle_features(&e.tokens, 512));
    }
}

#[test]
fn predict_matches_dense_forward_pass() {
    let shape = ModelShape { dim: 256, hidden: 8 };
    let corpus = gen_corpus(&CorpusSpec::gender(14)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let ckpt = train(&corpus.train[..400], shape, &cfg, &prov("none")).unwrap();
    let model = ToyModel::from_checkpoint(&ckpt).unwrap();
    let preds = predict(&ckpt, &corpus.test).unwrap();
    for (p, e) in preds.iter().zip(&corpus.test) {
        let want = oracle_score(&model, &oracle_features(&e.tokens, shape.dim));
        assert!((p.score - want).abs() <= 1e-12, "{} vs {want}", p.score);
        assert_eq!(p.y_pred, Some(u8::from(want >= 0.5)));
        assert_eq!(p.id, e.id);
        assert_eq!(p.groups, e.groups);
    }
}

#[test]
fn separable_data_is_learned() {
    let data: Vec<Example> = (0..50)
        .map(|i| {
            if i % 2 == 0 {
                ex(i, &["good", "fine"], 0, "a")
            } else {
                ex(i, &["awful", "vile"], 1, "b")
            }
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let ckpt = train(&data, ModelShape { dim: 64, hidden: 4 }, &cfg, &prov("none")).unwrap();
    let preds = predict(&ckpt, &data).unwrap();
    assert!(preds.iter().all(|p| p.y_pred == Some(p.y_true)));
}

#[test]
fn training_is_deterministic() {
    let corpus = gen_corpus(&CorpusSpec::race(13)).unwrap();
    let shape = ModelShape { dim: 256, hidden: 8 };
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let a = train(&corpus.train, shape, &cfg, &prov("none")).unwrap();
    let b = train(&corpus.train, shape, &cfg, &prov("none")).unwrap();
    assert_eq!(tvfair::ckpt::to_bytes(&a), tvfair::ckpt::to_bytes(&b));
}

#[test]
fn unbiased_corpus_statistics() {
    let spec = CorpusSpec::gender(15);
    let corpus = gen_corpus(&spec).unwrap();
    let all: Vec<&Example> = corpus.train.iter().chain(&corpus.test).collect();
    let n = all.len() as f64;
    assert_eq!(all.len(), spec.size);
    for g in &spec.groups {
        let members: Vec<_> = all.iter().filter(|e| e.group("gender") == Some(&g.name)).collect();
        let k = members.len() as f64;
        // 4.5 binomial standard deviations
        let sd = (g.proportion * (1.0 - g.proportion) / n).sqrt();
        assert!((k / n - g.proportion).abs() <= 4.5 * sd + 1e-12, "{} share {}", g.name, k / n);
        if members.len() < 30 {
            continue;
        }
        let pos = members.iter().filter(|e| e.y_true == 1).count() as f64;
        let sd = (g.base_rate * (1.0 - g.base_rate) / k).sqrt();
        assert!((pos / k - g.base_rate).abs() <= 4.5 * sd, "{} base rate {}", g.name, pos / k);
    }
    // with zero bias, marker frequency does not depend on the label
    let marker_share = |y: u8| {
        let (mut m, mut t) = (0usize, 0usize);
        for e in all.iter().filter(|e| e.y_true == y) {
            t += e.tokens.len();
            m += e.tokens.iter().filter(|s| s.starts_with('@')).count();
        }
        m as f64 / t as f64
    };
    let (p0, p1) = (marker_share(0), marker_share(1));
    assert!((p0 - spec.marker_rate).abs() < 0.01 && (p1 - spec.marker_rate).abs() < 0.01, "{p0} {p1}");
}

#[test]
fn bias_ties_markers_to_the_hateful_label() {
    let mut spec = CorpusSpec::gender(13);
    spec.group_mut("Men").unwrap().bias = 3.0;
    let corpus = gen_corpus(&spec).unwrap();
    let share = |y: u8| {
        let (mut m, mut t) = (0usize, 0usize);
        for e in corpus.train.iter().filter(|e| e.y_true == y && e.group("gender") == Some("Men")) {
            t += e.tokens.len();
            m += e.tokens.iter().filter(|s| s.starts_with("@men")).count();
        }
        m as f64 / t as f64
    };
    assert!(share(1) > 3.0 * share(0), "{} vs {}", share(1), share(0));
}

#[test]
fn subgroup_model_beats_base_on_its_group() {
    let corpus = gen_corpus(&CorpusSpec::gender(13)).unwrap();
    let shape = ModelShape { dim: 1024, hidden: 16 };
    let cfg = TrainConfig::default();
    let sub = train_subgroup(&corpus.train, "gender", "Women", shape, &cfg, "test").unwrap();
    assert_eq!(sub.metadata().get("subset").map(String::as_str), Some("Women"));
    let base = ToyModel::init(shape, cfg.seed).to_checkpoint();
    let test = tvfair::lab::corpus::subset(&corpus.test, "gender", "Women");
    let acc = |c| {
        let p = predict(c, &test).unwrap();
        p.iter().filter(|r| r.y_pred == Some(r.y_true)).count() as f64 / p.len() as f64
    };
    assert!(acc(&sub) > acc(&base) + 0.2, "{} vs {}", acc(&sub), acc(&base));
}

#[test]
fn lora_update_has_rank_at_most_r() {
    let corpus = gen_corpus(&CorpusSpec::race(13)).unwrap();
    let shape = ModelShape { dim: 256, hidden: 32 };
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let base = ToyModel::init(shape, cfg.seed).to_checkpoint();
    let lora = LoraConfig { rank: 4, alpha: 8.0 };
    let (merged, adapter) = train_lora(&corpus.train, &base, lora, &cfg, &prov("none")).unwrap();
    assert_eq!(adapter.rank, 4);
    let delta: Vec<f64> = w1_of(&merged).iter().zip(w1_of(&base)).map(|(m, b)| m - b).collect();
    let sv = DMatrix::from_row_slice(shape.dim, shape.hidden, &delta).singular_values();
    let top = sv.max();
    assert!(top > 0.0);
    let significant = sv.iter().filter(|s| **s > 1e-5 * top).count();
    assert!(significant <= 4, "{significant} singular values above floor: {sv:?}");
    // frozen tensors really are frozen
    for name in ["b1", "w2"] {
        assert_eq!(merged.get(name), base.get(name));
    }
}

fn batch(seed: u64, n: usize, dim: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<Example> = (0..n)
        .map(|i| {
            let toks: Vec<String> = (0..rng.random_range(3..9)).map(|_| format!("t{}", rng.random_range(0..40))).collect();
            let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
            ex(i, &refs, rng.random_range(0..2), "a")
        })
        .collect();
    samples(&examples, dim)
}

#[test]
fn gradients_match_finite_differences() {
    let shape = ModelShape { dim: 128, hidden: 8 };
    for seed in 0..5 {
        let model = ToyModel::init(shape, seed);
        let check = grad_check(&model, &batch(seed, 16, shape.dim), 1e-5, 120, seed);
        assert!(check.checked >= 100);
        assert!(check.max_relative_error < 1e-4, "seed {seed}: {check:?}");
    }
}

#[test]
fn grad_check_catches_a_broken_backward_pass() {
    let shape = ModelShape { dim: 128, hidden: 8 };
    let model = ToyModel::init(shape, 3);
    let data = batch(3, 16, shape.dim);
    // forget the tanh derivative in the first layer
    let broken = |m: &ToyModel, b: &[Sample]| -> Grads {
        let (_, mut g) = loss_and_grad(m, b);
        for v in g.w1.iter_mut().chain(g.b1.iter_mut()) {
            *v *= 1.3;
        }
        g
    };
    let check = grad_check_with(&model, &data, 1e-5, 120, 3, broken);
    assert!(check.max_relative_error > 0.1, "{check:?}");
}

#[test]
fn training_lowers_the_loss() {
    let shape = ModelShape { dim: 128, hidden: 8 };
    let data = batch(9, 64, shape.dim);
    let init = ToyModel::init(shape, 9);
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let trained = train_from(&init, &data, &cfg).unwrap();
    assert!(loss_and_grad(&trained, &data).0 < loss_and_grad(&init, &data).0);
}

#[test]
fn two_group_split_sizes() {
    let spec = CorpusSpec::from_counts("g", &[("A", 1), ("B", 1)], 1000, 21);
    let corpus = gen_corpus(&spec).unwrap();
    for g in ["A", "B"] {
        let train = corpus.train_subset(g).len() as f64;
        let test = tvfair::lab::corpus::subset(&corpus.test, "g", g).len() as f64;
        let n = train + test;
        // 500 ± 4.5 binomial standard deviations
        assert!((n - 500.0).abs() <= 4.5 * (1000.0f64 * 0.25).sqrt(), "{g}: {n}");
        assert_eq!(train, (n * 0.8).round(), "{g}: stratified 80/20");
    }
}

#[test]
fn subgroup_training_sets_partition_the_pool() {
    let corpus = gen_corpus(&CorpusSpec::race(13)).unwrap();
    let mut ids: Vec<String> = corpus
        .group_names()
        .iter()
        .flat_map(|g| corpus.train_subset(g).into_iter().map(|e| e.id))
        .collect();
    let n = ids.len();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), n, "subsets overlap");
    let mut pool: Vec<String> = corpus.train.iter().map(|e| e.id.clone()).collect();
    pool.sort();
    assert_eq!(ids, pool);
}

#[test]
fn unbiased_corpus_gives_cue_oracle_equal_error_rates() {
    // any rule on the non-marker tokens has group-independent error rates
    // when no group is biased; "more hateful cues than benign ones" is one
    let spec = CorpusSpec::from_counts("g", &[("A", 1), ("B", 1), ("C", 1)], 6000, 5);
    assert!(spec.groups.iter().all(|g| g.bias == 0.0));
    let corpus = gen_corpus(&spec).unwrap();
    let all: Vec<&Example> = corpus.train.iter().chain(&corpus.test).collect();
    let oracle = |e: &Example| {
        let h = e.tokens.iter().filter(|t| t.starts_with('h')).count();
        let b = e.tokens.iter().filter(|t| t.starts_with('b')).count();
        h > b
    };
    for y in [0u8, 1] {
        let rate = |keep: &dyn Fn(&Example) -> bool| {
            let sel: Vec<_> = all.iter().filter(|e| e.y_true == y && keep(e)).collect();
            (sel.iter().filter(|e| oracle(e)).count() as f64 / sel.len() as f64, sel.len() as f64)
        };
        let (pooled, _) = rate(&|_| true);
        for g in ["A", "B", "C"] {
            let (r, n) = rate(&|e| e.group("g") == Some(g));
            let se = (pooled * (1.0 - pooled) / n).sqrt();
            assert!((r - pooled).abs() <= 4.5 * se, "y={y} {g}: {r} vs pooled {pooled}");
        }
    }
}
