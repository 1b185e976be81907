//! Independent oracles shared by the integration and acceptance tests.
//!
//! Everything here is written from the definitions, without calling the
//! library routine it is compared against.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use incner::contrastive::{objective_sets, objective_with_sets, Objective, ObjectiveSets};
use incner::corpus::{Sentence, Token};
use incner::encoder::{backprop, forward_sentence, EncoderConfig, EncoderParams, UpstreamGrad};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Cosine with the same rounding sequence as the library, written out longhand.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vs.len() as f64;
    out.iter().map(|o| o / n).collect()
}

pub fn random_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = random_vector(rng, dim);
        let n = dot(&v, &v).sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// (anchor, positives, contrast) triples, all index lists ascending.
pub type BruteAnchor = (usize, Vec<usize>, Vec<usize>);

/// Every non-O token whose label occurs elsewhere in the batch; positives are
/// the other tokens with that label, the contrast set is every other token.
pub fn brute_entity_anchors(labels: &[&str]) -> Vec<BruteAnchor> {
    let n = labels.len();
    let mut out = Vec::new();
    for i in 0..n {
        if labels[i] == "O" {
            continue;
        }
        let mut positives = Vec::new();
        let mut contrast = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            contrast.push(j);
            if labels[j] == labels[i] {
                positives.push(j);
            }
        }
        if !positives.is_empty() {
            out.push((i, positives, contrast));
        }
    }
    out
}

/// O tokens with at least one other O token above `threshold`; contrast is
/// those positives plus every token of a new class.
pub fn brute_o_anchors(
    labels: &[&str],
    z: &[Vec<f64>],
    threshold: f64,
    new_classes: &BTreeSet<String>,
) -> Vec<BruteAnchor> {
    let n = labels.len();
    let mut out = Vec::new();
    for i in 0..n {
        if labels[i] != "O" {
            continue;
        }
        let mut positives = Vec::new();
        let mut contrast = Vec::new();
        for j in 0..n {
            let positive = j != i && labels[j] == "O" && dot(&z[i], &z[j]) > threshold;
            if positive {
                positives.push(j);
            }
            if positive || new_classes.contains(labels[j]) {
                contrast.push(j);
            }
        }
        if !positives.is_empty() {
            out.push((i, positives, contrast));
        }
    }
    out
}

/// Per-task NCM-style threshold: β times the smallest exemplar-to-own-prototype cosine.
pub fn brute_proto_threshold(reps: &BTreeMap<String, Vec<Vec<f64>>>, classes: &[String], beta: f64) -> Option<f64> {
    let mut sims = Vec::new();
    for c in classes {
        if let Some(vs) = reps.get(c) {
            if vs.is_empty() {
                continue;
            }
            let p = mean(vs);
            for v in vs {
                sims.push(cosine(v, &p));
            }
        }
    }
    sims.into_iter().reduce(f64::min).map(|m| beta * m)
}

/// β times the smallest cosine over ordered pairs of distinct exemplars of one class.
pub fn brute_nn_threshold(reps: &BTreeMap<String, Vec<Vec<f64>>>, classes: &[String], beta: f64) -> Option<f64> {
    let mut sims = Vec::new();
    for c in classes {
        let vs = reps.get(c).cloned().unwrap_or_default();
        for i in 0..vs.len() {
            for j in 0..vs.len() {
                if i != j {
                    sims.push(cosine(&vs[i], &vs[j]));
                }
            }
        }
    }
    sims.into_iter().reduce(f64::min).map(|m| beta * m)
}

/// Exhaustive assignment: compare against every reference, keep the first
/// maximum, relabel when it beats its task's threshold.
pub fn brute_assign(
    candidates: &[((String, usize), Vec<f64>)],
    references: &[(String, Vec<f64>)],
    class_task: &BTreeMap<String, usize>,
    task_threshold: &BTreeMap<usize, Option<f64>>,
) -> (BTreeMap<(String, usize), String>, usize) {
    let mut relabeled = BTreeMap::new();
    let mut skipped = 0;
    for (key, h) in candidates {
        if references.is_empty() {
            break;
        }
        let sims: Vec<f64> = references.iter().map(|(_, r)| cosine(h, r)).collect();
        let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let winner = sims.iter().position(|&s| s == best).unwrap();
        let class = &references[winner].0;
        match task_threshold.get(&class_task[class]).copied().flatten() {
            Some(th) if best > th => {
                relabeled.insert(key.clone(), class.clone());
            }
            Some(_) => {}
            None => skipped += 1,
        }
    }
    (relabeled, skipped)
}

/// Token-level relabel quality recounted from gold sentences.
pub fn recount_relabel_stats(
    relabeled: &BTreeMap<(String, usize), String>,
    gold: &[Sentence],
    old_classes: &BTreeSet<String>,
) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for s in gold {
        for (pos, t) in s.tokens.iter().enumerate() {
            let assigned = relabeled.get(&(s.id.clone(), pos));
            let target = old_classes.contains(&t.label);
            match assigned {
                Some(c) if *c == t.label => tp += 1,
                Some(_) => {
                    fp += 1;
                    if target {
                        fn_ += 1;
                    }
                }
                None if target => fn_ += 1,
                None => {}
            }
        }
    }
    (tp, fp, fn_)
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub parameters: usize,
    pub tokens: usize,
}

/// Joint-loss value with anchor sets frozen, so the loss is smooth in the parameters.
fn frozen_loss(params: &EncoderParams, batch: &[Sentence], sets: &ObjectiveSets, temperature: f64) -> f64 {
    let z: Vec<Vec<f64>> = batch
        .iter()
        .flat_map(|s| forward_sentence(params, s))
        .map(|t| t.z)
        .collect();
    objective_with_sets(&z, sets, temperature).unwrap().total.loss
}

/// Denominator guard for entries where both gradients vanish.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares the analytic joint-loss gradient against central differences on a
/// random small encoder and batch drawn from `seed`.
pub fn gradient_check(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let config = EncoderConfig {
        embedding_dim: r.random_range(2..=5),
        window: r.random_range(0..=1),
        hidden_dim: r.random_range(2..=16),
        rep_dim: r.random_range(2..=16),
        proj_hidden_dim: r.random_range(2..=16),
        proj_dim: r.random_range(2..=16),
    };
    let mut params = EncoderParams::new(config, r.random(), None).unwrap();
    let vocab = ["a", "b", "c", "d", "e"];
    let label_pool = ["O", "O", "A", "B"];
    let tokens: usize = r.random_range(3..=8);
    let split = r.random_range(1..=tokens);
    let make = |r: &mut ChaCha8Rng, id: &str, n: usize| {
        Sentence::new(
            id,
            (0..n)
                .map(|_| {
                    Token::new(
                        vocab[r.random_range(0..vocab.len())],
                        label_pool[r.random_range(0..label_pool.len())],
                    )
                })
                .collect(),
        )
    };
    let mut batch = vec![make(&mut r, "s0", split)];
    if tokens > split {
        batch.push(make(&mut r, "s1", tokens - split));
    }
    params.register_surfaces(batch.iter().flat_map(|s| s.tokens.iter().map(|t| t.surface.as_str())));
    // Larger weights than the default init so tanh units leave the linear regime.
    let mut flat = params.flatten();
    for w in flat.iter_mut() {
        *w = r.random_range(-0.8..0.8);
    }
    params.assign_flat(&flat).unwrap();

    let temperature = r.random_range(0.2..1.0);
    let new_classes: BTreeSet<String> = ["A".to_string(), "B".to_string()].into();
    let traces: Vec<_> = batch.iter().flat_map(|s| forward_sentence(&params, s)).collect();
    let labels: Vec<&str> = batch.iter().flat_map(|s| s.labels()).collect();
    let z: Vec<Vec<f64>> = traces.iter().map(|t| t.z.clone()).collect();
    let threshold = r.random_range(-0.5..0.9);
    let sets = objective_sets(&labels, &z, Objective::Joint { threshold }, &new_classes);

    let value = objective_with_sets(&z, &sets, temperature).unwrap();
    let upstream: Vec<UpstreamGrad> = value
        .total
        .grad_z
        .iter()
        .map(|g| UpstreamGrad {
            dz: g.clone(),
            dh: Vec::new(),
        })
        .collect();
    let analytic = backprop(&params, &traces, &upstream).unwrap().flatten_like(&params);

    let base = params.flatten();
    // Truncation and rounding error balance near this step for these loss scales.
    let step = 1e-4;
    let mut probe = params.clone();
    let mut max_rel_error: f64 = 0.0;
    for k in 0..base.len() {
        let mut shifted = base.clone();
        shifted[k] = base[k] + step;
        probe.assign_flat(&shifted).unwrap();
        let up = frozen_loss(&probe, &batch, &sets, temperature);
        shifted[k] = base[k] - step;
        probe.assign_flat(&shifted).unwrap();
        let down = frozen_loss(&probe, &batch, &sets, temperature);
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        max_rel_error = max_rel_error.max(rel);
    }
    GradCheck {
        max_rel_error,
        parameters: base.len(),
        tokens,
    }
}
