//! Per-class exemplar storage and class prototypes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sentence, Token, OUTSIDE};
use crate::encoder::{forward_sentence, surface_key, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg;

/// One stored token and its context. Every other token of the context is O.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub surface: String,
    pub label: String,
    pub context: Sentence,
    pub position: usize,
}

impl Exemplar {
    fn new(sentence: &Sentence, position: usize, label: &str) -> Self {
        let tokens = sentence
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                Token::new(
                    t.surface.clone(),
                    if i == position { label } else { OUTSIDE },
                )
            })
            .collect();
        Self {
            surface: sentence.tokens[position].surface.clone(),
            label: label.to_string(),
            context: Sentence::new(sentence.id.clone(), tokens),
            position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    pub k: usize,
    pub per_class: BTreeMap<String, Vec<Exemplar>>,
    /// Classes stored with fewer than `k` exemplars, and how many they got.
    pub shortfalls: BTreeMap<String, usize>,
}

impl ExemplarMemory {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("exemplars per class must be >= 1".into()));
        }
        Ok(Self {
            k,
            per_class: BTreeMap::new(),
            shortfalls: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    pub fn get(&self, class: &str) -> Option<&[Exemplar]> {
        self.per_class.get(class).map(Vec::as_slice)
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.per_class.keys().map(String::as_str)
    }

    /// Selects exemplars for `classes` from `train` and stores them.
    pub fn add_classes(&mut self, train: &Corpus, classes: &[String], seed: u64) -> Result<()> {
        let built = build_exemplars(train, classes, self.k, seed)?;
        for (class, exemplars) in built {
            if exemplars.len() < self.k {
                self.shortfalls.insert(class.clone(), exemplars.len());
            }
            self.per_class.insert(class, exemplars);
        }
        Ok(())
    }

    /// One rehearsal sentence per exemplar, restricted to `classes`.
    pub fn rehearsal_sentences(&self, classes: &[String]) -> Vec<Sentence> {
        let mut out = Vec::new();
        for class in classes {
            for (k, ex) in self.get(class).unwrap_or_default().iter().enumerate() {
                let mut s = ex.context.clone();
                s.id = format!("memory:{class}:{k}:{}", ex.context.id);
                out.push(s);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Frequency-ranked exemplar selection.
///
/// Surfaces of each class are ranked by how often they carry the class label
/// (ties broken lexicographically); the top `k` each get one containing
/// sentence drawn uniformly at random. When a class has fewer than `k`
/// distinct surfaces, the ranked surfaces are revisited with contexts not yet
/// used until `k` is reached or no context is left.
pub fn build_exemplars(
    train: &Corpus,
    classes: &[String],
    k: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<Exemplar>>> {
    if k == 0 {
        return Err(Error::Config("exemplars per class must be >= 1".into()));
    }
    let mut out = BTreeMap::new();
    for class in classes {
        // surface -> (frequency, distinct (sentence, first position) occurrences)
        let mut stats: BTreeMap<&str, (usize, Vec<(usize, usize)>)> = BTreeMap::new();
        for (si, s) in train.sentences.iter().enumerate() {
            let mut seen_here = BTreeSet::new();
            for (pos, t) in s.tokens.iter().enumerate() {
                if &t.label != class {
                    continue;
                }
                let entry = stats.entry(t.surface.as_str()).or_default();
                entry.0 += 1;
                if seen_here.insert(t.surface.as_str()) {
                    entry.1.push((si, pos));
                }
            }
        }
        if stats.is_empty() {
            return Err(Error::MissingClass(class.clone()));
        }
        let mut ranked: Vec<(&str, usize, Vec<(usize, usize)>)> =
            stats.into_iter().map(|(s, (n, occ))| (s, n, occ)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ surface_key(class));
        let mut chosen: Vec<Exemplar> = Vec::with_capacity(k);
        let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
        'fill: loop {
            let mut progressed = false;
            for (_, _, occurrences) in &ranked {
                if chosen.len() == k {
                    break 'fill;
                }
                let free: Vec<&(usize, usize)> =
                    occurrences.iter().filter(|o| !used.contains(o)).collect();
                if let Some(&&(si, pos)) = free.choose(&mut rng) {
                    used.insert((si, pos));
                    chosen.push(Exemplar::new(&train.sentences[si], pos, class));
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        if chosen.len() < k {
            warn!(
                "class `{class}` yields only {} exemplars (requested {k})",
                chosen.len()
            );
        }
        out.insert(class.clone(), chosen);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class: String,
    pub vector: Vec<f64>,
    pub step: usize,
}

/// `h` of every exemplar of each requested class, in stored order.
pub fn exemplar_reps(
    memory: &ExemplarMemory,
    params: &EncoderParams,
    classes: &[String],
) -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
    classes
        .iter()
        .map(|class| {
            let exemplars = memory
                .get(class)
                .filter(|e| !e.is_empty())
                .ok_or_else(|| Error::MissingClass(class.clone()))?;
            let reps = exemplars
                .iter()
                .map(|e| forward_sentence(params, &e.context).swap_remove(e.position).h)
                .collect();
            Ok((class.clone(), reps))
        })
        .collect()
}

/// Mean exemplar `h` per class.
pub fn prototypes_from_reps(
    reps: &BTreeMap<String, Vec<Vec<f64>>>,
    step: usize,
) -> Result<BTreeMap<String, Prototype>> {
    reps.iter()
        .map(|(class, vs)| {
            let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
            let vector = linalg::mean(&refs).ok_or_else(|| Error::MissingClass(class.clone()))?;
            Ok((
                class.clone(),
                Prototype {
                    class: class.clone(),
                    vector,
                    step,
                },
            ))
        })
        .collect()
}

pub fn prototypes(
    memory: &ExemplarMemory,
    params: &EncoderParams,
    classes: &[String],
    step: usize,
) -> Result<BTreeMap<String, Prototype>> {
    prototypes_from_reps(&exemplar_reps(memory, params, classes)?, step)
}
