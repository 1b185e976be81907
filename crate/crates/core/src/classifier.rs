//! Nearest-class-mean token classification.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_outside, Sentence, OUTSIDE};
use crate::encoder::{forward_sentence, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::{self, cosine, norm};
use crate::memory::Prototype;

/// One prototype per class, held in canonical order (O first when present).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcmModel {
    pub classes: Vec<String>,
    pub prototypes: Vec<Vec<f64>>,
    pub step: usize,
}

impl NcmModel {
    pub fn new(entries: Vec<(String, Vec<f64>)>, step: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Contract("classifier needs at least one prototype".into()));
        }
        for (class, v) in &entries {
            if !(norm(v) > 0.0) {
                return Err(Error::Domain(format!("prototype of `{class}` is a zero vector")));
            }
        }
        let (classes, prototypes) = entries.into_iter().unzip();
        Ok(Self {
            classes,
            prototypes,
            step,
        })
    }

    /// Prototypes for `class_order` (entity classes only), preceded by an
    /// optional O prototype.
    pub fn from_prototypes(
        prototypes: &BTreeMap<String, Prototype>,
        class_order: &[String],
        outside: Option<Vec<f64>>,
        step: usize,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(class_order.len() + 1);
        if let Some(o) = outside {
            entries.push((OUTSIDE.to_string(), o));
        }
        for class in class_order.iter().filter(|c| !is_outside(c)) {
            let p = prototypes
                .get(class)
                .ok_or_else(|| Error::MissingMemory(format!("class `{class}`")))?;
            entries.push((class.clone(), p.vector.clone()));
        }
        Self::new(entries, step)
    }

    pub fn has_outside(&self) -> bool {
        self.classes.first().is_some_and(|c| is_outside(c))
    }

    /// Class of maximal cosine similarity; the earliest class wins ties.
    pub fn classify(&self, h: &[f64]) -> Result<&str> {
        if !(norm(h) > 0.0) {
            return Err(Error::Domain("cannot classify a zero vector".into()));
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, p) in self.prototypes.iter().enumerate() {
            let s = cosine(h, p)?;
            if s > best.0 {
                best = (s, k);
            }
        }
        Ok(&self.classes[best.1])
    }

    /// Per-token predictions for every sentence, in input order. Tokens with
    /// a zero representation are predicted O.
    pub fn predict(&self, params: &EncoderParams, sentences: &[Sentence]) -> Vec<Vec<String>> {
        sentences
            .par_iter()
            .map(|s| {
                forward_sentence(params, s)
                    .iter()
                    .map(|tr| self.classify(&tr.h).unwrap_or(OUTSIDE).to_string())
                    .collect()
            })
            .collect()
    }
}

/// Mean `h` of up to `sample_size` O tokens of `sentences`, drawn without
/// replacement. `None` when there are no O tokens.
pub fn outside_prototype(
    params: &EncoderParams,
    sentences: &[Sentence],
    sample_size: usize,
    seed: u64,
) -> Option<Vec<f64>> {
    let positions: Vec<(usize, usize)> = sentences
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| is_outside(&t.label))
                .map(move |(pos, _)| (si, pos))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample: Vec<(usize, usize)> = positions
        .choose_multiple(&mut rng, sample_size)
        .copied()
        .collect();
    sample.sort_unstable();

    let mut by_sentence: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (si, pos) in sample {
        by_sentence.entry(si).or_default().push(pos);
    }
    let reps: Vec<Vec<f64>> = by_sentence
        .into_iter()
        .flat_map(|(si, positions)| {
            let traces = forward_sentence(params, &sentences[si]);
            positions.into_iter().map(move |p| traces[p].h.clone())
        })
        .collect();
    let refs: Vec<&[f64]> = reps.iter().map(Vec::as_slice).collect();
    linalg::mean(&refs)
}
