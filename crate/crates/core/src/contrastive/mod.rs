//! Entity-aware supervised contrastive learning.
//!
//! The entity term contrasts labeled entity tokens; the O term treats O
//! tokens whose projected similarity exceeds the entity threshold as latent
//! entity clusters, with new-class tokens as their negatives.

mod anchors;
mod loss;
mod train;

pub use anchors::{select_all_anchors, select_entity_anchors, select_o_anchors, Anchor, AnchorSets};
pub use loss::{
    joint_loss, objective_sets, objective_with_sets, sup_con_loss, AnchorCounts, LossValue,
    Objective, ObjectiveSets, ObjectiveValue,
};
pub use train::{
    batch_objective, train_step, ContrastiveMode, EpochLog, Phase, Schedule, TrainConfig,
    TrainOutcome,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{forward_sentence, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::memory::ExemplarMemory;

/// Mean cosine over all unordered pairs.
pub fn mean_pairwise_cosine(vectors: &[Vec<f64>]) -> Result<f64> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::InsufficientExemplars {
            class: String::new(),
            needed: 2,
            have: n,
        });
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += cosine(&vectors[i], &vectors[j])?;
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// Class similarity `S_c`: mean pairwise cosine of the projected exemplars of `class`.
pub fn class_similarity(memory: &ExemplarMemory, params: &EncoderParams, class: &str) -> Result<f64> {
    let exemplars = memory.get(class).unwrap_or_default();
    if exemplars.len() < 2 {
        return Err(Error::InsufficientExemplars {
            class: class.to_string(),
            needed: 2,
            have: exemplars.len(),
        });
    }
    let zs: Vec<Vec<f64>> = exemplars
        .iter()
        .map(|e| forward_sentence(params, &e.context).swap_remove(e.position).z)
        .collect();
    mean_pairwise_cosine(&zs).map_err(|e| match e {
        Error::InsufficientExemplars { needed, have, .. } => Error::InsufficientExemplars {
            class: class.to_string(),
            needed,
            have,
        },
        other => other,
    })
}

/// `S_c` for every stored class with at least two exemplars.
pub fn class_similarities(memory: &ExemplarMemory, params: &EncoderParams) -> Result<BTreeMap<String, f64>> {
    memory
        .per_class
        .iter()
        .filter(|(_, ex)| ex.len() >= 2)
        .map(|(class, _)| Ok((class.clone(), class_similarity(memory, params, class)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityThreshold {
    pub value: f64,
    pub class_sims: BTreeMap<String, f64>,
    pub epoch: usize,
}

/// Median class similarity: ascending sort, 0-based index `⌊n/2⌋`.
pub fn entity_threshold(class_sims: &BTreeMap<String, f64>) -> Result<EntityThreshold> {
    entity_threshold_at(class_sims, 0.5)
}

/// Order statistic at index `⌊n·fraction⌋` (clamped to `n − 1`) of the
/// ascending class similarities.
pub fn entity_threshold_at(class_sims: &BTreeMap<String, f64>, fraction: f64) -> Result<EntityThreshold> {
    if class_sims.is_empty() {
        return Err(Error::Config(
            "entity threshold needs at least one class similarity".into(),
        ));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "threshold fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let mut sorted: Vec<f64> = class_sims.values().copied().collect();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite class similarity".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let index = ((n as f64 * fraction).floor() as usize).min(n - 1);
    Ok(EntityThreshold {
        value: sorted[index],
        class_sims: class_sims.clone(),
        epoch: 0,
    })
}
