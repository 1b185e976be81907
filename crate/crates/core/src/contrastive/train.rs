use std::collections::BTreeSet;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{objective_sets, objective_with_sets, AnchorCounts, Objective, ObjectiveValue};
use super::{class_similarities, entity_threshold_at};
use crate::corpus::Sentence;
use crate::encoder::{backprop, forward_sentence, sgd_step, EncoderParams, TokenTrace, UpstreamGrad};
use crate::error::{Error, Result};
use crate::memory::ExemplarMemory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveMode {
    /// Entity term during warmup, entity + threshold-selected O term afterwards.
    #[default]
    EntityAware,
    /// Entity term during warmup, plain supervised contrastive loss over all
    /// tokens (O as a class) afterwards.
    NormalScl,
    /// Entity term only.
    #[serde(rename = "normal-scl-no-O", alias = "normal-scl-no-o")]
    NormalSclNoO,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_epochs: 16,
            warmup_epochs: 10,
        }
    }
}

impl Schedule {
    pub fn joint_epochs(&self) -> usize {
        self.total_epochs.saturating_sub(self.warmup_epochs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Sentences per minibatch.
    pub batch_size: usize,
    pub temperature: f64,
    pub schedule: Schedule,
    pub mode: ContrastiveMode,
    /// Order statistic of the class similarities used as entity threshold.
    pub threshold_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.2,
            batch_size: 16,
            temperature: 0.1,
            schedule: Schedule::default(),
            mode: ContrastiveMode::EntityAware,
            threshold_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.warmup_epochs > self.schedule.total_epochs {
            return Err(Error::Config(format!(
                "warmup epochs {} exceed total epochs {}",
                self.schedule.warmup_epochs, self.schedule.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold_fraction) {
            return Err(Error::Config("threshold fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Scl,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_scl: f64,
    pub loss_o: f64,
    #[serde(rename = "T_ent")]
    pub t_ent: Option<f64>,
    #[serde(rename = "anchorCounts")]
    pub anchor_counts: AnchorCounts,
    #[serde(rename = "devScore", skip_serializing_if = "Option::is_none")]
    pub dev_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch (best dev score, or the last epoch).
    pub params: EncoderParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

/// Forward pass plus objective on one minibatch. Returns the traces so the
/// caller can backpropagate.
pub fn batch_objective(
    params: &EncoderParams,
    sentences: &[&Sentence],
    objective: Objective,
    new_classes: &BTreeSet<String>,
    temperature: f64,
) -> Result<(ObjectiveValue, Vec<TokenTrace>)> {
    let traces: Vec<TokenTrace> = sentences
        .iter()
        .flat_map(|s| forward_sentence(params, s))
        .collect();
    let labels: Vec<&str> = sentences.iter().flat_map(|s| s.labels()).collect();
    let z: Vec<Vec<f64>> = traces.iter().map(|t| t.z.clone()).collect();
    let sets = objective_sets(&labels, &z, objective, new_classes);
    let value = objective_with_sets(&z, &sets, temperature)?;
    Ok((value, traces))
}

fn epoch_objective(
    epoch: usize,
    cfg: &TrainConfig,
    memory: &ExemplarMemory,
    params: &EncoderParams,
) -> Result<(Phase, Objective, Option<f64>)> {
    if epoch < cfg.schedule.warmup_epochs {
        return Ok((Phase::Scl, Objective::Entity, None));
    }
    match cfg.mode {
        ContrastiveMode::NormalSclNoO => Ok((Phase::Scl, Objective::Entity, None)),
        ContrastiveMode::NormalScl => Ok((Phase::Joint, Objective::AllTokens, None)),
        ContrastiveMode::EntityAware => {
            let sims = class_similarities(memory, params)?;
            if sims.is_empty() {
                warn!("epoch {epoch}: no class has two exemplars, O term skipped");
                return Ok((Phase::Joint, Objective::Entity, None));
            }
            let t = entity_threshold_at(&sims, cfg.threshold_fraction)?.value;
            Ok((Phase::Joint, Objective::Joint { threshold: t }, Some(t)))
        }
    }
}

/// Two-phase contrastive training over `data`.
///
/// Each minibatch minimizes its summed contrastive loss divided by the number of
/// tokens in the batch. After every epoch, `dev_score` (when given) rates the
/// current parameters and the best-scoring epoch is kept.
pub fn train_step(
    params: &EncoderParams,
    data: &[Sentence],
    memory: &ExemplarMemory,
    new_classes: &BTreeSet<String>,
    cfg: &TrainConfig,
    seed: u64,
    mut dev_score: Option<&mut dyn FnMut(&EncoderParams) -> Result<f64>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Training("no training sentences".into()));
    }
    let mut live = params.clone();
    live.register_surfaces(data.iter().flat_map(|s| s.tokens.iter().map(|t| t.surface.as_str())));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.schedule.total_epochs);
    let mut best: Option<(f64, usize, EncoderParams)> = None;

    for epoch in 0..cfg.schedule.total_epochs {
        let (phase, objective, t_ent) = epoch_objective(epoch, cfg, memory, &live)?;
        order.shuffle(&mut rng);
        let mut entry = EpochLog {
            epoch,
            phase,
            loss_scl: 0.0,
            loss_o: 0.0,
            t_ent,
            anchor_counts: AnchorCounts::default(),
            dev_score: None,
        };
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sentence> = chunk.iter().map(|&i| &data[i]).collect();
            let (value, traces) =
                batch_objective(&live, &batch, objective, new_classes, cfg.temperature)?;
            entry.loss_scl += value.loss_scl;
            entry.loss_o += value.loss_o;
            entry.anchor_counts.entity += value.counts.entity;
            entry.anchor_counts.outside += value.counts.outside;
            if value.counts.entity + value.counts.outside == 0 {
                continue;
            }
            let scale = 1.0 / traces.len() as f64;
            let upstream: Vec<UpstreamGrad> = value
                .total
                .grad_z
                .into_iter()
                .map(|g| UpstreamGrad {
                    dz: g.into_iter().map(|x| x * scale).collect(),
                    dh: Vec::new(),
                })
                .collect();
            let grads = backprop(&live, &traces, &upstream)?;
            sgd_step(&mut live, &grads, cfg.learning_rate)?;
        }
        if let Some(score_fn) = dev_score.as_mut() {
            let score = score_fn(&live)?;
            entry.dev_score = Some(score);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, live.clone()));
            }
        }
        debug!(
            "epoch {epoch} {phase:?} scl={:.4} o={:.4} t_ent={t_ent:?}",
            entry.loss_scl, entry.loss_o
        );
        log.push(entry);
    }

    Ok(match best {
        Some((_, epoch, params)) => TrainOutcome {
            params,
            log,
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            params: live,
            log,
            best_epoch: None,
        },
    })
}
