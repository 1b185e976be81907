//! Distance-based recovery of old-class entities hidden under O.
//!
//! Both strategies share one assignment rule: an O token is compared against a
//! set of reference vectors (class prototypes, or individual exemplars), the
//! most similar reference wins, and the token takes that reference's class only
//! if the similarity strictly exceeds the threshold of the task that introduced
//! the class. Representations always come from the frozen previous-step
//! snapshot.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_outside, Sentence};
use crate::encoder::{forward_sentence, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::memory::{exemplar_reps, prototypes_from_reps, ExemplarMemory, Prototype};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelabelStrategy {
    #[default]
    Proto,
    Nn,
    None,
}

/// `β_i = base + slope·(t − i)`, or a constant when `fixed` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaSchedule {
    pub base: f64,
    pub slope: f64,
    pub fixed: Option<f64>,
    /// Effective β never drops below this value.
    pub floor: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            base: 0.98,
            slope: -0.05,
            fixed: None,
            floor: 0.5,
        }
    }
}

impl BetaSchedule {
    pub fn fixed(beta: f64) -> Self {
        Self {
            fixed: Some(beta),
            ..Self::default()
        }
    }

    pub fn linear(base: f64, slope: f64) -> Self {
        Self {
            base,
            slope,
            ..Self::default()
        }
    }

    /// Unclamped β for old task `old_task` at step `step`.
    pub fn raw(&self, step: usize, old_task: usize) -> Result<f64> {
        if old_task >= step {
            return Err(Error::Contract(format!(
                "old task {old_task} is not earlier than step {step}"
            )));
        }
        Ok(match self.fixed {
            Some(b) => b,
            None => self.base + self.slope * (step - old_task) as f64,
        })
    }

    /// β after applying the floor.
    pub fn effective(&self, step: usize, old_task: usize) -> Result<f64> {
        let raw = self.raw(step, old_task)?;
        if raw < self.floor {
            warn!(
                "beta {raw:.3} for old task {old_task} at step {step} clamped to {}",
                self.floor
            );
            return Ok(self.floor);
        }
        Ok(raw)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.base.is_finite()
            && self.slope.is_finite()
            && self.floor.is_finite()
            && self.fixed.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::Config("beta schedule values must be finite".into()));
        }
        Ok(())
    }
}

/// The default schedule `0.98 − 0.05·(t − i)`.
pub fn beta_schedule(step: usize, old_task: usize) -> Result<f64> {
    BetaSchedule::default().raw(step, old_task)
}

/// β and threshold of one old task. `threshold` is `None` when the task has
/// no usable exemplars, in which case its classes are never assigned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskThreshold {
    pub task: usize,
    pub beta: f64,
    pub effective_beta: f64,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RelabelThresholds {
    pub strategy: RelabelStrategy,
    pub per_task: BTreeMap<usize, TaskThreshold>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelabelOutcome {
    /// (sentence id, position) → assigned class.
    pub relabeled: BTreeMap<(String, usize), String>,
    pub counts: BTreeMap<String, usize>,
    /// O tokens that could not be scored (zero representation, or a winning
    /// class whose task has no threshold).
    pub skipped: usize,
}

impl RelabelOutcome {
    pub fn total(&self) -> usize {
        self.relabeled.len()
    }

    /// A copy of `sentences` with every relabeled token carrying its new class.
    pub fn apply(&self, sentences: &[Sentence]) -> Vec<Sentence> {
        sentences
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for (pos, t) in s.tokens.iter_mut().enumerate() {
                    if let Some(c) = self.relabeled.get(&(s.id.clone(), pos)) {
                        t.label = c.clone();
                    }
                }
                s
            })
            .collect()
    }
}

/// An O token to be scored: (sentence id, position) and its representation.
pub type Candidate = ((String, usize), Vec<f64>);

/// `β · min` over the exemplars of `classes` of the cosine to their own prototype.
pub fn proto_threshold(
    reps: &BTreeMap<String, Vec<Vec<f64>>>,
    prototypes: &BTreeMap<String, Prototype>,
    classes: &[String],
    beta: f64,
) -> Result<f64> {
    let mut min = f64::INFINITY;
    for class in classes {
        let (Some(vs), Some(p)) = (reps.get(class), prototypes.get(class)) else {
            continue;
        };
        for v in vs {
            min = min.min(cosine(v, &p.vector)?);
        }
    }
    if min.is_finite() {
        Ok(beta * min)
    } else {
        Err(Error::MissingMemory(format!("classes {classes:?}")))
    }
}

/// `β · min` over distinct exemplar pairs within each class of `classes`.
/// Classes with fewer than two exemplars are skipped; `None` when none remain.
pub fn nn_threshold(
    reps: &BTreeMap<String, Vec<Vec<f64>>>,
    classes: &[String],
    beta: f64,
) -> Result<Option<f64>> {
    let mut min = f64::INFINITY;
    for class in classes {
        let vs = reps.get(class).map(Vec::as_slice).unwrap_or_default();
        if vs.len() < 2 {
            warn!("class `{class}` has fewer than two exemplars, skipped for the NN threshold");
            continue;
        }
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                min = min.min(cosine(&vs[i], &vs[j])?);
            }
        }
    }
    Ok(min.is_finite().then_some(beta * min))
}

/// Assigns each candidate the class of its most similar reference when that
/// similarity strictly exceeds the owning task's threshold. Ties go to the
/// earlier reference.
pub fn assign(
    candidates: &[Candidate],
    references: &[(String, Vec<f64>)],
    class_task: &BTreeMap<String, usize>,
    thresholds: &RelabelThresholds,
) -> RelabelOutcome {
    let mut out = RelabelOutcome::default();
    if references.is_empty() {
        return out;
    }
    for (key, h) in candidates {
        let mut best: Option<(f64, &str)> = None;
        let mut scorable = true;
        for (class, r) in references {
            match cosine(h, r) {
                Ok(s) => {
                    if best.is_none_or(|(b, _)| s > b) {
                        best = Some((s, class));
                    }
                }
                Err(_) => {
                    scorable = false;
                    break;
                }
            }
        }
        let threshold = best.and_then(|(_, c)| {
            class_task
                .get(c)
                .and_then(|t| thresholds.per_task.get(t))
                .and_then(|t| t.threshold)
        });
        match (scorable, best, threshold) {
            (true, Some((s, class)), Some(th)) => {
                if s > th {
                    out.relabeled.insert(key.clone(), class.to_string());
                    *out.counts.entry(class.to_string()).or_insert(0) += 1;
                }
            }
            _ => out.skipped += 1,
        }
    }
    out
}

/// Representations of every O token of `sentences` under `params`, in
/// sentence then position order.
pub fn outside_candidates(params: &EncoderParams, sentences: &[Sentence]) -> Vec<Candidate> {
    sentences
        .par_iter()
        .map(|s| {
            let traces = forward_sentence(params, s);
            s.tokens
                .iter()
                .zip(traces)
                .enumerate()
                .filter(|(_, (t, _))| is_outside(&t.label))
                .map(|(pos, (_, tr))| ((s.id.clone(), pos), tr.h))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

pub fn relabel_proto(
    candidates: &[Candidate],
    prototypes: &BTreeMap<String, Prototype>,
    class_task: &BTreeMap<String, usize>,
    thresholds: &RelabelThresholds,
) -> RelabelOutcome {
    let refs: Vec<(String, Vec<f64>)> = prototypes
        .values()
        .map(|p| (p.class.clone(), p.vector.clone()))
        .collect();
    assign(candidates, &refs, class_task, thresholds)
}

pub fn relabel_nn(
    candidates: &[Candidate],
    reps: &BTreeMap<String, Vec<Vec<f64>>>,
    class_task: &BTreeMap<String, usize>,
    thresholds: &RelabelThresholds,
) -> RelabelOutcome {
    let refs: Vec<(String, Vec<f64>)> = reps
        .iter()
        .flat_map(|(c, vs)| vs.iter().map(move |v| (c.clone(), v.clone())))
        .collect();
    assign(candidates, &refs, class_task, thresholds)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RelabelStats {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    #[serde(rename = "microF1")]
    pub micro_f1: f64,
}

/// Token-level quality of `outcome` against gold labels.
///
/// Targets are gold tokens of `old_classes`; a relabel is correct when it
/// names the gold class. Undefined ratios are reported as 0.
pub fn relabel_stats(
    outcome: &RelabelOutcome,
    gold: &[Sentence],
    old_classes: &BTreeSet<String>,
) -> RelabelStats {
    let by_id: BTreeMap<&str, &Sentence> = gold.iter().map(|s| (s.id.as_str(), s)).collect();
    let gold_label = |(id, pos): &(String, usize)| -> Option<&str> {
        by_id
            .get(id.as_str())
            .and_then(|s| s.tokens.get(*pos))
            .map(|t| t.label.as_str())
    };
    let mut tp = 0;
    for (key, class) in &outcome.relabeled {
        if gold_label(key) == Some(class.as_str()) {
            tp += 1;
        }
    }
    let targets = gold
        .iter()
        .flat_map(|s| s.tokens.iter())
        .filter(|t| old_classes.contains(&t.label))
        .count();
    let fp = outcome.relabeled.len() - tp;
    let fn_ = targets - tp;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let micro_f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    RelabelStats {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision,
        recall,
        micro_f1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RelabelReport {
    pub step: usize,
    pub strategy: RelabelStrategy,
    pub per_task: Vec<TaskThreshold>,
    pub counts: BTreeMap<String, usize>,
    pub relabeled: usize,
    pub skipped: usize,
    pub candidates: usize,
    /// Present when gold labels were available.
    #[serde(flatten)]
    pub stats: Option<RelabelStats>,
}

/// Classes introduced by one earlier task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OldTask {
    pub index: usize,
    pub classes: Vec<String>,
}

/// Runs one strategy over `train` with the previous-step snapshot.
///
/// `gold` (the same sentences with old classes visible) enables statistics.
pub fn relabel_task(
    step: usize,
    train: &[Sentence],
    snapshot: &EncoderParams,
    memory: &ExemplarMemory,
    old_tasks: &[OldTask],
    strategy: RelabelStrategy,
    schedule: &BetaSchedule,
    gold: Option<&[Sentence]>,
) -> Result<(RelabelOutcome, RelabelReport)> {
    let old_classes: Vec<String> = old_tasks.iter().flat_map(|t| t.classes.clone()).collect();
    let report_for = |outcome: &RelabelOutcome, per_task: Vec<TaskThreshold>, candidates: usize| {
        let old_set: BTreeSet<String> = old_classes.iter().cloned().collect();
        RelabelReport {
            step,
            strategy,
            per_task,
            counts: outcome.counts.clone(),
            relabeled: outcome.total(),
            skipped: outcome.skipped,
            candidates,
            stats: gold.map(|g| relabel_stats(outcome, g, &old_set)),
        }
    };
    if strategy == RelabelStrategy::None || old_tasks.is_empty() {
        let outcome = RelabelOutcome::default();
        let report = report_for(&outcome, Vec::new(), 0);
        return Ok((outcome, report));
    }

    let stored: Vec<String> = old_classes
        .iter()
        .filter(|c| memory.get(c).is_some_and(|e| !e.is_empty()))
        .cloned()
        .collect();
    let reps = exemplar_reps(memory, snapshot, &stored)?;
    let prototypes = prototypes_from_reps(&reps, step.saturating_sub(1))?;
    let class_task: BTreeMap<String, usize> = old_tasks
        .iter()
        .flat_map(|t| t.classes.iter().map(move |c| (c.clone(), t.index)))
        .collect();

    let mut per_task = BTreeMap::new();
    for task in old_tasks {
        let beta = schedule.raw(step, task.index)?;
        let effective_beta = schedule.effective(step, task.index)?;
        let threshold = match strategy {
            RelabelStrategy::Proto => {
                match proto_threshold(&reps, &prototypes, &task.classes, effective_beta) {
                    Ok(v) => Some(v),
                    Err(Error::MissingMemory(_)) => None,
                    Err(e) => return Err(e),
                }
            }
            RelabelStrategy::Nn => nn_threshold(&reps, &task.classes, effective_beta)?,
            RelabelStrategy::None => unreachable!("handled above"),
        };
        if threshold.is_none() {
            warn!("old task {} has no usable exemplars; its classes are never relabeled", task.index);
        }
        per_task.insert(
            task.index,
            TaskThreshold {
                task: task.index,
                beta,
                effective_beta,
                threshold,
            },
        );
    }
    let thresholds = RelabelThresholds { strategy, per_task };

    let candidates = outside_candidates(snapshot, train);
    let outcome = match strategy {
        RelabelStrategy::Proto => relabel_proto(&candidates, &prototypes, &class_task, &thresholds),
        _ => relabel_nn(&candidates, &reps, &class_task, &thresholds),
    };
    let report = report_for(
        &outcome,
        thresholds.per_task.into_values().collect(),
        candidates.len(),
    );
    Ok((outcome, report))
}
