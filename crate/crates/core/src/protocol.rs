//! The incremental loop: relabel with the previous model, store exemplars,
//! train contrastively, refresh prototypes and evaluate, once per task.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::{outside_prototype, NcmModel};
use crate::contrastive::{train_step, ContrastiveMode, EpochLog, TrainConfig};
use crate::corpus::{DevMode, Lexicon, Sentence, Task, TaskStream};
use crate::encoder::{EncoderConfig, EncoderParams, EncoderSnapshot};
use crate::error::{Error, Result};
use crate::memory::{prototypes, ExemplarMemory};
use crate::metrics::{micro, score, token_counts, Grouping, MetricsReport};
use crate::relabel::{relabel_task, BetaSchedule, OldTask, RelabelReport, RelabelStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Exemplar draws and O-prototype samples.
    pub data: u64,
    /// Encoder initialization.
    pub init: u64,
    /// Minibatch order.
    pub order: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            init: 1,
            order: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub exemplars_per_class: usize,
    /// Replay the exemplar contexts of old classes during training.
    pub rehearsal: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            exemplars_per_class: 5,
            rehearsal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelConfig {
    pub strategy: RelabelStrategy,
    pub beta: BetaSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Add an O prototype so the classifier can predict O.
    pub outside_prototype: bool,
    /// O tokens averaged into the O prototype.
    pub outside_sample: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            outside_prototype: true,
            outside_sample: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub memory: MemoryConfig,
    pub relabel: RelabelConfig,
    pub classifier: ClassifierConfig,
    /// Keep the epoch with the best new-class dev score.
    pub select_best_epoch: bool,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            memory: MemoryConfig::default(),
            relabel: RelabelConfig::default(),
            classifier: ClassifierConfig::default(),
            select_best_epoch: true,
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.relabel.beta.validate()?;
        if self.memory.exemplars_per_class == 0 {
            return Err(Error::Config("memory.exemplars_per_class must be >= 1".into()));
        }
        if self.classifier.outside_prototype && self.classifier.outside_sample == 0 {
            return Err(Error::Config("classifier.outside_sample must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `dotted.key=value` overrides. Values are read as JSON, falling
    /// back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{raw}` is not key=value")))?;
            let value: Value = serde_json::from_str(value.trim())
                .unwrap_or_else(|_| Value::String(value.trim().to_string()));
            let mut node = &mut doc;
            for part in key.trim().split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Usage(format!("unknown config key `{key}`")))?;
            }
            *node = value;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ablation arms as (relabel strategy, contrastive mode) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    FullProto,
    FullNn,
    NoRelabel,
    NormalScl,
    NormalSclNoO,
    NormalSclNoRelabel,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::FullProto,
        Arm::FullNn,
        Arm::NoRelabel,
        Arm::NormalScl,
        Arm::NormalSclNoO,
        Arm::NormalSclNoRelabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::FullProto => "full-proto",
            Arm::FullNn => "full-nn",
            Arm::NoRelabel => "no-relabel",
            Arm::NormalScl => "normal-scl",
            Arm::NormalSclNoO => "normal-scl-no-O",
            Arm::NormalSclNoRelabel => "normal-scl-no-relabel",
        }
    }

    pub fn settings(self) -> (RelabelStrategy, ContrastiveMode) {
        use ContrastiveMode::*;
        use RelabelStrategy as R;
        match self {
            Arm::FullProto => (R::Proto, EntityAware),
            Arm::FullNn => (R::Nn, EntityAware),
            Arm::NoRelabel => (R::None, EntityAware),
            Arm::NormalScl => (R::Proto, NormalScl),
            Arm::NormalSclNoO => (R::Proto, NormalSclNoO),
            Arm::NormalSclNoRelabel => (R::None, NormalScl),
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let (strategy, mode) = self.settings();
        let mut out = cfg.clone();
        out.relabel.strategy = strategy;
        out.train.mode = mode;
        out
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let known: Vec<&str> = Arm::ALL.iter().map(|a| a.name()).collect();
                Error::Usage(format!("unknown arm `{s}`; expected one of {}", known.join(", ")))
            })
    }
}

/// Independent per-step seed derived from a base seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, step: usize) -> u64 {
    let mut z = base ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepReport {
    pub step: usize,
    pub new_classes: Vec<String>,
    pub metrics: MetricsReport,
    pub relabel: Option<RelabelReport>,
    /// New-class token micro-F1 on the new-class dev set.
    pub probe: Option<f64>,
    pub best_epoch: Option<usize>,
    pub train_sentences: usize,
    pub rehearsal_sentences: usize,
    pub exemplar_shortfalls: std::collections::BTreeMap<String, usize>,
    #[serde(skip)]
    pub epochs: Vec<EpochLog>,
}

pub struct RunState {
    pub params: EncoderParams,
    /// The model at the end of the previous step, once one exists.
    pub snapshot: Option<EncoderSnapshot>,
    pub memory: ExemplarMemory,
    /// Classes of each completed task.
    pub learnt: Vec<Vec<String>>,
    pub history: Vec<StepReport>,
}

impl RunState {
    pub fn new(cfg: &RunConfig, lexicon: Option<&Lexicon>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params: EncoderParams::new(cfg.encoder.clone(), cfg.seeds.init, lexicon)?,
            snapshot: None,
            memory: ExemplarMemory::new(cfg.memory.exemplars_per_class)?,
            learnt: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn next_step(&self) -> usize {
        self.learnt.len()
    }

    fn entity_classes(&self) -> Vec<String> {
        self.learnt.iter().flatten().cloned().collect()
    }
}

/// Prototypes of `classes` under `params`, preceded by the O prototype when enabled.
pub fn build_classifier(
    params: &EncoderParams,
    memory: &ExemplarMemory,
    classes: &[String],
    outside_data: &[Sentence],
    cfg: &ClassifierConfig,
    seed: u64,
    step: usize,
) -> Result<NcmModel> {
    let protos = prototypes(memory, params, classes, step)?;
    let outside = if cfg.outside_prototype {
        outside_prototype(params, outside_data, cfg.outside_sample, seed)
    } else {
        None
    };
    NcmModel::from_prototypes(&protos, classes, outside, step)
}

/// Token micro-F1 restricted to `new_classes` on a dev set masked to them.
pub fn new_class_probe(
    ncm: &NcmModel,
    params: &EncoderParams,
    dev: &[Sentence],
    new_classes: &BTreeSet<String>,
) -> f64 {
    let gold: Vec<Vec<String>> = dev
        .iter()
        .map(|s| s.labels().map(str::to_string).collect())
        .collect();
    let pred = ncm.predict(params, dev);
    micro(&token_counts(&gold, &pred), Some(new_classes)).f1()
}

/// Runs one incremental step and appends its report to `state.history`.
pub fn run_step<'a>(state: &'a mut RunState, task: &Task, cfg: &RunConfig) -> Result<&'a StepReport> {
    let t = state.next_step();
    if task.spec.index != t {
        return Err(Error::Protocol(format!(
            "expected task {t}, got task {}",
            task.spec.index
        )));
    }
    let old_classes = state.entity_classes();
    if task.spec.old_entity_classes() != old_classes {
        return Err(Error::Protocol(format!(
            "task {t} expects old classes {:?}, state has learnt {old_classes:?}",
            task.spec.old_entity_classes()
        )));
    }
    let new_set = task.spec.new_set();
    let data_seed = derive_seed(cfg.seeds.data, t);

    // (1) freeze the previous model.
    if t > 0 {
        state.snapshot = Some(EncoderSnapshot::new(&state.params, t - 1));
    }

    // (2) relabel old-class entities hidden under O.
    let mut relabel = None;
    let mut train_data = task.train.sentences.clone();
    if let (Some(snapshot), true) = (&state.snapshot, cfg.relabel.strategy != RelabelStrategy::None) {
        let old_tasks: Vec<OldTask> = state
            .learnt
            .iter()
            .enumerate()
            .map(|(index, classes)| OldTask {
                index,
                classes: classes.clone(),
            })
            .collect();
        let (outcome, report) = relabel_task(
            t,
            &task.train.sentences,
            snapshot.params(),
            &state.memory,
            &old_tasks,
            cfg.relabel.strategy,
            &cfg.relabel.beta,
            Some(&task.train_gold.sentences),
        )?;
        info!(
            "step {t}: relabeled {} of {} O tokens",
            report.relabeled, report.candidates
        );
        train_data = outcome.apply(&train_data);
        relabel = Some(report);
    }

    // (3) exemplars for the new classes, rehearsal for the old ones.
    state
        .memory
        .add_classes(&task.train, &task.spec.new_classes, data_seed)?;
    let rehearsal = if cfg.memory.rehearsal {
        state.memory.rehearsal_sentences(&old_classes)
    } else {
        Vec::new()
    };
    let train_sentences = train_data.len();
    let rehearsal_sentences = rehearsal.len();
    let mut data = train_data;
    data.extend(rehearsal);

    let mut all_classes = old_classes.clone();
    all_classes.extend(task.spec.new_classes.iter().cloned());

    // (4) two-phase contrastive training with dev-based epoch selection.
    let memory = &state.memory;
    let mut dev_score = |params: &EncoderParams| -> Result<f64> {
        let ncm = build_classifier(params, memory, &all_classes, &data, &cfg.classifier, data_seed, t)?;
        Ok(new_class_probe(&ncm, params, &task.dev.sentences, &new_set))
    };
    let selector: Option<&mut dyn FnMut(&EncoderParams) -> Result<f64>> =
        if cfg.select_best_epoch && !task.dev.is_empty() {
            Some(&mut dev_score)
        } else {
            None
        };
    let outcome = train_step(
        &state.params,
        &data,
        memory,
        &new_set,
        &cfg.train,
        derive_seed(cfg.seeds.order, t),
        selector,
    )?;
    state.params = outcome.params;

    // (5) prototypes under the new model, (6) cumulative evaluation.
    let ncm = build_classifier(
        &state.params,
        &state.memory,
        &all_classes,
        &data,
        &cfg.classifier,
        data_seed,
        t,
    )?;
    let predictions = ncm.predict(&state.params, &task.test.sentences);
    let mut task_classes = state.learnt.clone();
    task_classes.push(task.spec.new_classes.clone());
    let old_set: BTreeSet<String> = old_classes.iter().cloned().collect();
    let metrics = score(
        t,
        &task.test.sentences,
        &predictions,
        &Grouping::by_task(&task_classes),
        &old_set,
        &new_set,
        ncm.has_outside(),
    )?;
    let probe = (!task.dev.is_empty())
        .then(|| new_class_probe(&ncm, &state.params, &task.dev.sentences, &new_set));
    info!(
        "step {t}: span micro-F1 {:.4}, token micro-F1 {:.4}",
        metrics.micro_f1_span, metrics.micro_f1_token
    );

    let exemplar_shortfalls = task
        .spec
        .new_classes
        .iter()
        .filter_map(|c| state.memory.shortfalls.get(c).map(|n| (c.clone(), *n)))
        .collect();
    state.learnt.push(task.spec.new_classes.clone());
    state.history.push(StepReport {
        step: t,
        new_classes: task.spec.new_classes.clone(),
        metrics,
        relabel,
        probe,
        best_epoch: outcome.best_epoch,
        train_sentences,
        rehearsal_sentences,
        exemplar_shortfalls,
        epochs: outcome.log,
    });
    Ok(state.history.last().expect("just pushed"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StreamSummary {
    pub task_count: usize,
    pub classes_per_task: usize,
    pub class_order: Vec<String>,
    pub seed: u64,
    pub dev_mode: DevMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunSummary {
    pub final_micro_f1_span: f64,
    pub final_micro_f1_token: f64,
    pub final_macro_f1_token: f64,
    pub final_old_micro_f1_token: Option<f64>,
    pub mean_micro_f1_span: f64,
    pub mean_macro_f1_token: f64,
    /// Mean new-class probe over incremental steps (step ≥ 1).
    pub mean_incremental_probe: Option<f64>,
    pub total_outside_as_entity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub stream: StreamSummary,
    pub steps: Vec<StepReport>,
    pub summary: RunSummary,
}

fn summarize(steps: &[StepReport]) -> Result<RunSummary> {
    let last = steps
        .last()
        .ok_or_else(|| Error::Protocol("stream has no tasks".into()))?;
    let n = steps.len() as f64;
    let probes: Vec<f64> = steps.iter().skip(1).filter_map(|s| s.probe).collect();
    Ok(RunSummary {
        final_micro_f1_span: last.metrics.micro_f1_span,
        final_micro_f1_token: last.metrics.micro_f1_token,
        final_macro_f1_token: last.metrics.macro_f1_token,
        final_old_micro_f1_token: last.metrics.old_micro_f1_token,
        mean_micro_f1_span: steps.iter().map(|s| s.metrics.micro_f1_span).sum::<f64>() / n,
        mean_macro_f1_token: steps.iter().map(|s| s.metrics.macro_f1_token).sum::<f64>() / n,
        mean_incremental_probe: (!probes.is_empty())
            .then(|| probes.iter().sum::<f64>() / probes.len() as f64),
        total_outside_as_entity: steps.iter().map(|s| s.metrics.outside_as_entity).sum(),
    })
}

/// Runs every task of `stream` in order.
pub fn run_stream(stream: &TaskStream, cfg: &RunConfig, lexicon: Option<&Lexicon>) -> Result<RunReport> {
    let mut state = RunState::new(cfg, lexicon)?;
    for task in &stream.tasks {
        run_step(&mut state, task, cfg)?;
    }
    let summary = summarize(&state.history)?;
    Ok(RunReport {
        config: cfg.clone(),
        stream: StreamSummary {
            task_count: stream.task_count(),
            classes_per_task: stream.classes_per_task,
            class_order: stream.class_order.clone(),
            seed: stream.seed,
            dev_mode: stream.dev_mode,
        },
        steps: state.history,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::Schedule;
    use crate::corpus::{build_task_stream, synthesize_corpus, SynthConfig, TaskStreamOptions};

    fn quick_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.encoder = EncoderConfig {
            embedding_dim: 8,
            window: 1,
            hidden_dim: 12,
            rep_dim: 8,
            proj_hidden_dim: 8,
            proj_dim: 6,
        };
        cfg.train.schedule = Schedule {
            total_epochs: 3,
            warmup_epochs: 2,
        };
        cfg
    }

    fn stream(tasks: usize) -> (TaskStream, Lexicon) {
        let synth = synthesize_corpus(&SynthConfig {
            class_count: 6,
            tokens_per_class: 40,
            dim: 8,
            ..Default::default()
        })
        .unwrap();
        let s = build_task_stream(&synth.corpus, tasks, 2, 3, TaskStreamOptions::default()).unwrap();
        (s, synth.lexicon)
    }

    #[test]
    fn overrides_edit_nested_keys() {
        let cfg = RunConfig::default()
            .with_overrides(&["relabel.strategy=nn", "train.temperature=0.2", "seeds.init=9"])
            .unwrap();
        assert_eq!(cfg.relabel.strategy, RelabelStrategy::Nn);
        assert_eq!(cfg.train.temperature, 0.2);
        assert_eq!(cfg.seeds.init, 9);
        assert!(matches!(
            RunConfig::default().with_overrides(&["relabel.stratgy=nn"]),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            RunConfig::default().with_overrides(&["train.temperature=0"]),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::default().with_overrides(&["novalue"]).is_err());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(RunConfig::from_json(r#"{"encoder": {"embedding_dim": 8}}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn arms_round_trip_their_names() {
        for arm in Arm::ALL {
            assert_eq!(arm.name().parse::<Arm>().unwrap(), arm);
        }
        assert!("full".parse::<Arm>().is_err());
        let cfg = Arm::NormalSclNoRelabel.apply(&RunConfig::default());
        assert_eq!(cfg.relabel.strategy, RelabelStrategy::None);
        assert_eq!(cfg.train.mode, ContrastiveMode::NormalScl);
    }

    #[test]
    fn steps_must_arrive_in_order() {
        let (s, lex) = stream(3);
        let cfg = quick_config();
        let mut state = RunState::new(&cfg, Some(&lex)).unwrap();
        assert!(matches!(run_step(&mut state, &s.tasks[1], &cfg), Err(Error::Protocol(_))));
        run_step(&mut state, &s.tasks[0], &cfg).unwrap();
        assert!(state.snapshot.is_none());
        assert!(state.history[0].relabel.is_none());
        run_step(&mut state, &s.tasks[1], &cfg).unwrap();
        assert_eq!(state.snapshot.as_ref().unwrap().step(), 0);
        assert!(state.history[1].relabel.is_some());
        assert_eq!(state.learnt.len(), 2);
    }

    #[test]
    fn stream_is_deterministic() {
        let (s, lex) = stream(3);
        let cfg = quick_config();
        let a = run_stream(&s, &cfg, Some(&lex)).unwrap();
        let b = run_stream(&s, &cfg, Some(&lex)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.steps.len(), 3);
    }

    #[test]
    fn derived_seeds_differ_by_step() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }
}
