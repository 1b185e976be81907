use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mask_labels, Corpus, Sentence, OUTSIDE};
use crate::error::{Error, Result};

/// Class sets of one incremental step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub index: usize,
    /// Classes introduced at this step, in stream order.
    pub new_classes: Vec<String>,
    /// O followed by every class introduced at earlier steps.
    pub old_classes: Vec<String>,
}

impl TaskSpec {
    /// Old classes followed by new classes; O comes first.
    pub fn all_classes(&self) -> Vec<String> {
        self.old_classes
            .iter()
            .chain(&self.new_classes)
            .cloned()
            .collect()
    }

    pub fn new_set(&self) -> BTreeSet<String> {
        self.new_classes.iter().cloned().collect()
    }

    /// Learnt entity classes of earlier steps (O excluded).
    pub fn old_entity_classes(&self) -> Vec<String> {
        self.old_classes
            .iter()
            .filter(|c| c.as_str() != OUTSIDE)
            .cloned()
            .collect()
    }

    /// Every learnt entity class (O excluded).
    pub fn entity_classes(&self) -> Vec<String> {
        let mut out = self.old_entity_classes();
        out.extend(self.new_classes.iter().cloned());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub spec: TaskSpec,
    /// Training sentences masked to the new classes.
    pub train: Corpus,
    /// The same training sentences with every learnt class visible, for relabeling statistics.
    pub train_gold: Corpus,
    pub dev: Corpus,
    /// Sentences with at least one learnt class, masked to all learnt classes.
    pub test: Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DevMode {
    /// Dev masked to the step's new classes.
    #[default]
    NewClasses,
    /// Dev masked to every learnt class.
    Cumulative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            dev: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskStreamOptions {
    pub fractions: SplitFractions,
    pub dev_mode: DevMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub class_to_task: BTreeMap<String, usize>,
    pub class_order: Vec<String>,
    pub seed: u64,
    pub classes_per_task: usize,
    pub dev_mode: DevMode,
}

impl TaskStream {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Keeps only the first `n` tasks.
    pub fn truncated(&self, n: usize) -> TaskStream {
        let mut out = self.clone();
        out.tasks.truncate(n);
        let kept: usize = n.min(self.tasks.len()) * self.classes_per_task;
        out.class_order.truncate(kept);
        out.class_to_task.retain(|_, t| *t < n);
        out
    }
}

/// Seeded partition of a corpus into train/dev/test pools.
pub fn split_corpus(
    corpus: &Corpus,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(Vec<Sentence>, Vec<Sentence>, Vec<Sentence>)> {
    let SplitFractions { train, dev } = fractions;
    if !(train > 0.0 && dev >= 0.0 && train + dev <= 1.0) {
        return Err(Error::Config(format!(
            "invalid split fractions train={train} dev={dev}"
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SEED_MASK));
    let n = corpus.len() as f64;
    let n_train = (n * train).round() as usize;
    let n_dev = ((n * dev).round() as usize).min(corpus.len() - n_train);
    let pick = |idx: &[usize]| -> Vec<Sentence> {
        let mut v: Vec<usize> = idx.to_vec();
        v.sort_unstable();
        v.into_iter().map(|i| corpus.sentences[i].clone()).collect()
    };
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_dev]),
        pick(&order[n_train + n_dev..]),
    ))
}

const SPLIT_SEED_MASK: u64 = 0x5eed_5071_7000_0001;

/// Seeded class permutation followed by [`build_task_stream_with_order`].
pub fn build_task_stream(
    corpus: &Corpus,
    task_count: usize,
    classes_per_task: usize,
    seed: u64,
    options: TaskStreamOptions,
) -> Result<TaskStream> {
    check_counts(corpus, task_count, classes_per_task)?;
    let mut classes: Vec<String> = corpus.label_inventory.iter().cloned().collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    classes.truncate(task_count * classes_per_task);
    build_task_stream_with_order(corpus, &classes, classes_per_task, seed, options)
}

fn check_counts(corpus: &Corpus, task_count: usize, classes_per_task: usize) -> Result<()> {
    if task_count == 0 || classes_per_task == 0 {
        return Err(Error::Config(
            "task count and classes per task must be positive".into(),
        ));
    }
    let needed = task_count * classes_per_task;
    if needed > corpus.label_inventory.len() {
        return Err(Error::Config(format!(
            "{task_count} tasks x {classes_per_task} classes needs {needed} classes, corpus has {}",
            corpus.label_inventory.len()
        )));
    }
    Ok(())
}

/// Builds a stream from an explicit class order, chunked into groups of
/// `classes_per_task`.
pub fn build_task_stream_with_order(
    corpus: &Corpus,
    class_order: &[String],
    classes_per_task: usize,
    seed: u64,
    options: TaskStreamOptions,
) -> Result<TaskStream> {
    if classes_per_task == 0 || class_order.is_empty() || !class_order.len().is_multiple_of(classes_per_task) {
        return Err(Error::Config(format!(
            "class order of length {} cannot be split into groups of {classes_per_task}",
            class_order.len()
        )));
    }
    let unique: BTreeSet<&String> = class_order.iter().collect();
    if unique.len() != class_order.len() {
        return Err(Error::Config("class order contains duplicates".into()));
    }
    if let Some(c) = class_order
        .iter()
        .find(|c| c.as_str() == OUTSIDE || !corpus.label_inventory.contains(*c))
    {
        return Err(Error::Config(format!("class `{c}` is not in the corpus inventory")));
    }

    let (train_pool, dev_pool, test_pool) = split_corpus(corpus, options.fractions, seed)?;

    let mut tasks = Vec::new();
    let mut class_to_task = BTreeMap::new();
    let mut learnt: Vec<String> = Vec::new();
    for (index, group) in class_order.chunks(classes_per_task).enumerate() {
        let mut old_classes = vec![OUTSIDE.to_string()];
        old_classes.extend(learnt.iter().cloned());
        let spec = TaskSpec {
            index,
            new_classes: group.to_vec(),
            old_classes,
        };
        for c in group {
            class_to_task.insert(c.clone(), index);
        }
        learnt.extend(group.iter().cloned());

        let new_set = spec.new_set();
        let all_set: BTreeSet<String> = learnt.iter().cloned().collect();
        let dev_visible = match options.dev_mode {
            DevMode::NewClasses => &new_set,
            DevMode::Cumulative => &all_set,
        };
        let select = |pool: &[Sentence], trigger: &BTreeSet<String>, visible: &BTreeSet<String>| {
            let sentences = pool
                .iter()
                .filter(|s| s.has_any_label(trigger))
                .map(|s| mask_labels(s, visible))
                .collect();
            Corpus::new(sentences)
        };
        tasks.push(Task {
            train: select(&train_pool, &new_set, &new_set)?,
            train_gold: select(&train_pool, &new_set, &all_set)?,
            dev: select(&dev_pool, &new_set, dev_visible)?,
            test: select(&test_pool, &all_set, &all_set)?,
            spec,
        });
    }

    Ok(TaskStream {
        tasks,
        class_to_task,
        class_order: class_order.to_vec(),
        seed,
        classes_per_task,
        dev_mode: options.dev_mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_corpus, SynthConfig, Token};

    fn corpus_with_classes(n: usize) -> Corpus {
        let sentences = (0..n * 4)
            .map(|i| {
                Sentence::new(
                    format!("s{i}"),
                    vec![
                        Token::new("the", "O"),
                        Token::new(format!("w{i}"), format!("c{:02}", i % n)),
                        Token::new(format!("v{i}"), format!("c{:02}", (i + 1) % n)),
                    ],
                )
            })
            .collect();
        Corpus::new(sentences).unwrap()
    }

    #[test]
    fn few_nerd_shaped_split() {
        let corpus = corpus_with_classes(66);
        let stream = build_task_stream(&corpus, 11, 6, 1, Default::default()).unwrap();
        assert_eq!(stream.task_count(), 11);
        assert!(stream.tasks.iter().all(|t| t.spec.new_classes.len() == 6));
    }

    #[test]
    fn ontonotes_shaped_split() {
        let corpus = corpus_with_classes(18);
        let stream = build_task_stream(&corpus, 6, 3, 1, Default::default()).unwrap();
        assert_eq!(stream.task_count(), 6);
        assert!(stream.tasks.iter().all(|t| t.spec.new_classes.len() == 3));
    }

    #[test]
    fn too_few_classes_is_a_config_error() {
        let corpus = corpus_with_classes(4);
        assert!(matches!(
            build_task_stream(&corpus, 5, 1, 0, Default::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stream_invariants_hold() {
        let synth = synthesize_corpus(&SynthConfig {
            class_count: 12,
            tokens_per_class: 40,
            ..Default::default()
        })
        .unwrap();
        let stream = build_task_stream(&synth.corpus, 4, 3, 9, Default::default()).unwrap();
        let mut seen = BTreeSet::new();
        for (t, task) in stream.tasks.iter().enumerate() {
            let new = task.spec.new_set();
            assert!(!new.contains(OUTSIDE));
            for c in &new {
                assert!(seen.insert(c.clone()), "class {c} in two tasks");
            }
            let all: BTreeSet<String> = task.spec.all_classes().into_iter().collect();
            for s in &task.train.sentences {
                assert!(s.has_any_label(&new));
                assert!(s.labels().all(|l| l == OUTSIDE || new.contains(l)));
            }
            for s in &task.test.sentences {
                assert!(s.labels().all(|l| all.contains(l)));
            }
            if t + 1 < stream.tasks.len() {
                let next = &stream.tasks[t + 1].spec;
                let next_old: BTreeSet<String> = next.old_classes.iter().cloned().collect();
                assert_eq!(next_old, all);
            }
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let corpus = corpus_with_classes(12);
        let a = build_task_stream(&corpus, 4, 3, 42, Default::default()).unwrap();
        let b = build_task_stream(&corpus, 4, 3, 42, Default::default()).unwrap();
        assert_eq!(a, b);
        let c = build_task_stream(&corpus, 4, 3, 43, Default::default()).unwrap();
        assert_ne!(a.class_order, c.class_order);
    }

    #[test]
    fn explicit_order_is_respected() {
        let corpus = corpus_with_classes(6);
        let order: Vec<String> = ["c05", "c04", "c03", "c02"].iter().map(|s| s.to_string()).collect();
        let stream =
            build_task_stream_with_order(&corpus, &order, 2, 0, Default::default()).unwrap();
        assert_eq!(stream.tasks[0].spec.new_classes, ["c05", "c04"]);
        assert_eq!(stream.tasks[1].spec.old_classes, ["O", "c05", "c04"]);
        assert_eq!(stream.class_to_task["c02"], 1);
    }

    #[test]
    fn cumulative_dev_mode_keeps_old_labels() {
        let corpus = corpus_with_classes(6);
        let opts = TaskStreamOptions {
            dev_mode: DevMode::Cumulative,
            fractions: SplitFractions { train: 0.5, dev: 0.5 },
        };
        let stream = build_task_stream(&corpus, 3, 2, 3, opts).unwrap();
        let last = stream.tasks.last().unwrap();
        let new = last.spec.new_set();
        assert!(last
            .dev
            .sentences
            .iter()
            .flat_map(|s| s.labels())
            .any(|l| l != OUTSIDE && !new.contains(l)));
    }
}
