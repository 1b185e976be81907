//! Token and span F1 scores and task-grouped error confusion.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_outside, spans, Sentence, OUTSIDE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2TP / (2TP + FP + FN)`, 0 when undefined.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-class token counts over entity classes. A wrong entity prediction is a
/// false positive of the predicted class and a false negative of the gold one.
pub fn token_counts<G, P>(gold: &[G], pred: &[P]) -> BTreeMap<String, Counts>
where
    G: AsRef<[String]>,
    P: AsRef<[String]>,
{
    let mut out: BTreeMap<String, Counts> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        for (gl, pl) in g.as_ref().iter().zip(p.as_ref()) {
            if gl == pl {
                if !is_outside(gl) {
                    out.entry(gl.clone()).or_default().tp += 1;
                }
                continue;
            }
            if !is_outside(pl) {
                out.entry(pl.clone()).or_default().fp += 1;
            }
            if !is_outside(gl) {
                out.entry(gl.clone()).or_default().fn_ += 1;
            }
        }
    }
    out
}

/// Micro-averaged counts over the classes in `classes` (all classes when `None`).
pub fn micro(counts: &BTreeMap<String, Counts>, classes: Option<&BTreeSet<String>>) -> Counts {
    let mut total = Counts::default();
    for (c, n) in counts {
        if classes.is_none_or(|s| s.contains(c)) {
            total.add(*n);
        }
    }
    total
}

/// Span counts under exact (start, end, label) matching.
pub fn span_counts<G, P>(gold: &[G], pred: &[P]) -> Counts
where
    G: AsRef<[String]>,
    P: AsRef<[String]>,
{
    let mut total = Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        let gs: BTreeSet<_> = spans(g.as_ref().iter().map(String::as_str)).into_iter().collect();
        let ps: BTreeSet<_> = spans(p.as_ref().iter().map(String::as_str)).into_iter().collect();
        let tp = gs.intersection(&ps).count();
        total.tp += tp;
        total.fp += ps.len() - tp;
        total.fn_ += gs.len() - tp;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    #[serde(rename = "microF1_span")]
    pub micro_f1_span: f64,
    #[serde(rename = "microF1_token")]
    pub micro_f1_token: f64,
    #[serde(rename = "macroF1_token")]
    pub macro_f1_token: f64,
    #[serde(rename = "perClassF1")]
    pub per_class_f1: BTreeMap<String, f64>,
    /// Error counts only: rows are gold groups, columns predicted groups.
    pub confusion: Vec<Vec<usize>>,
    #[serde(rename = "groupLabels")]
    pub group_labels: Vec<String>,
    #[serde(rename = "oldMicroF1_token")]
    pub old_micro_f1_token: Option<f64>,
    #[serde(rename = "newMicroF1_token")]
    pub new_micro_f1_token: f64,
    /// Gold-O tokens predicted as an entity.
    #[serde(rename = "outsideAsEntity")]
    pub outside_as_entity: usize,
    pub tokens: usize,
    pub correct: usize,
    /// Whether the classifier could predict O through an O prototype.
    #[serde(rename = "outsidePrototype")]
    pub outside_prototype: bool,
}

impl MetricsReport {
    pub fn errors(&self) -> usize {
        self.tokens - self.correct
    }

    pub fn token_accuracy(&self) -> f64 {
        ratio(self.correct, self.tokens)
    }
}

/// Class groups for the confusion matrix: O, then one group per task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    pub labels: Vec<String>,
    class_group: BTreeMap<String, usize>,
}

impl Grouping {
    /// `tasks[i]` lists the classes of task `i`.
    pub fn by_task(tasks: &[Vec<String>]) -> Self {
        let mut labels = vec![OUTSIDE.to_string()];
        let mut class_group = BTreeMap::new();
        for (i, classes) in tasks.iter().enumerate() {
            labels.push(format!("task{i}"));
            for c in classes {
                class_group.insert(c.clone(), i + 1);
            }
        }
        Self {
            labels,
            class_group,
        }
    }

    fn group(&self, label: &str) -> Result<usize> {
        if is_outside(label) {
            return Ok(0);
        }
        self.class_group
            .get(label)
            .copied()
            .ok_or_else(|| Error::Contract(format!("label `{label}` belongs to no group")))
    }
}

/// Scores predictions against the labels of `gold`.
///
/// `old` and `new` select the classes of the restricted micro scores.
pub fn score(
    step: usize,
    gold: &[Sentence],
    pred: &[Vec<String>],
    grouping: &Grouping,
    old: &BTreeSet<String>,
    new: &BTreeSet<String>,
    outside_prototype: bool,
) -> Result<MetricsReport> {
    if gold.len() != pred.len() || gold.iter().zip(pred).any(|(g, p)| g.len() != p.len()) {
        return Err(Error::Contract("predictions do not align with gold tokens".into()));
    }
    let gold_labels: Vec<Vec<String>> = gold
        .iter()
        .map(|s| s.labels().map(str::to_string).collect())
        .collect();
    let counts = token_counts(&gold_labels, pred);
    let learnt: BTreeSet<String> = old.union(new).cloned().collect();

    let per_class_f1: BTreeMap<String, f64> = counts
        .iter()
        .filter(|(c, n)| learnt.contains(*c) || n.tp + n.fn_ > 0)
        .map(|(c, n)| (c.clone(), n.f1()))
        .collect();
    let macro_f1_token = if per_class_f1.is_empty() {
        0.0
    } else {
        per_class_f1.values().sum::<f64>() / per_class_f1.len() as f64
    };

    let groups = grouping.labels.len();
    let mut confusion = vec![vec![0usize; groups]; groups];
    let mut tokens = 0;
    let mut correct = 0;
    let mut outside_as_entity = 0;
    for (g, p) in gold_labels.iter().zip(pred) {
        for (gl, pl) in g.iter().zip(p) {
            tokens += 1;
            if gl == pl {
                correct += 1;
                continue;
            }
            if is_outside(gl) {
                outside_as_entity += 1;
            }
            confusion[grouping.group(gl)?][grouping.group(pl)?] += 1;
        }
    }

    Ok(MetricsReport {
        step,
        micro_f1_span: span_counts(&gold_labels, pred).f1(),
        micro_f1_token: micro(&counts, None).f1(),
        macro_f1_token,
        per_class_f1,
        confusion,
        group_labels: grouping.labels.clone(),
        old_micro_f1_token: (!old.is_empty()).then(|| micro(&counts, Some(old)).f1()),
        new_micro_f1_token: micro(&counts, Some(new)).f1(),
        outside_as_entity,
        tokens,
        correct,
        outside_prototype,
    })
}

/// Confusion matrix as CSV with a header row and a leading gold-group column.
pub fn write_confusion_csv<W: Write>(report: &MetricsReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["gold\\pred".to_string()];
    header.extend(report.group_labels.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in report.group_labels.iter().zip(&report.confusion) {
        let mut record = vec![label.clone()];
        record.extend(row.iter().map(usize::to_string));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<confusion csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Token;

    fn sentence(labels: &[&str]) -> Sentence {
        Sentence::new(
            "s",
            labels.iter().map(|l| Token::new("w", *l)).collect(),
        )
    }

    fn strings(labels: &[&str]) -> Vec<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_predictions() {
        let gold = vec![sentence(&["PER", "O", "LOC", "LOC"])];
        let pred = vec![strings(&["PER", "O", "LOC", "LOC"])];
        let g = Grouping::by_task(&[strings(&["PER"]), strings(&["LOC"])]);
        let r = score(1, &gold, &pred, &g, &set(&["PER"]), &set(&["LOC"]), true).unwrap();
        assert_eq!(r.micro_f1_token, 1.0);
        assert_eq!(r.macro_f1_token, 1.0);
        assert_eq!(r.micro_f1_span, 1.0);
        assert_eq!(r.errors(), 0);
        assert!(r.confusion.iter().flatten().all(|&c| c == 0));
    }

    #[test]
    fn all_outside_predictions_score_zero() {
        let gold = vec![sentence(&["PER", "O", "LOC"])];
        let pred = vec![strings(&["O", "O", "O"])];
        let g = Grouping::by_task(&[strings(&["PER", "LOC"])]);
        let r = score(0, &gold, &pred, &g, &set(&[]), &set(&["PER", "LOC"]), true).unwrap();
        assert_eq!(r.micro_f1_token, 0.0);
        assert_eq!(r.micro_f1_span, 0.0);
        assert_eq!(r.old_micro_f1_token, None);
        assert_eq!(r.confusion[1][0], 2);
    }

    #[test]
    fn confusion_rows_sum_to_errors() {
        let gold = vec![sentence(&["O", "PER", "LOC", "O", "ORG"])];
        let pred = vec![strings(&["PER", "LOC", "LOC", "O", "PER"])];
        let g = Grouping::by_task(&[strings(&["PER", "LOC"]), strings(&["ORG"])]);
        let r = score(1, &gold, &pred, &g, &set(&["PER", "LOC"]), &set(&["ORG"]), true).unwrap();
        let total: usize = r.confusion.iter().flatten().sum();
        assert_eq!(total, r.errors());
        assert_eq!(r.errors(), 3);
        assert_eq!(r.outside_as_entity, 1);
        assert_eq!(r.confusion[0][1], 1);
        assert_eq!(r.confusion[1][1], 1);
        assert_eq!(r.confusion[2][1], 1);
    }

    #[test]
    fn unknown_label_is_a_contract_error() {
        let gold = vec![sentence(&["X"])];
        let pred = vec![strings(&["O"])];
        let g = Grouping::by_task(&[strings(&["PER"])]);
        assert!(score(0, &gold, &pred, &g, &set(&[]), &set(&["PER"]), true).is_err());
    }

    #[test]
    fn csv_layout() {
        let gold = vec![sentence(&["PER", "O"])];
        let pred = vec![strings(&["O", "PER"])];
        let g = Grouping::by_task(&[strings(&["PER"])]);
        let r = score(0, &gold, &pred, &g, &set(&[]), &set(&["PER"]), true).unwrap();
        let mut buf = Vec::new();
        write_confusion_csv(&r, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "gold\\pred,O,task0\nO,0,1\ntask0,1,0\n");
    }
}
