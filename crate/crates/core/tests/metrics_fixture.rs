//! Ten sentences whose scores were counted by hand.
//!
//! PER and LOC belong to task 0, ORG to task 1.

use std::collections::BTreeSet;

use incner::corpus::{Sentence, Token};
use incner::metrics::{score, span_counts, token_counts, Grouping, MetricsReport};

const FIXTURE: [(&[&str], &[&str]); 10] = [
    (&["PER", "PER", "O"], &["PER", "PER", "O"]),
    (&["O", "LOC"], &["O", "LOC"]),
    (&["ORG", "O", "O"], &["ORG", "O", "ORG"]),
    (&["PER", "O"], &["LOC", "O"]),
    (&["LOC", "LOC"], &["LOC", "O"]),
    (&["O", "O", "O"], &["O", "O", "O"]),
    (&["ORG", "ORG"], &["ORG", "ORG"]),
    (&["O", "PER"], &["PER", "PER"]),
    (&["ORG", "O"], &["PER", "O"]),
    (&["O", "LOC", "O"], &["O", "LOC", "O"]),
];

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn fixture() -> (Vec<Sentence>, Vec<Vec<String>>) {
    FIXTURE
        .iter()
        .enumerate()
        .map(|(k, (gold, pred))| {
            let sentence = Sentence::new(
                format!("s{k}"),
                gold.iter().map(|l| Token::new("w", *l)).collect(),
            );
            (sentence, pred.iter().map(|l| l.to_string()).collect())
        })
        .unzip()
}

fn report() -> MetricsReport {
    let (gold, pred) = fixture();
    let grouping = Grouping::by_task(&[vec!["PER".into(), "LOC".into()], vec!["ORG".into()]]);
    score(1, &gold, &pred, &grouping, &set(&["PER", "LOC"]), &set(&["ORG"]), true).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn per_class_token_counts() {
    let (gold, pred) = fixture();
    let gold: Vec<Vec<String>> = gold.iter().map(|s| s.labels().map(str::to_string).collect()).collect();
    let counts = token_counts(&gold, &pred);
    let triple = |c: &str| (counts[c].tp, counts[c].fp, counts[c].fn_);
    assert_eq!(triple("PER"), (3, 2, 1));
    assert_eq!(triple("LOC"), (3, 1, 1));
    assert_eq!(triple("ORG"), (3, 1, 1));
    let spans = span_counts(&gold, &pred);
    assert_eq!((spans.tp, spans.fp, spans.fn_), (5, 5, 4));
}

#[test]
fn headline_scores() {
    let r = report();
    assert!(close(r.micro_f1_token, 18.0 / 25.0));
    assert!(close(r.macro_f1_token, (6.0 / 9.0 + 0.75 + 0.75) / 3.0));
    assert!(close(r.micro_f1_span, 10.0 / 19.0));
    assert!(close(r.old_micro_f1_token.unwrap(), 12.0 / 17.0));
    assert!(close(r.new_micro_f1_token, 0.75));
    assert!(close(r.per_class_f1["PER"], 6.0 / 9.0));
}

#[test]
fn token_totals_and_confusion() {
    let r = report();
    assert_eq!((r.tokens, r.correct, r.errors()), (24, 19, 5));
    assert_eq!(r.outside_as_entity, 2);
    assert_eq!(r.group_labels, ["O", "task0", "task1"]);
    assert_eq!(r.confusion, vec![vec![0, 1, 1], vec![1, 1, 0], vec![0, 1, 0]]);
}
