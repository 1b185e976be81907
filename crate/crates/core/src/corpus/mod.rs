//! Token-level annotated corpora in the two-column CoNLL layout, label masking,
//! synthetic corpus generation and class-incremental task streams.
//!
//! Labels follow the IO scheme: every token carries either [`OUTSIDE`] or a bare
//! class identifier, and a span is a maximal run of identical non-O labels.

mod stream;
mod synth;

pub use stream::{
    build_task_stream, build_task_stream_with_order, split_corpus, DevMode, SplitFractions, Task,
    TaskSpec, TaskStream, TaskStreamOptions,
};
pub use synth::{synthesize_corpus, Lexicon, SynthConfig, SyntheticCorpus};

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The non-entity label.
pub const OUTSIDE: &str = "O";

#[inline]
pub fn is_outside(label: &str) -> bool {
    label == OUTSIDE
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub label: String,
}

impl Token {
    pub fn new(surface: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            surface: surface.into(),
            label: label.into(),
        }
    }

    pub fn is_entity(&self) -> bool {
        !is_outside(&self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, tokens: Vec<Token>) -> Self {
        Self {
            id: id.into(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.label.as_str())
    }

    pub fn has_any_label(&self, classes: &BTreeSet<String>) -> bool {
        self.tokens.iter().any(|t| classes.contains(&t.label))
    }
}

/// A span `[start, end)` carrying a single entity class.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Maximal runs of identical non-O labels.
pub fn spans<'a, I>(labels: I) -> Vec<Span>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out = Vec::new();
    let mut current: Option<Span> = None;
    for (i, label) in labels.into_iter().enumerate() {
        match current.as_mut() {
            Some(span) if span.label == label => span.end = i + 1,
            _ => {
                if let Some(span) = current.take() {
                    out.push(span);
                }
                if !is_outside(label) {
                    current = Some(Span {
                        start: i,
                        end: i + 1,
                        label: label.to_string(),
                    });
                }
            }
        }
    }
    out.extend(current);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub label_inventory: BTreeSet<String>,
}

impl Corpus {
    /// Builds a corpus, deriving the label inventory from the observed labels.
    pub fn new(sentences: Vec<Sentence>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(sentences.len());
        let mut inventory = BTreeSet::new();
        for s in &sentences {
            if s.is_empty() {
                return Err(Error::Contract(format!("sentence `{}` has no tokens", s.id)));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Contract(format!("duplicate sentence id `{}`", s.id)));
            }
            for t in &s.tokens {
                if t.surface.is_empty() {
                    return Err(Error::Contract(format!(
                        "empty surface in sentence `{}`",
                        s.id
                    )));
                }
                if t.is_entity() {
                    inventory.insert(t.label.clone());
                }
            }
        }
        Ok(Self {
            sentences,
            label_inventory: inventory,
        })
    }

    pub fn empty() -> Self {
        Self {
            sentences: Vec::new(),
            label_inventory: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    /// Every distinct label that actually occurs, O excluded.
    pub fn observed_labels(&self) -> BTreeSet<String> {
        self.sentences
            .iter()
            .flat_map(|s| s.tokens.iter())
            .filter(|t| t.is_entity())
            .map(|t| t.label.clone())
            .collect()
    }

    pub fn surfaces(&self) -> BTreeSet<&str> {
        self.sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(|t| t.surface.as_str()))
            .collect()
    }
}

/// Parses `surface<TAB>label` lines with blank-line sentence breaks.
///
/// A line of the form `# id = <id>` (no tab) names the following sentence;
/// otherwise sentences are numbered by position.
pub fn parse_conll(text: &str) -> Result<Corpus> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut pending_id: Option<String> = None;

    let flush = |tokens: &mut Vec<Token>, pending_id: &mut Option<String>, sentences: &mut Vec<Sentence>| {
        if !tokens.is_empty() {
            let id = pending_id
                .take()
                .unwrap_or_else(|| format!("s{}", sentences.len()));
            sentences.push(Sentence::new(id, std::mem::take(tokens)));
        }
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut tokens, &mut pending_id, &mut sentences);
            continue;
        }
        if line.starts_with('#') && !line.contains('\t') {
            if let Some(id) = line.trim_start_matches('#').trim().strip_prefix("id =") {
                flush(&mut tokens, &mut pending_id, &mut sentences);
                pending_id = Some(id.trim().to_string());
                continue;
            }
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        let (surface, label) = (fields[0], fields[1].trim());
        if surface.is_empty() || label.is_empty() {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "empty surface or label".into(),
            });
        }
        tokens.push(Token::new(surface, label));
    }
    flush(&mut tokens, &mut pending_id, &mut sentences);

    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Corpus::new(sentences).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })
}

/// Emits the corpus in the format accepted by [`parse_conll`], ids included.
pub fn write_conll(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in &corpus.sentences {
        let _ = writeln!(out, "# id = {}", s.id);
        for t in &s.tokens {
            let _ = writeln!(out, "{}\t{}", t.surface, t.label);
        }
        out.push('\n');
    }
    out
}

/// Replaces every label outside `visible` with O.
pub fn mask_labels(sentence: &Sentence, visible: &BTreeSet<String>) -> Sentence {
    Sentence {
        id: sentence.id.clone(),
        tokens: sentence
            .tokens
            .iter()
            .map(|t| Token {
                surface: t.surface.clone(),
                label: if visible.contains(&t.label) {
                    t.label.clone()
                } else {
                    OUTSIDE.to_string()
                },
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sentence(labels: &[&str]) -> Sentence {
        Sentence::new(
            "s",
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| Token::new(format!("w{i}"), *l))
                .collect(),
        )
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_single_sentence() {
        let corpus = parse_conll("The\tO\nEiffel\tbuilding-other\n\n").unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.sentences[0].len(), 2);
        assert_eq!(corpus.label_inventory, set(&["building-other"]));
        assert_eq!(corpus.sentences[0].tokens[1].surface, "Eiffel");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(parse_conll(""), Err(Error::EmptyCorpus)));
        assert!(matches!(parse_conll("\n\n\n"), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn field_count_violation_reports_line() {
        match parse_conll("a\tO\tO") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_conll("a\tO\nb\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ids_survive_a_write_parse_cycle() {
        let corpus = parse_conll("# id = alpha\nx\tPER\n\ny\tO\nz\tLOC\n").unwrap();
        assert_eq!(corpus.sentences[0].id, "alpha");
        assert_eq!(corpus.sentences[1].id, "s1");
        let again = parse_conll(&write_conll(&corpus)).unwrap();
        assert_eq!(again, corpus);
    }

    #[test]
    fn masking_examples() {
        let s = sentence(&["PER", "O", "LOC"]);
        assert_eq!(
            mask_labels(&s, &set(&["LOC"])).labels().collect::<Vec<_>>(),
            ["O", "O", "LOC"]
        );
        let s = sentence(&["O", "O"]);
        assert_eq!(mask_labels(&s, &set(&[])).labels().collect::<Vec<_>>(), ["O", "O"]);
        let s = sentence(&["PER", "PER"]);
        assert_eq!(
            mask_labels(&s, &set(&["PER"])).labels().collect::<Vec<_>>(),
            ["PER", "PER"]
        );
    }

    #[test]
    fn spans_are_maximal_runs() {
        let got = spans(["PER", "PER", "O", "LOC", "ORG", "ORG"]);
        let labels: Vec<_> = got.iter().map(|s| (s.start, s.end, s.label.as_str())).collect();
        assert_eq!(labels, [(0, 2, "PER"), (3, 4, "LOC"), (4, 6, "ORG")]);
        assert!(spans(["O", "O"]).is_empty());
    }

    proptest! {
        #[test]
        fn masking_is_idempotent(labels in proptest::collection::vec(0usize..4, 1..20),
                                 visible in proptest::collection::btree_set(0usize..4, 0..4)) {
            let names = ["O", "A", "B", "C"];
            let s = sentence(&labels.iter().map(|&i| names[i]).collect::<Vec<_>>());
            let visible: BTreeSet<String> = visible.into_iter().map(|i| names[i].to_string()).collect();
            let once = mask_labels(&s, &visible);
            prop_assert_eq!(mask_labels(&once, &visible), once.clone());
            for (a, b) in s.tokens.iter().zip(&once.tokens) {
                prop_assert_eq!(&a.surface, &b.surface);
                if visible.contains(&a.label) {
                    prop_assert_eq!(&a.label, &b.label);
                } else {
                    prop_assert_eq!(b.label.as_str(), OUTSIDE);
                }
            }
        }
    }
}
