use std::collections::BTreeSet;

use serde::Serialize;

use crate::corpus::is_outside;
use crate::linalg::dot;

/// An anchor with its positives `P(i)` and contrast set `A(i)`, both sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Anchor {
    pub index: usize,
    pub positives: Vec<usize>,
    pub contrast: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AnchorSets {
    pub anchors: Vec<Anchor>,
}

impl AnchorSets {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.anchors.iter().map(|a| a.index).collect()
    }

    /// `P(i) ⊆ A(i)`, `i ∉ A(i)`, `|P(i)| ≥ 1`, indices in range.
    pub fn is_valid(&self, batch_len: usize) -> bool {
        self.anchors.iter().all(|a| {
            !a.positives.is_empty()
                && a.index < batch_len
                && !a.contrast.contains(&a.index)
                && a.contrast.iter().all(|&j| j < batch_len)
                && a.positives.iter().all(|p| a.contrast.contains(p))
        })
    }
}

/// Entity anchors: every non-O token, contrasted against all other tokens,
/// with same-label tokens as positives. Anchors without positives are dropped.
pub fn select_entity_anchors<S: AsRef<str>>(labels: &[S]) -> AnchorSets {
    label_anchors(labels, |l| !is_outside(l))
}

/// Plain supervised-contrastive anchors with O treated as one more class.
pub fn select_all_anchors<S: AsRef<str>>(labels: &[S]) -> AnchorSets {
    label_anchors(labels, |_| true)
}

fn label_anchors<S: AsRef<str>>(labels: &[S], eligible: impl Fn(&str) -> bool) -> AnchorSets {
    let n = labels.len();
    let anchors = (0..n)
        .filter(|&i| eligible(labels[i].as_ref()))
        .filter_map(|i| {
            let contrast: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let positives: Vec<usize> = contrast
                .iter()
                .copied()
                .filter(|&j| labels[j].as_ref() == labels[i].as_ref())
                .collect();
            (!positives.is_empty()).then_some(Anchor {
                index: i,
                positives,
                contrast,
            })
        })
        .collect();
    AnchorSets { anchors }
}

/// Anchors inside O: an O token is an anchor when at least one other O token
/// is more similar than `threshold` (strictly); those tokens are its
/// positives, and the contrast set adds every token of a new class.
///
/// `z` must be unit-normalized, so the dot product is the cosine.
pub fn select_o_anchors<S: AsRef<str>>(
    labels: &[S],
    z: &[Vec<f64>],
    threshold: f64,
    new_classes: &BTreeSet<String>,
) -> AnchorSets {
    let n = labels.len();
    debug_assert_eq!(n, z.len());
    let negatives: Vec<usize> = (0..n)
        .filter(|&j| new_classes.contains(labels[j].as_ref()))
        .collect();
    let anchors = (0..n)
        .filter(|&i| is_outside(labels[i].as_ref()))
        .filter_map(|i| {
            let positives: Vec<usize> = (0..n)
                .filter(|&j| {
                    j != i && is_outside(labels[j].as_ref()) && dot(&z[i], &z[j]) > threshold
                })
                .collect();
            if positives.is_empty() {
                return None;
            }
            let mut contrast = positives.clone();
            contrast.extend(negatives.iter().copied());
            contrast.sort_unstable();
            contrast.dedup();
            Some(Anchor {
                index: i,
                positives,
                contrast,
            })
        })
        .collect();
    AnchorSets { anchors }
}
