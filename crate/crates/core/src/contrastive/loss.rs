use std::collections::BTreeSet;

use serde::Serialize;

use super::anchors::{select_all_anchors, select_entity_anchors, select_o_anchors, AnchorSets};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};

/// Loss value with `∂L/∂z` for every token of the batch (zero rows for
/// tokens that take no part).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad_z: Vec<Vec<f64>>,
}

impl LossValue {
    pub fn zero(n: usize, dim: usize) -> Self {
        Self {
            loss: 0.0,
            grad_z: vec![vec![0.0; dim]; n],
        }
    }

    fn add(&mut self, other: &LossValue) {
        self.loss += other.loss;
        for (a, b) in self.grad_z.iter_mut().zip(&other.grad_z) {
            axpy(1.0, b, a);
        }
    }
}

/// Supervised contrastive loss summed over anchors:
///
/// `L = Σ_i −1/|P(i)| Σ_{p∈P(i)} log( exp(s_ip/τ) / Σ_{a∈A(i)} exp(s_ia/τ) )`
///
/// with `s` the cosine similarity of unit-normalized `z`.
pub fn sup_con_loss(z: &[Vec<f64>], sets: &AnchorSets, temperature: f64) -> Result<LossValue> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let dim = z.first().map_or(0, Vec::len);
    let mut out = LossValue::zero(z.len(), dim);
    if !sets.is_valid(z.len()) {
        return Err(Error::Contract("anchor sets violate P(i) ⊆ A(i), i ∉ A(i)".into()));
    }
    let inv_t = 1.0 / temperature;
    let mut weights = Vec::new();
    for anchor in &sets.anchors {
        let i = anchor.index;
        let zi = &z[i];
        let logits: Vec<f64> = anchor.contrast.iter().map(|&a| dot(zi, &z[a]) * inv_t).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_denominator = max + sum.ln();

        let np = anchor.positives.len() as f64;
        let mean_positive: f64 = anchor
            .positives
            .iter()
            .map(|&p| dot(zi, &z[p]) * inv_t)
            .sum::<f64>()
            / np;
        out.loss += log_denominator - mean_positive;

        // ∂/∂s_ia = q_a/τ over the contrast set, −1/(|P|τ) over positives.
        weights.clear();
        weights.extend(logits.iter().map(|l| (l - log_denominator).exp() * inv_t));
        let mut gi = vec![0.0; dim];
        for (&a, &w) in anchor.contrast.iter().zip(&weights) {
            axpy(w, &z[a], &mut gi);
            axpy(w, zi, &mut out.grad_z[a]);
        }
        let wp = -inv_t / np;
        for &p in &anchor.positives {
            axpy(wp, &z[p], &mut gi);
            axpy(wp, zi, &mut out.grad_z[p]);
        }
        axpy(1.0, &gi, &mut out.grad_z[i]);
    }
    Ok(out)
}

/// Which contrastive objective a training epoch optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Entity anchors only.
    Entity,
    /// Entity anchors plus threshold-selected O anchors.
    Joint { threshold: f64 },
    /// Plain supervised contrastive loss with O as a class.
    AllTokens,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AnchorCounts {
    pub entity: usize,
    pub outside: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub total: LossValue,
    /// Entity (or all-token) term.
    pub loss_scl: f64,
    /// O term; zero outside [`Objective::Joint`].
    pub loss_o: f64,
    pub counts: AnchorCounts,
}

/// Anchor sets of both terms, fixed so they can be reused under perturbed parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectiveSets {
    pub primary: AnchorSets,
    pub outside: AnchorSets,
}

pub fn objective_sets<S: AsRef<str>>(
    labels: &[S],
    z: &[Vec<f64>],
    objective: Objective,
    new_classes: &BTreeSet<String>,
) -> ObjectiveSets {
    match objective {
        Objective::Entity => ObjectiveSets {
            primary: select_entity_anchors(labels),
            outside: AnchorSets::default(),
        },
        Objective::Joint { threshold } => ObjectiveSets {
            primary: select_entity_anchors(labels),
            outside: select_o_anchors(labels, z, threshold, new_classes),
        },
        Objective::AllTokens => ObjectiveSets {
            primary: select_all_anchors(labels),
            outside: AnchorSets::default(),
        },
    }
}

pub fn objective_with_sets(
    z: &[Vec<f64>],
    sets: &ObjectiveSets,
    temperature: f64,
) -> Result<ObjectiveValue> {
    let primary = sup_con_loss(z, &sets.primary, temperature)?;
    let outside = sup_con_loss(z, &sets.outside, temperature)?;
    let mut total = primary.clone();
    total.add(&outside);
    Ok(ObjectiveValue {
        total,
        loss_scl: primary.loss,
        loss_o: outside.loss,
        counts: AnchorCounts {
            entity: sets.primary.len(),
            outside: sets.outside.len(),
        },
    })
}

/// `L_SCL,O + L_SCL` over one batch.
pub fn joint_loss<S: AsRef<str>>(
    labels: &[S],
    z: &[Vec<f64>],
    threshold: f64,
    temperature: f64,
    new_classes: &BTreeSet<String>,
) -> Result<ObjectiveValue> {
    if !threshold.is_finite() {
        return Err(Error::Config("entity threshold must be finite".into()));
    }
    let sets = objective_sets(labels, z, Objective::Joint { threshold }, new_classes);
    objective_with_sets(z, &sets, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = crate::linalg::norm(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn identical_vectors_closed_form() {
        let z = vec![unit(&[0.3, 0.4, 0.5]); 4];
        let labels = ["A"; 4];
        let sets = select_entity_anchors(&labels);
        let l = sup_con_loss(&z, &sets, 0.1).unwrap();
        assert!((l.loss - 4.0 * 3f64.ln()).abs() < 1e-12);
        assert!((l.loss - 4.3944).abs() < 1e-4);
    }

    #[test]
    fn empty_anchor_set_is_zero() {
        let z = vec![unit(&[1.0, 2.0]); 3];
        let l = sup_con_loss(&z, &AnchorSets::default(), 0.1).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(l.grad_z.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let z = vec![unit(&[1.0, 2.0]); 2];
        let sets = select_entity_anchors(&["A", "A"]);
        assert!(matches!(sup_con_loss(&z, &sets, 0.0), Err(Error::Config(_))));
        assert!(matches!(sup_con_loss(&z, &sets, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_matches_finite_differences_on_z() {
        let z = vec![
            unit(&[0.2, 0.9, -0.4]),
            unit(&[0.5, -0.1, 0.3]),
            unit(&[-0.7, 0.2, 0.6]),
            unit(&[0.1, 0.1, 0.9]),
        ];
        let labels = ["A", "A", "O", "B"];
        let sets = select_all_anchors(&labels);
        let base = sup_con_loss(&z, &sets, 0.3).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            for d in 0..3 {
                let mut plus = z.clone();
                plus[i][d] += h;
                let mut minus = z.clone();
                minus[i][d] -= h;
                let fd = (sup_con_loss(&plus, &sets, 0.3).unwrap().loss
                    - sup_con_loss(&minus, &sets, 0.3).unwrap().loss)
                    / (2.0 * h);
                assert!((fd - base.grad_z[i][d]).abs() < 1e-7, "{i} {d}");
            }
        }
    }

    #[test]
    fn joint_is_sum_of_terms() {
        let z = vec![
            unit(&[1.0, 0.1]),
            unit(&[0.9, 0.2]),
            unit(&[0.1, 1.0]),
            unit(&[0.2, 0.9]),
            unit(&[-1.0, 0.3]),
        ];
        let labels = ["O", "O", "PER", "PER", "LOC"];
        let new: BTreeSet<String> = ["PER".to_string()].into();
        let j = joint_loss(&labels, &z, 0.5, 0.1, &new).unwrap();
        let e = sup_con_loss(&z, &select_entity_anchors(&labels), 0.1).unwrap();
        let o = sup_con_loss(&z, &select_o_anchors(&labels, &z, 0.5, &new), 0.1).unwrap();
        assert!((j.total.loss - (e.loss + o.loss)).abs() < 1e-12);
        assert_eq!(j.counts.entity, 2);
        assert_eq!(j.counts.outside, 2);
    }

    #[test]
    fn batch_without_o_is_entity_loss_alone() {
        let z = vec![unit(&[1.0, 0.1]), unit(&[0.9, 0.2]), unit(&[0.1, 1.0])];
        let labels = ["PER", "PER", "LOC"];
        let new: BTreeSet<String> = ["PER".to_string(), "LOC".to_string()].into();
        let j = joint_loss(&labels, &z, 0.0, 0.1, &new).unwrap();
        let e = sup_con_loss(&z, &select_entity_anchors(&labels), 0.1).unwrap();
        assert_eq!(j.total.loss, e.loss);
        assert_eq!(j.loss_o, 0.0);
    }

    #[test]
    fn batch_without_entities_is_o_term_alone() {
        let z = vec![unit(&[1.0, 0.1]), unit(&[0.9, 0.2]), unit(&[0.1, 1.0])];
        let labels = ["O", "O", "O"];
        let j = joint_loss(&labels, &z, 0.5, 0.1, &BTreeSet::new()).unwrap();
        assert_eq!(j.loss_scl, 0.0);
        assert!(j.loss_o > 0.0 || j.counts.outside > 0);
        assert_eq!(j.total.loss, j.loss_o);
    }
}
