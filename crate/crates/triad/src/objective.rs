//! Loss composition: cross-modal InfoNCE, auxiliary classification, the
//! enhanced disentanglement combination, and the total objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_matrix, Scalar, Var};
use crate::error::{Error, Result};
use crate::synth::Triplet;

/// Temperature clamp bounds applied after every optimizer update.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Loss weighting; `tau` is the *initial* value of the trainable temperature
/// shared by the cross-modal and recombination losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_disent: f64,
    pub lambda_aux: f64,
    pub lambda_ortho: f64,
    pub lambda_recomb: f64,
    pub alpha_subject: f64,
    pub alpha_action: f64,
    pub alpha_object: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_disent: 0.5,
            lambda_aux: 0.5,
            lambda_ortho: 1.0,
            lambda_recomb: 0.5,
            alpha_subject: 1.0,
            alpha_action: 1.0,
            alpha_object: 1.0,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("loss.lambda_disent", self.lambda_disent),
            ("loss.lambda_aux", self.lambda_aux),
            ("loss.lambda_ortho", self.lambda_ortho),
            ("loss.lambda_recomb", self.lambda_recomb),
            ("loss.alpha_subject", self.alpha_subject),
            ("loss.alpha_action", self.alpha_action),
            ("loss.alpha_object", self.alpha_object),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{k}: must be nonnegative")));
            }
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Config("loss.tau: must be positive".into()));
        }
        Ok(())
    }
}

/// Per-term loss values logged every step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub clip: f64,
    pub sim: f64,
    pub l2: f64,
    pub recomb: f64,
    pub aux_subject: f64,
    pub aux_action: f64,
    pub aux_object: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombine the parts under `w`; `total` must match this within 1e-6.
    pub fn combined(&self, w: &LossWeights) -> f64 {
        let aux = w.alpha_subject * self.aux_subject
            + w.alpha_action * self.aux_action
            + w.alpha_object * self.aux_object;
        let disent_enhanced =
            w.lambda_ortho * (self.sim + self.l2) + w.lambda_recomb * self.recomb;
        self.clip + w.lambda_disent * disent_enhanced + w.lambda_aux * aux
    }

    pub fn check_consistent(&self, w: &LossWeights) -> Result<()> {
        let expect = self.combined(w);
        if (expect - self.total).abs() > 1e-6 {
            return Err(Error::Parameter(format!(
                "loss breakdown total {} does not recombine to {}",
                self.total, expect
            )));
        }
        Ok(())
    }
}

/// InfoNCE over row-aligned pairs: `-mean_i log softmax_j(sim(a_i, b_j)/tau)[i]`,
/// cosine similarity, video-to-text direction; `symmetric` averages in the
/// reverse direction as well.
pub fn info_nce<'t, T: Scalar>(
    a: Var<'t, T>,
    b: Var<'t, T>,
    tau: Var<'t, T>,
    symmetric: bool,
) -> Result<Var<'t, T>> {
    if tau.scalar() <= T::zero() {
        return Err(Error::Parameter("temperature must be positive".into()));
    }
    let logits = cosine_matrix(a, b).mul(tau.recip());
    let fwd = logits.log_softmax_last().diag2().mean_all().neg();
    if symmetric {
        let bwd = logits.t2().log_softmax_last().diag2().mean_all().neg();
        Ok(fwd.add(bwd).scale(T::of_f64(0.5)))
    } else {
        Ok(fwd)
    }
}

/// Cross-modal contrastive loss over per-sample `(subject; object; action)`
/// concatenations. One-directional by default.
pub fn clip_loss<'t, T: Scalar>(
    video: Var<'t, T>,
    text: Var<'t, T>,
    tau: Var<'t, T>,
    symmetric: bool,
) -> Result<Var<'t, T>> {
    let n = video.dims()[0];
    if n < 1 {
        return Err(Error::Parameter("empty batch".into()));
    }
    info_nce(video, text, tau, symmetric)
}

/// Mean cross-entropies of the three heads, alpha-weighted sum plus the
/// per-head means for logging.
pub fn aux_loss<'t, T: Scalar>(
    subject_logits: Var<'t, T>,
    action_logits: Var<'t, T>,
    object_logits: Var<'t, T>,
    labels: &[Triplet],
    weights: &LossWeights,
) -> Result<(Var<'t, T>, [Var<'t, T>; 3])> {
    let check = |logits: &Var<'t, T>, pick: fn(&Triplet) -> usize, kind: &'static str| {
        let k = logits.dims()[1];
        for t in labels {
            if pick(t) >= k {
                return Err(Error::LabelOutOfRange {
                    kind,
                    label: pick(t),
                    size: k,
                });
            }
        }
        Ok(())
    };
    check(&subject_logits, |t| t.subject, "subject")?;
    check(&action_logits, |t| t.action, "action")?;
    check(&object_logits, |t| t.object, "object")?;

    let ce = |logits: Var<'t, T>, cols: Vec<usize>| {
        logits
            .log_softmax_last()
            .gather_rows(&cols)
            .mean_all()
            .neg()
    };
    let ce_s = ce(subject_logits, labels.iter().map(|t| t.subject).collect());
    let ce_a = ce(action_logits, labels.iter().map(|t| t.action).collect());
    let ce_o = ce(object_logits, labels.iter().map(|t| t.object).collect());
    let total = ce_s
        .scale(T::of_f64(weights.alpha_subject))
        .add(ce_a.scale(T::of_f64(weights.alpha_action)))
        .add(ce_o.scale(T::of_f64(weights.alpha_object)));
    Ok((total, [ce_s, ce_a, ce_o]))
}

/// `lambda_ortho * (sim + l2) + lambda_recomb * recomb`.
pub fn disent_enhanced<'t, T: Scalar>(
    sim: Var<'t, T>,
    l2: Var<'t, T>,
    recomb: Var<'t, T>,
    lambda_ortho: f64,
    lambda_recomb: f64,
) -> Var<'t, T> {
    sim.add(l2)
        .scale(T::of_f64(lambda_ortho))
        .add(recomb.scale(T::of_f64(lambda_recomb)))
}

/// `clip + lambda_disent * disent_enhanced + lambda_aux * aux`.
pub fn total_loss<'t, T: Scalar>(
    clip: Var<'t, T>,
    disent: Var<'t, T>,
    aux: Var<'t, T>,
    weights: &LossWeights,
) -> Var<'t, T> {
    clip.add(disent.scale(T::of_f64(weights.lambda_disent)))
        .add(aux.scale(T::of_f64(weights.lambda_aux)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::{arr1, arr2};

    fn tau(tape: &Tape<f64>, v: f64) -> Var<'_, f64> {
        tape.leaf(arr1(&[v]).into_dyn())
    }

    #[test]
    fn single_positive_without_negatives_is_zero() {
        let tape = Tape::new();
        let v = tape.leaf(arr2(&[[0.3, 0.4]]).into_dyn());
        let loss = clip_loss(v, v, tau(&tape, 0.07), false).unwrap();
        assert_eq!(loss.scalar(), 0.0);
    }

    #[test]
    fn identity_similarity_at_unit_temperature() {
        let tape = Tape::new();
        let v = tape.leaf(arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        let loss = clip_loss(v, v, tau(&tape, 1.0), false).unwrap().scalar();
        let expect = (1.0 + std::f64::consts::E).ln() - 1.0;
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn identical_pairs_give_ln_n() {
        let tape = Tape::new();
        let v = tape.leaf(arr2(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).into_dyn());
        let loss = clip_loss(v, v, tau(&tape, 0.5), false).unwrap().scalar();
        assert!((loss - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn symmetric_mode_averages_both_directions() {
        let tape = Tape::new();
        let a = tape.leaf(arr2(&[[1.0, 0.0], [0.4, 0.6]]).into_dyn());
        let b = tape.leaf(arr2(&[[0.9, 0.1], [0.2, 0.8]]).into_dyn());
        let t1 = tau(&tape, 0.3);
        let asym = clip_loss(a, b, t1, false).unwrap().scalar();
        let sym = clip_loss(a, b, t1, true).unwrap().scalar();
        let rev = clip_loss(b, a, t1, false).unwrap().scalar();
        assert!((sym - 0.5 * (asym + rev)).abs() < 1e-9);
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        let tape = Tape::new();
        let v = tape.leaf(arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        assert!(matches!(
            clip_loss(v, v, tau(&tape, 0.0), false),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn uniform_predictions_sum_class_log_counts() {
        let tape = Tape::<f64>::new();
        let n = 4;
        let zeros = |k: usize| tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[n, k])));
        let labels: Vec<Triplet> = (0..n).map(|i| Triplet::new(i % 3, i % 6, i % 8)).collect();
        let w = LossWeights::default();
        let (total, parts) = aux_loss(zeros(3), zeros(6), zeros(8), &labels, &w).unwrap();
        assert!((parts[0].scalar() - 3.0f64.ln()).abs() < 1e-9);
        assert!((parts[1].scalar() - 6.0f64.ln()).abs() < 1e-9);
        assert!((parts[2].scalar() - 8.0f64.ln()).abs() < 1e-9);
        let expect = 3.0f64.ln() + 6.0f64.ln() + 8.0f64.ln();
        assert!((total.scalar() - expect).abs() < 1e-9);
    }

    #[test]
    fn zero_alpha_removes_a_term() {
        let tape = Tape::<f64>::new();
        let labels = vec![Triplet::new(0, 0, 0), Triplet::new(1, 1, 1)];
        let logits = |k: usize| {
            tape.leaf(ndarray::ArrayD::from_shape_fn(
                ndarray::IxDyn(&[2, k]),
                |ix| (ix[0] * k + ix[1]) as f64 * 0.1,
            ))
        };
        let w = LossWeights {
            alpha_action: 0.0,
            ..LossWeights::default()
        };
        let (with_zero, parts) = aux_loss(logits(3), logits(6), logits(8), &labels, &w).unwrap();
        let expect = parts[0].scalar() * w.alpha_subject + parts[2].scalar() * w.alpha_object;
        assert!((with_zero.scalar() - expect).abs() < 1e-9);
    }

    #[test]
    fn near_perfect_predictions_give_near_zero_loss() {
        let tape = Tape::<f64>::new();
        let labels = vec![Triplet::new(0, 1, 2)];
        // logits massively favoring the true class approximate a one-hot
        let mk = |k: usize, hot: usize| {
            tape.leaf(ndarray::ArrayD::from_shape_fn(
                ndarray::IxDyn(&[1, k]),
                |ix| if ix[1] == hot { 50.0 } else { 0.0 },
            ))
        };
        let (total, _) = aux_loss(
            mk(3, 0),
            mk(6, 1),
            mk(8, 2),
            &labels,
            &LossWeights::default(),
        )
        .unwrap();
        assert!(total.scalar() < 1e-9);
    }

    #[test]
    fn enhanced_combination_matches_hand_arithmetic() {
        let tape = Tape::new();
        let s = tape.leaf(arr1(&[1.0 / 3.0]).into_dyn());
        let l = tape.leaf(arr1(&[0.03]).into_dyn());
        let r = tape.leaf(arr1(&[2.0f64.ln()]).into_dyn());
        let d = disent_enhanced(s, l, r, 1.0, 0.5).scalar();
        assert!((d - 0.7099).abs() < 5e-5, "{d}");
        // zero weights zero it out
        let z = disent_enhanced(s, l, r, 0.0, 0.0).scalar();
        assert_eq!(z, 0.0);
        // linear in lambda_ortho
        let d2 = disent_enhanced(s, l, r, 2.0, 0.5).scalar();
        assert!((d2 - (d + (1.0 / 3.0 + 0.03))).abs() < 1e-9);
    }

    #[test]
    fn total_combination_and_breakdown_agree() {
        let w = LossWeights::default();
        let breakdown = LossBreakdown {
            clip: 0.3133,
            sim: 1.0 / 3.0,
            l2: 0.03,
            recomb: 2.0f64.ln(),
            aux_subject: 3.0f64.ln(),
            aux_action: 6.0f64.ln(),
            aux_object: 8.0f64.ln(),
            total: 0.0,
        };
        let tape = Tape::new();
        let leaf = |v: f64| tape.leaf(arr1(&[v]).into_dyn());
        let disent = disent_enhanced(
            leaf(breakdown.sim),
            leaf(breakdown.l2),
            leaf(breakdown.recomb),
            w.lambda_ortho,
            w.lambda_recomb,
        );
        let aux = leaf(
            w.alpha_subject * breakdown.aux_subject
                + w.alpha_action * breakdown.aux_action
                + w.alpha_object * breakdown.aux_object,
        );
        let total = total_loss(leaf(breakdown.clip), disent, aux, &w).scalar();
        let mut b = breakdown;
        b.total = total;
        b.check_consistent(&w).unwrap();
        // with all lambdas zero the total is the clip term alone
        let zero = LossWeights {
            lambda_disent: 0.0,
            lambda_aux: 0.0,
            ..w
        };
        let t0 = total_loss(leaf(0.3133), leaf(123.0), leaf(55.0), &zero).scalar();
        assert!((t0 - 0.3133).abs() < 1e-12);
    }
}
