//! Class-indexed feature banks with step-scheduled direct replacement,
//! triplet sampling, the Combiner, recombination captions, and the
//! recombination contrastive loss.
//!
//! Stored features are detached values: they enter the loss graph as
//! constant leaves, so no gradient ever reaches a bank table.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::{Binder, Mlp2, Mlp2Vars, Params};
use crate::autodiff::{Scalar, Var};
use crate::encoders::fingerprint_array;
use crate::error::{Error, Result};
use crate::objective::info_nce;
use crate::synth::{capitalize, Triplet, Vocabularies};

/// One class-indexed table of stored branch vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BankTable<T> {
    pub features: Array2<T>,
    pub initialized: Vec<bool>,
}

impl<T: Scalar> BankTable<T> {
    fn new(classes: usize, d_b: usize) -> Self {
        BankTable {
            features: Array2::zeros((classes, d_b)),
            initialized: vec![false; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.initialized.len()
    }

    fn ready_classes(&self) -> Vec<usize> {
        self.initialized
            .iter()
            .enumerate()
            .filter_map(|(i, &ok)| ok.then_some(i))
            .collect()
    }
}

/// Three class-indexed tables plus the replacement schedule state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank<T> {
    pub subject: BankTable<T>,
    pub action: BankTable<T>,
    pub object: BankTable<T>,
    pub setting_step: usize,
    pub last_update_step: Option<usize>,
}

impl<T: Scalar> FeatureBank<T> {
    pub fn new(k_s: usize, k_a: usize, k_o: usize, d_b: usize, setting_step: usize) -> Result<Self> {
        if setting_step < 1 {
            return Err(Error::Parameter("setting_step must be >= 1".into()));
        }
        Ok(FeatureBank {
            subject: BankTable::new(k_s, d_b),
            action: BankTable::new(k_a, d_b),
            object: BankTable::new(k_o, d_b),
            setting_step,
            last_update_step: None,
        })
    }

    /// Direct replacement on schedule: when `step % setting_step == 0`, every
    /// class present in the batch gets the *last* in-batch instance's feature
    /// (detached); off-schedule steps leave the bank untouched. Returns
    /// whether a replacement happened.
    pub fn update(
        &mut self,
        subject_feats: &Array2<T>,
        action_feats: &Array2<T>,
        object_feats: &Array2<T>,
        labels: &[Triplet],
        step: usize,
    ) -> Result<bool> {
        for t in labels {
            for (kind, id, size) in [
                ("subject", t.subject, self.subject.classes()),
                ("action", t.action, self.action.classes()),
                ("object", t.object, self.object.classes()),
            ] {
                if id >= size {
                    return Err(Error::LabelOutOfRange {
                        kind: match kind {
                            "subject" => "subject",
                            "action" => "action",
                            _ => "object",
                        },
                        label: id,
                        size,
                    });
                }
            }
        }
        if step % self.setting_step != 0 {
            return Ok(false);
        }
        for (i, t) in labels.iter().enumerate() {
            self.subject.features.row_mut(t.subject).assign(&subject_feats.row(i));
            self.subject.initialized[t.subject] = true;
            self.action.features.row_mut(t.action).assign(&action_feats.row(i));
            self.action.initialized[t.action] = true;
            self.object.features.row_mut(t.object).assign(&object_feats.row(i));
            self.object.initialized[t.object] = true;
        }
        self.last_update_step = Some(step);
        Ok(true)
    }

    /// At least one initialized slot per table.
    pub fn ready(&self) -> bool {
        [&self.subject, &self.action, &self.object]
            .iter()
            .all(|t| t.initialized.iter().any(|&b| b))
    }

    /// Draw `m` triplets uniformly over the product of initialized slots,
    /// without replacement while possible, then with replacement.
    pub fn sample_triplets(&self, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Triplet>> {
        for (name, table) in [
            ("subject", &self.subject),
            ("action", &self.action),
            ("object", &self.object),
        ] {
            if table.ready_classes().is_empty() {
                return Err(Error::BankNotReady(format!(
                    "{name} table has no initialized slots"
                )));
            }
        }
        let subjects = self.subject.ready_classes();
        let actions = self.action.ready_classes();
        let objects = self.object.ready_classes();
        let mut product = Vec::with_capacity(subjects.len() * actions.len() * objects.len());
        for &s in &subjects {
            for &a in &actions {
                for &o in &objects {
                    product.push(Triplet::new(s, a, o));
                }
            }
        }
        product.shuffle(rng);
        let mut out = Vec::with_capacity(m);
        out.extend(product.iter().copied().take(m));
        while out.len() < m {
            out.push(product[rng.gen_range(0..product.len())]);
        }
        Ok(out)
    }

    /// Detached per-triplet slot vectors, concatenated `(s; a; o)` rows.
    pub fn gather(&self, triplets: &[Triplet]) -> Array2<T> {
        let d_b = self.subject.features.ncols();
        let mut out = Array2::zeros((triplets.len(), 3 * d_b));
        for (i, t) in triplets.iter().enumerate() {
            out.row_mut(i)
                .slice_mut(ndarray::s![0..d_b])
                .assign(&self.subject.features.row(t.subject));
            out.row_mut(i)
                .slice_mut(ndarray::s![d_b..2 * d_b])
                .assign(&self.action.features.row(t.action));
            out.row_mut(i)
                .slice_mut(ndarray::s![2 * d_b..3 * d_b])
                .assign(&self.object.features.row(t.object));
        }
        out
    }

    /// Hash of the stored tables; backward passes must never change it.
    pub fn fingerprint(&self) -> String {
        fingerprint_array(
            self.subject
                .features
                .iter()
                .chain(self.action.features.iter())
                .chain(self.object.features.iter()),
        )
    }
}

/// Recombination caption: `"<Subject> <action> the <object>, action is
/// <action>"`, bare verb form.
pub fn recomb_caption(t: Triplet, vocab: &Vocabularies) -> Result<String> {
    let (subject, action, object) = vocab.resolve(t)?;
    Ok(format!(
        "{} {action} the {object}, action is {action}",
        capitalize(subject)
    ))
}

/// Combiner: concatenated bank slots through a residual 2-layer MLP at
/// `3*d_b`, so the output stays comparable to the concatenated text branch
/// vector.
#[derive(Clone)]
pub struct Combiner<T> {
    pub mlp: Mlp2<T>,
}

impl<T: Scalar> Combiner<T> {
    pub fn new(d_b: usize, rng: &mut ChaCha8Rng) -> Self {
        Combiner {
            mlp: Mlp2::new(3 * d_b, 3 * d_b, 3 * d_b, rng),
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>, name: &str) -> CombinerVars<'t, T> {
        CombinerVars {
            mlp: self.mlp.bind(binder, name),
        }
    }
}

impl<T: Scalar> Params<T> for Combiner<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ndarray::ArrayD<T>, bool)) {
        self.mlp.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<T>, bool)) {
        self.mlp.visit_mut(prefix, f);
    }
}

pub struct CombinerVars<'t, T: Scalar> {
    mlp: Mlp2Vars<'t, T>,
}

impl<'t, T: Scalar> CombinerVars<'t, T> {
    /// `(M, 3*d_b) -> (M, 3*d_b)` with a residual connection.
    pub fn combine(&self, concat: Var<'t, T>) -> Var<'t, T> {
        self.mlp.forward(concat).add(concat)
    }

    /// Convenience for single triples.
    pub fn combine_parts(
        &self,
        s: Var<'t, T>,
        a: Var<'t, T>,
        o: Var<'t, T>,
    ) -> Var<'t, T> {
        self.combine(crate::autodiff::concat_last(&[s, a, o]))
    }
}

/// InfoNCE over the recombined set M: each recombined visual row is the
/// positive for its own caption encoding, every other row a negative.
pub fn recombination_loss<'t, T: Scalar>(
    visual: Var<'t, T>,
    text: Var<'t, T>,
    tau: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let m = visual.dims()[0];
    if m < 2 {
        return Err(Error::InsufficientNegatives(m));
    }
    if tau.scalar() <= T::zero() {
        return Err(Error::Parameter("temperature must be positive".into()));
    }
    info_nce(visual, text, tau, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::arr2;
    use rand::SeedableRng;

    fn feats(rows: &[[f64; 2]]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), 2));
        for (i, r) in rows.iter().enumerate() {
            out[[i, 0]] = r[0];
            out[[i, 1]] = r[1];
        }
        out
    }

    #[test]
    fn replacement_happens_only_on_schedule() {
        let mut bank = FeatureBank::<f64>::new(3, 6, 8, 2, 50).unwrap();
        let s = feats(&[[1.0, 2.0]]);
        let a = feats(&[[3.0, 4.0]]);
        let o = feats(&[[5.0, 6.0]]);
        let labels = [Triplet::new(0, 3, 5)];

        let updated = bank.update(&s, &a, &o, &labels, 50).unwrap();
        assert!(updated);
        assert_eq!(bank.action.features.row(3).to_vec(), vec![3.0, 4.0]);
        assert!(bank.action.initialized[3]);
        assert_eq!(bank.last_update_step, Some(50));

        let before = bank.fingerprint();
        let updated = bank
            .update(&feats(&[[9.0, 9.0]]), &feats(&[[9.0, 9.0]]), &feats(&[[9.0, 9.0]]), &labels, 51)
            .unwrap();
        assert!(!updated);
        assert_eq!(bank.fingerprint(), before, "off-schedule step mutated bank");
    }

    #[test]
    fn step_zero_counts_as_an_update() {
        let mut bank = FeatureBank::<f64>::new(1, 1, 1, 2, 50).unwrap();
        let updated = bank
            .update(
                &feats(&[[1.0, 0.0]]),
                &feats(&[[0.0, 1.0]]),
                &feats(&[[1.0, 1.0]]),
                &[Triplet::new(0, 0, 0)],
                0,
            )
            .unwrap();
        assert!(updated);
        assert!(bank.ready());
    }

    #[test]
    fn last_instance_wins_on_duplicate_classes() {
        let mut bank = FeatureBank::<f64>::new(3, 6, 8, 2, 1).unwrap();
        let s = feats(&[[1.0, 1.0], [2.0, 2.0]]);
        let a = feats(&[[3.0, 3.0], [4.0, 4.0]]);
        let o = feats(&[[5.0, 5.0], [6.0, 6.0]]);
        let labels = [Triplet::new(0, 0, 5), Triplet::new(0, 0, 5)];
        bank.update(&s, &a, &o, &labels, 3).unwrap();
        assert_eq!(bank.object.features.row(5).to_vec(), vec![6.0, 6.0]);
        assert_eq!(bank.subject.features.row(0).to_vec(), vec![2.0, 2.0]);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut bank = FeatureBank::<f64>::new(3, 6, 8, 2, 1).unwrap();
        let err = bank
            .update(
                &feats(&[[1.0, 1.0]]),
                &feats(&[[1.0, 1.0]]),
                &feats(&[[1.0, 1.0]]),
                &[Triplet::new(0, 7, 0)],
                0,
            )
            .unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { kind: "action", .. }));
    }

    #[test]
    fn sampling_requires_every_table_ready() {
        let mut bank = FeatureBank::<f64>::new(2, 2, 2, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            bank.sample_triplets(4, &mut rng),
            Err(Error::BankNotReady(_))
        ));
        bank.update(
            &feats(&[[1.0, 0.0]]),
            &feats(&[[0.0, 1.0]]),
            &feats(&[[1.0, 1.0]]),
            &[Triplet::new(1, 0, 1)],
            0,
        )
        .unwrap();
        // only one initialized slot per table: the single possible triplet
        let m = bank.sample_triplets(5, &mut rng).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m.iter().all(|t| *t == Triplet::new(1, 0, 1)));
        assert!(bank.sample_triplets(0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn exhaustive_draw_covers_every_triplet_once() {
        let mut bank = FeatureBank::<f64>::new(2, 2, 2, 2, 1).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                for o in 0..2 {
                    bank.update(
                        &feats(&[[s as f64, 1.0]]),
                        &feats(&[[a as f64, 1.0]]),
                        &feats(&[[o as f64, 1.0]]),
                        &[Triplet::new(s, a, o)],
                        0,
                    )
                    .unwrap();
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = bank.sample_triplets(8, &mut rng).unwrap();
        let unique: std::collections::BTreeSet<_> = m.iter().collect();
        assert_eq!(unique.len(), 8, "each triplet exactly once");
        // determinism
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(m, bank.sample_triplets(8, &mut rng2).unwrap());
    }

    #[test]
    fn recomb_caption_matches_template_and_round_trips() {
        let vocab = Vocabularies::default();
        assert_eq!(
            recomb_caption(Triplet::new(0, 0, 0), &vocab).unwrap(),
            "Robot open the drawer, action is open"
        );
        assert_eq!(
            recomb_caption(Triplet::new(1, 2, 2), &vocab).unwrap(),
            "Human push the plate, action is push"
        );
    }

    #[test]
    fn combiner_of_zeros_with_zero_init_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut combiner = Combiner::<f64>::new(4, &mut rng);
        combiner.mlp.l1.w.fill(0.0);
        combiner.mlp.l2.w.fill(0.0);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let vars = combiner.bind(&mut binder, "combiner");
        let z = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 12])));
        let out = vars.combine(z);
        assert_eq!(out.dims(), vec![2, 12]);
        assert!(out.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recombination_loss_matches_closed_forms() {
        let tape = Tape::new();
        let tau = tape.leaf(ndarray::arr1(&[1.0]).into_dyn());
        // orthogonal rows: sim(a,a)=1, sim(a,b)=0 -> -log(e/(e+1))
        let v = tape.leaf(arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        let loss = recombination_loss(v, v, tau).unwrap().scalar();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");

        // all rows identical -> ln M
        let u = tape.leaf(arr2(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).into_dyn());
        let loss = recombination_loss(u, u, tau).unwrap().scalar();
        assert!((loss - 3.0f64.ln()).abs() < 1e-9);

        // cosine makes the loss scale-invariant in the visual side
        let v2 = tape.leaf(arr2(&[[2.5, 0.0], [0.0, 2.5]]).into_dyn());
        let w = tape.leaf(arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        let a = recombination_loss(v2, w, tau).unwrap().scalar();
        let b = recombination_loss(w, w, tau).unwrap().scalar();
        assert!((a - b).abs() < 1e-12);

        // |M| < 2 is rejected
        let single = tape.leaf(arr2(&[[1.0, 0.0]]).into_dyn());
        assert!(matches!(
            recombination_loss(single, single, tau),
            Err(Error::InsufficientNegatives(1))
        ));
    }
}
