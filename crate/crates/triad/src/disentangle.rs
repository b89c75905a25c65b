//! Feature disentanglement: self-attention over the fused visual feature,
//! projection into subject/action/object branches, the orthogonality and L2
//! constraints, and the auxiliary classification heads.

use ndarray::{Array2, ArrayD};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::{Binder, Linear, LinearVars, Mha, MhaVars, Mlp2, Mlp2Vars, Params};
use crate::autodiff::{Scalar, Tape, Var};
use crate::config::{AttentionMode, OrthogonalityMode};
use crate::error::{Error, Result};

/// Coefficient of the L2 magnitude penalty (part of the loss definition,
/// not a tunable weight).
pub const L2_COEFF: f64 = 0.01;

/// Branch feature triple for one batch: three `(N, d_b)` matrices.
pub struct BranchFeatures<'t, T: Scalar> {
    pub subject: Var<'t, T>,
    pub action: Var<'t, T>,
    pub object: Var<'t, T>,
}

/// Post-fusion self-attention. In the default mode the fused vector is
/// treated as a length-1 sequence, so the softmax over the single key is
/// exactly 1 and the block degenerates to a learned residual map; the token
/// mode attends over the four pre-fusion summaries and mean-pools, for
/// ablations.
#[derive(Clone)]
pub struct AttentionBlock<T> {
    mha: Mha<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new(d_v: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionBlock {
            mha: Mha::new(d_v, heads, rng),
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>, name: &str) -> AttentionBlockVars<'t, T> {
        AttentionBlockVars {
            mha: self.mha.bind(binder, name),
        }
    }
}

impl<T: Scalar> Params<T> for AttentionBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>, bool)) {
        self.mha.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>, bool)) {
        self.mha.visit_mut(prefix, f);
    }
}

pub struct AttentionBlockVars<'t, T: Scalar> {
    mha: MhaVars<'t, T>,
}

impl<'t, T: Scalar> AttentionBlockVars<'t, T> {
    /// Length-1 self-attention with residual: `(N, d_v) -> (N, d_v)`.
    pub fn attend(&self, f_v: Var<'t, T>) -> Var<'t, T> {
        let dims = f_v.dims();
        let (n, d) = (dims[0], dims[1]);
        let seq = f_v.reshape(&[n, 1, d]);
        let out = self.mha.forward(seq, None).reshape(&[n, d]);
        out.add(f_v)
    }

    /// Ablation mode: attend over the four pre-fusion tokens, residual, then
    /// mean-pool. Each token matrix is `(N, d)`.
    pub fn attend_tokens(
        &self,
        tokens: [Var<'t, T>; 4],
    ) -> Var<'t, T> {
        let dims = tokens[0].dims();
        let (n, d) = (dims[0], dims[1]);
        let stacked = crate::autodiff::concat_last(&[
            tokens[0], tokens[1], tokens[2], tokens[3],
        ])
        .reshape(&[n, 4, d]);
        let out = self.mha.forward(stacked, None).add(stacked);
        out.sum_axis(1, false).scale(T::of_f64(0.25))
    }
}

/// Which input the attention block consumes, resolved by the mode flag.
pub fn attention_input_note(mode: AttentionMode) -> &'static str {
    match mode {
        AttentionMode::Fused => "fused vector as a length-1 sequence",
        AttentionMode::Token => "four pre-fusion tokens, mean-pooled",
    }
}

/// Three independent branch projection MLPs `(d_v -> d_v -> d_b)`.
#[derive(Clone)]
pub struct BranchProjector<T> {
    pub subject: Mlp2<T>,
    pub action: Mlp2<T>,
    pub object: Mlp2<T>,
}

impl<T: Scalar> BranchProjector<T> {
    pub fn new(d_v: usize, d_b: usize, rng: &mut ChaCha8Rng) -> Self {
        BranchProjector {
            subject: Mlp2::new(d_v, d_v, d_b, rng),
            action: Mlp2::new(d_v, d_v, d_b, rng),
            object: Mlp2::new(d_v, d_v, d_b, rng),
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>, name: &str) -> BranchProjectorVars<'t, T> {
        BranchProjectorVars {
            subject: self.subject.bind(binder, &format!("{name}.subject")),
            action: self.action.bind(binder, &format!("{name}.action")),
            object: self.object.bind(binder, &format!("{name}.object")),
        }
    }
}

impl<T: Scalar> Params<T> for BranchProjector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>, bool)) {
        self.subject.visit(&format!("{prefix}.subject"), f);
        self.action.visit(&format!("{prefix}.action"), f);
        self.object.visit(&format!("{prefix}.object"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>, bool)) {
        self.subject.visit_mut(&format!("{prefix}.subject"), f);
        self.action.visit_mut(&format!("{prefix}.action"), f);
        self.object.visit_mut(&format!("{prefix}.object"), f);
    }
}

pub struct BranchProjectorVars<'t, T: Scalar> {
    pub subject: Mlp2Vars<'t, T>,
    pub action: Mlp2Vars<'t, T>,
    pub object: Mlp2Vars<'t, T>,
}

impl<'t, T: Scalar> BranchProjectorVars<'t, T> {
    pub fn project(&self, f_attn: Var<'t, T>) -> BranchFeatures<'t, T> {
        BranchFeatures {
            subject: self.subject.forward(f_attn),
            action: self.action.forward(f_attn),
            object: self.object.forward(f_attn),
        }
    }
}

/// Row-wise cosine similarity between two `(N, d)` matrices -> `(N,)`.
fn rowwise_cosine<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    let dot = a.mul(b).sum_axis(1, false);
    let na = a.square().sum_axis(1, false).sqrt();
    let nb = b.square().sum_axis(1, false).sqrt();
    dot.mul(na.mul(nb).recip())
}

fn check_nonzero_rows<T: Scalar>(m: &ArrayD<T>, branch: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        if row.iter().all(|v| *v == T::zero()) {
            return Err(Error::DegenerateFeature(format!(
                "{branch} branch row {i} has zero norm (collapsed representation)"
            )));
        }
    }
    Ok(())
}

/// Pairwise-cosine orthogonality constraint over a batch of branch triples.
///
/// Squared mode: `mean_i (cos^2(s,a) + cos^2(s,o) + cos^2(a,o)) / 3`,
/// nonnegative and minimized at mutual orthogonality. The signed
/// paper-literal mode negates the mean of raw cosines instead.
pub fn orthogonality_loss<'t, T: Scalar>(
    branches: &BranchFeatures<'t, T>,
    mode: OrthogonalityMode,
) -> Result<Var<'t, T>> {
    check_nonzero_rows(&branches.subject.value_ref(), "subject")?;
    check_nonzero_rows(&branches.action.value_ref(), "action")?;
    check_nonzero_rows(&branches.object.value_ref(), "object")?;

    let sa = rowwise_cosine(branches.subject, branches.action);
    let so = rowwise_cosine(branches.subject, branches.object);
    let ao = rowwise_cosine(branches.action, branches.object);
    let third = T::of_f64(1.0 / 3.0);
    let loss = match mode {
        OrthogonalityMode::Squared => sa
            .square()
            .add(so.square())
            .add(ao.square())
            .scale(third)
            .mean_all(),
        OrthogonalityMode::PaperLiteral => sa
            .add(so)
            .add(ao)
            .scale(third)
            .mean_all()
            .neg(),
    };
    Ok(loss)
}

/// Magnitude penalty: `0.01 * mean_i (||s_i|| + ||a_i|| + ||o_i||)`.
pub fn l2_penalty<'t, T: Scalar>(branches: &BranchFeatures<'t, T>) -> Var<'t, T> {
    let norms = |m: Var<'t, T>| m.square().sum_axis(1, false).sqrt();
    norms(branches.subject)
        .add(norms(branches.action))
        .add(norms(branches.object))
        .mean_all()
        .scale(T::of_f64(L2_COEFF))
}

/// Auxiliary classification heads: independent linear+softmax over the
/// attention-enhanced feature (not the branch features).
#[derive(Clone)]
pub struct ClassifierHeads<T> {
    pub subject: Linear<T>,
    pub action: Linear<T>,
    pub object: Linear<T>,
}

impl<T: Scalar> ClassifierHeads<T> {
    pub fn new(d_v: usize, k_s: usize, k_a: usize, k_o: usize, rng: &mut ChaCha8Rng) -> Self {
        ClassifierHeads {
            subject: Linear::new(d_v, k_s, rng),
            action: Linear::new(d_v, k_a, rng),
            object: Linear::new(d_v, k_o, rng),
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>, name: &str) -> ClassifierHeadVars<'t, T> {
        ClassifierHeadVars {
            subject: self.subject.bind(binder, &format!("{name}.subject")),
            action: self.action.bind(binder, &format!("{name}.action")),
            object: self.object.bind(binder, &format!("{name}.object")),
        }
    }
}

impl<T: Scalar> Params<T> for ClassifierHeads<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>, bool)) {
        self.subject.visit(&format!("{prefix}.subject"), f);
        self.action.visit(&format!("{prefix}.action"), f);
        self.object.visit(&format!("{prefix}.object"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>, bool)) {
        self.subject.visit_mut(&format!("{prefix}.subject"), f);
        self.action.visit_mut(&format!("{prefix}.action"), f);
        self.object.visit_mut(&format!("{prefix}.object"), f);
    }
}

pub struct ClassifierHeadVars<'t, T: Scalar> {
    pub subject: LinearVars<'t, T>,
    pub action: LinearVars<'t, T>,
    pub object: LinearVars<'t, T>,
}

impl<'t, T: Scalar> ClassifierHeadVars<'t, T> {
    /// Raw logits per head; losses use log-softmax internally.
    pub fn logits(&self, f_attn: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>, Var<'t, T>) {
        (
            self.subject.forward(f_attn),
            self.action.forward(f_attn),
            self.object.forward(f_attn),
        )
    }
}

/// Per-sample class distributions, one simplex row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities<T> {
    pub subject: Array2<T>,
    pub action: Array2<T>,
    pub object: Array2<T>,
}

/// Value-level head evaluation producing normalized probabilities.
pub fn classify_heads<T: Scalar>(
    heads: &ClassifierHeads<T>,
    f_attn: &Array2<T>,
) -> ClassProbabilities<T> {
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let vars = heads.bind(&mut binder, "heads");
    let x = tape.leaf(f_attn.clone().into_dyn());
    let (s, a, o) = vars.logits(x);
    let to2 = |v: Var<'_, T>| {
        v.softmax_last()
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    };
    ClassProbabilities {
        subject: to2(s),
        action: to2(a),
        object: to2(o),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::nn::randn;
    use ndarray::arr2;
    use rand::SeedableRng;

    fn branches<'t>(
        tape: &'t Tape<f64>,
        s: Array2<f64>,
        a: Array2<f64>,
        o: Array2<f64>,
    ) -> BranchFeatures<'t, f64> {
        BranchFeatures {
            subject: tape.leaf(s.into_dyn()),
            action: tape.leaf(a.into_dyn()),
            object: tape.leaf(o.into_dyn()),
        }
    }

    #[test]
    fn orthogonal_branches_give_zero_loss() {
        let tape = Tape::new();
        let b = branches(
            &tape,
            arr2(&[[1.0, 0.0, 0.0]]),
            arr2(&[[0.0, 2.0, 0.0]]),
            arr2(&[[0.0, 0.0, 0.5]]),
        );
        let loss = orthogonality_loss(&b, OrthogonalityMode::Squared).unwrap();
        assert!(loss.scalar().abs() < 1e-12);
    }

    #[test]
    fn identical_unit_vectors_give_loss_one() {
        let tape = Tape::new();
        let v = arr2(&[[1.0, 0.0]]);
        let b = branches(&tape, v.clone(), v.clone(), v);
        let loss = orthogonality_loss(&b, OrthogonalityMode::Squared).unwrap();
        assert!((loss.scalar() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_cosines_give_one_third() {
        let tape = Tape::new();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let b = branches(
            &tape,
            arr2(&[[1.0, 0.0]]),
            arr2(&[[r, r]]),
            arr2(&[[0.0, 1.0]]),
        );
        let loss = orthogonality_loss(&b, OrthogonalityMode::Squared).unwrap();
        assert!((loss.scalar() - 1.0 / 3.0).abs() < 1e-9, "{}", loss.scalar());
    }

    #[test]
    fn paper_literal_mode_is_signed_and_negated() {
        let tape = Tape::new();
        let v = arr2(&[[1.0, 0.0]]);
        let b = branches(&tape, v.clone(), v.clone(), v);
        let loss = orthogonality_loss(&b, OrthogonalityMode::PaperLiteral).unwrap();
        assert!((loss.scalar() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_is_scale_invariant_per_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let s: Array2<f64> = randn::<f64>(&[4, 8], 1.0, &mut rng).into_dimensionality().unwrap();
        let a: Array2<f64> = randn::<f64>(&[4, 8], 1.0, &mut rng).into_dimensionality().unwrap();
        let o: Array2<f64> = randn::<f64>(&[4, 8], 1.0, &mut rng).into_dimensionality().unwrap();
        let base = orthogonality_loss(
            &branches(&tape, s.clone(), a.clone(), o.clone()),
            OrthogonalityMode::Squared,
        )
        .unwrap()
        .scalar();
        let scaled = orthogonality_loss(
            &branches(&tape, s.mapv(|v| v * 7.5), a, o),
            OrthogonalityMode::Squared,
        )
        .unwrap()
        .scalar();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_branch_is_degenerate() {
        let tape = Tape::new();
        let b = branches(
            &tape,
            arr2(&[[0.0, 0.0]]),
            arr2(&[[1.0, 0.0]]),
            arr2(&[[0.0, 1.0]]),
        );
        assert!(matches!(
            orthogonality_loss(&b, OrthogonalityMode::Squared),
            Err(Error::DegenerateFeature(_))
        ));
    }

    #[test]
    fn l2_penalty_matches_hand_values() {
        let tape = Tape::new();
        // three unit vectors -> 0.03
        let b = branches(
            &tape,
            arr2(&[[1.0, 0.0]]),
            arr2(&[[0.0, 1.0]]),
            arr2(&[[1.0, 0.0]]),
        );
        assert!((l2_penalty(&b).scalar() - 0.03).abs() < 1e-12);
        // one branch (3,4), others zero -> 0.01 * 5 = 0.05
        let b = branches(
            &tape,
            arr2(&[[3.0, 4.0]]),
            arr2(&[[0.0, 0.0]]),
            arr2(&[[0.0, 0.0]]),
        );
        assert!((l2_penalty(&b).scalar() - 0.05).abs() < 1e-12);
        // all zero -> 0
        let b = branches(
            &tape,
            arr2(&[[0.0, 0.0]]),
            arr2(&[[0.0, 0.0]]),
            arr2(&[[0.0, 0.0]]),
        );
        assert_eq!(l2_penalty(&b).scalar(), 0.0);
    }

    #[test]
    fn l2_penalty_is_positively_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let s: Array2<f64> = randn::<f64>(&[3, 4], 1.0, &mut rng).into_dimensionality().unwrap();
        let a: Array2<f64> = randn::<f64>(&[3, 4], 1.0, &mut rng).into_dimensionality().unwrap();
        let o: Array2<f64> = randn::<f64>(&[3, 4], 1.0, &mut rng).into_dimensionality().unwrap();
        let base = l2_penalty(&branches(&tape, s.clone(), a.clone(), o.clone())).scalar();
        let alpha = 3.25;
        let scaled = l2_penalty(&branches(
            &tape,
            s.mapv(|v| v * alpha),
            a.mapv(|v| v * alpha),
            o.mapv(|v| v * alpha),
        ))
        .scalar();
        assert!((scaled - alpha * base).abs() < 1e-9);
    }

    #[test]
    fn attend_is_linear_with_zero_biases_and_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = AttentionBlock::<f64>::new(8, 2, &mut rng);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let vars = block.bind(&mut binder, "attend");

        // zero input, zero biases -> zero output
        let z = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 8])));
        assert!(vars.attend(z).value().iter().all(|&v| v == 0.0));

        // homogeneity: attend(alpha x) = alpha attend(x)
        let x = randn::<f64>(&[2, 8], 1.0, &mut rng);
        let y1 = vars.attend(tape.leaf(x.clone())).value();
        let y2 = vars.attend(tape.leaf(x.mapv(|v| v * 2.0))).value();
        for (a, b) in y1.iter().zip(y2.iter()) {
            assert!((2.0 * a - b).abs() < 1e-9, "not linear: {a} vs {b}");
        }
    }

    #[test]
    fn classifier_heads_are_uniform_at_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut heads = ClassifierHeads::<f64>::new(8, 3, 6, 8, &mut rng);
        heads.subject.w.fill(0.0);
        heads.action.w.fill(0.0);
        heads.object.w.fill(0.0);
        let x = Array2::from_elem((2, 8), 0.4);
        let probs = classify_heads(&heads, &x);
        for p in probs.subject.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        for p in probs.action.iter() {
            assert!((p - 1.0 / 6.0).abs() < 1e-12);
        }
        for row in probs.object.rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
