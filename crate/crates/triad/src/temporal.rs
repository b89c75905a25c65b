//! Temporal dynamics path: consecutive frame-feature differences, a
//! pre-norm transformer encoder with a learned relative-position bias over
//! the difference sequence, the start-end difference, and the fusion MLP
//! producing the final visual vector.
//!
//! The whole difference path is invariant to adding one constant vector to
//! every frame feature; the raw first/last frame terms entering the fusion
//! are not, so the fused output is not claimed invariant.

use ndarray::{Array2, ArrayD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{randn, Binder, LayerNorm, LayerNormVars, Mha, MhaVars, Mlp2, Mlp2Vars, Params};
use crate::autodiff::{concat_last, table_lookup, Scalar, Var};
use crate::error::{Error, Result};

/// Transformer geometry. `d_model` equals the frame feature dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_relative_distance: usize,
    pub d_v: usize,
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(
                "temporal.heads: must divide d_model evenly".into(),
            ));
        }
        if self.layers < 1 {
            return Err(Error::Config("temporal.layers: must be >= 1".into()));
        }
        if self.max_relative_distance < 1 {
            return Err(Error::Config(
                "temporal.max_relative_distance: must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Consecutive frame differences: `(B, n, d) -> (B, n-1, d)` where row `i`
/// holds `F_{i+1} - F_i`.
pub fn frame_diffs<'t, T: Scalar>(features: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = features.dims()[1];
    if n < 2 {
        return Err(Error::InsufficientFrames(n));
    }
    Ok(features
        .slice_axis(1, 1, n)
        .sub(features.slice_axis(1, 0, n - 1)))
}

/// Last transformer output, aligned with the final frame difference:
/// `(B, S, d) -> (B, d)`.
pub fn extract_last<'t, T: Scalar>(outputs: Var<'t, T>) -> Var<'t, T> {
    let s = outputs.dims()[1];
    outputs.index_axis(1, s - 1)
}

/// Difference between last and first frame features: `(B, n, d) -> (B, d)`.
pub fn start_end_diff<'t, T: Scalar>(features: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = features.dims()[1];
    if n < 2 {
        return Err(Error::InsufficientFrames(n));
    }
    Ok(features.index_axis(1, n - 1).sub(features.index_axis(1, 0)))
}

#[derive(Clone)]
struct EncoderLayer<T> {
    ln1: LayerNorm<T>,
    attn: Mha<T>,
    ln2: LayerNorm<T>,
    ffn: Mlp2<T>,
}

/// Pre-norm transformer encoder over the difference sequence. One learned
/// scalar bias per clipped relative offset is added to the attention logits;
/// the table is shared across layers and heads. No causal mask.
#[derive(Clone)]
pub struct TemporalEncoder<T> {
    cfg: TemporalConfig,
    layers: Vec<EncoderLayer<T>>,
    final_norm: LayerNorm<T>,
    rel_bias: ArrayD<T>,
}

impl<T: Scalar> TemporalEncoder<T> {
    pub fn new(cfg: TemporalConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let layers = (0..cfg.layers)
            .map(|_| EncoderLayer {
                ln1: LayerNorm::new(d),
                attn: Mha::new(d, cfg.heads, rng),
                ln2: LayerNorm::new(d),
                ffn: Mlp2::new(d, 4 * d, d, rng),
            })
            .collect();
        // start from a flat bias; small noise keeps the table checkable
        let rel_bias = randn::<T>(&[2 * cfg.max_relative_distance + 1], 0.02, rng);
        Ok(TemporalEncoder {
            cfg,
            layers,
            final_norm: LayerNorm::new(d),
            rel_bias,
        })
    }

    pub fn config(&self) -> &TemporalConfig {
        &self.cfg
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>, name: &str) -> TemporalEncoderVars<'t, T> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| EncoderLayerVars {
                ln1: l.ln1.bind(binder, &format!("{name}.layer{i}.ln1")),
                attn: l.attn.bind(binder, &format!("{name}.layer{i}.attn")),
                ln2: l.ln2.bind(binder, &format!("{name}.layer{i}.ln2")),
                ffn: l.ffn.bind(binder, &format!("{name}.layer{i}.ffn")),
            })
            .collect();
        TemporalEncoderVars {
            layers,
            final_norm: self.final_norm.bind(binder, &format!("{name}.final_norm")),
            rel_bias: binder.bind(format!("{name}.rel_bias"), &self.rel_bias, false),
            idx_fn: IdxFn {
                max: self.cfg.max_relative_distance,
            },
        }
    }
}

impl<T: Scalar> Params<T> for TemporalEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>, bool)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.ln1.visit(&format!("{prefix}.layer{i}.ln1"), f);
            l.attn.visit(&format!("{prefix}.layer{i}.attn"), f);
            l.ln2.visit(&format!("{prefix}.layer{i}.ln2"), f);
            l.ffn.visit(&format!("{prefix}.layer{i}.ffn"), f);
        }
        self.final_norm.visit(&format!("{prefix}.final_norm"), f);
        f(&format!("{prefix}.rel_bias"), &self.rel_bias, false);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>, bool)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.ln1.visit_mut(&format!("{prefix}.layer{i}.ln1"), f);
            l.attn.visit_mut(&format!("{prefix}.layer{i}.attn"), f);
            l.ln2.visit_mut(&format!("{prefix}.layer{i}.ln2"), f);
            l.ffn.visit_mut(&format!("{prefix}.layer{i}.ffn"), f);
        }
        self.final_norm.visit_mut(&format!("{prefix}.final_norm"), f);
        f(&format!("{prefix}.rel_bias"), &mut self.rel_bias, false);
    }
}

struct EncoderLayerVars<'t, T: Scalar> {
    ln1: LayerNormVars<'t, T>,
    attn: MhaVars<'t, T>,
    ln2: LayerNormVars<'t, T>,
    ffn: Mlp2Vars<'t, T>,
}

struct IdxFn {
    max: usize,
}

impl IdxFn {
    fn indices(&self, s: usize) -> Array2<usize> {
        let m = self.max as isize;
        Array2::from_shape_fn((s, s), |(i, j)| {
            let off = (i as isize - j as isize).clamp(-m, m);
            (off + m) as usize
        })
    }
}

pub struct TemporalEncoderVars<'t, T: Scalar> {
    layers: Vec<EncoderLayerVars<'t, T>>,
    final_norm: LayerNormVars<'t, T>,
    rel_bias: Var<'t, T>,
    idx_fn: IdxFn,
}

impl<'t, T: Scalar> TemporalEncoderVars<'t, T> {
    /// `(B, S, d) -> (B, S, d)` over the difference sequence.
    pub fn forward(&self, diffs: Var<'t, T>) -> Var<'t, T> {
        let s = diffs.dims()[1];
        let bias = table_lookup(self.rel_bias, &self.idx_fn.indices(s));
        let mut x = diffs;
        for layer in &self.layers {
            let attn_out = layer.attn.forward(layer.ln1.forward(x), Some(bias));
            x = x.add(attn_out);
            let ffn_out = layer.ffn.forward(layer.ln2.forward(x));
            x = x.add(ffn_out);
        }
        self.final_norm.forward(x)
    }
}

/// Fusion head: concatenate the four summary vectors and project
/// `4d -> 2d -> d_v`.
#[derive(Clone)]
pub struct FusionMlp<T> {
    pub mlp: Mlp2<T>,
}

impl<T: Scalar> FusionMlp<T> {
    pub fn new(d: usize, d_v: usize, rng: &mut ChaCha8Rng) -> Self {
        FusionMlp {
            mlp: Mlp2::new(4 * d, 2 * d, d_v, rng),
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>, name: &str) -> FusionMlpVars<'t, T> {
        FusionMlpVars {
            mlp: self.mlp.bind(binder, name),
        }
    }
}

impl<T: Scalar> Params<T> for FusionMlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>, bool)) {
        self.mlp.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>, bool)) {
        self.mlp.visit_mut(prefix, f);
    }
}

pub struct FusionMlpVars<'t, T: Scalar> {
    mlp: Mlp2Vars<'t, T>,
}

impl<'t, T: Scalar> FusionMlpVars<'t, T> {
    /// `fuse(Tem, dF, F_1, F_n)`: all four are `(B, d)`.
    pub fn forward(
        &self,
        tem: Var<'t, T>,
        delta: Var<'t, T>,
        first: Var<'t, T>,
        last: Var<'t, T>,
    ) -> Var<'t, T> {
        self.mlp.forward(concat_last(&[tem, delta, first, last]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::{Array3, IxDyn};
    use rand::SeedableRng;

    fn cfg() -> TemporalConfig {
        TemporalConfig {
            d_model: 8,
            heads: 2,
            layers: 2,
            max_relative_distance: 4,
            d_v: 8,
        }
    }

    #[test]
    fn diffs_of_constant_sequence_are_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Array3::from_elem((1, 5, 3), 2.5).into_dyn());
        let d = frame_diffs(x).unwrap();
        assert_eq!(d.dims(), vec![1, 4, 3]);
        assert!(d.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_ramp_gives_unit_diffs() {
        let tape = Tape::<f64>::new();
        // F_i = i * e1, n = 4, d = 3
        let x = tape.leaf(
            Array3::from_shape_fn((1, 4, 3), |(_, i, c)| if c == 0 { i as f64 } else { 0.0 })
                .into_dyn(),
        );
        let d = frame_diffs(x).unwrap().value();
        for i in 0..3 {
            assert_eq!(d[[0, i, 0]], 1.0);
            assert_eq!(d[[0, i, 1]], 0.0);
        }
    }

    #[test]
    fn telescoping_sum_recovers_last_frame() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = tape.leaf(randn::<f64>(&[2, 6, 4], 1.0, &mut rng));
        let d = frame_diffs(x).unwrap();
        let first = x.index_axis(1, 0);
        let total = d.sum_axis(1, false).add(first).value();
        let last = x.index_axis(1, 5).value();
        for (a, b) in total.iter().zip(last.iter()) {
            assert!((a - b).abs() < 1e-6, "telescoping identity violated");
        }
    }

    #[test]
    fn insufficient_frames_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(ndarray::ArrayD::zeros(IxDyn(&[1, 1, 3])));
        assert!(matches!(
            frame_diffs(x),
            Err(Error::InsufficientFrames(1))
        ));
    }

    #[test]
    fn extract_last_returns_final_row() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(
            Array3::from_shape_fn((1, 3, 2), |(_, i, c)| (i * 10 + c) as f64).into_dyn(),
        );
        let last = extract_last(x).value();
        assert_eq!(last[[0, 0]], 20.0);
        assert_eq!(last[[0, 1]], 21.0);
    }

    #[test]
    fn start_end_diff_is_antisymmetric_under_reversal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = randn::<f64>(&[1, 5, 3], 1.0, &mut rng);
        let tape = Tape::<f64>::new();
        let x = tape.leaf(data.clone());
        let fwd = start_end_diff(x).unwrap().value();
        let mut rev_data = data.clone();
        for i in 0..5 {
            rev_data
                .index_axis_mut(ndarray::Axis(1), i)
                .assign(&data.index_axis(ndarray::Axis(1), 4 - i));
        }
        let rx = tape.leaf(rev_data);
        let rev = start_end_diff(rx).unwrap().value();
        for (a, b) in fwd.iter().zip(rev.iter()) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn transformer_preserves_shape_and_ignores_shared_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = TemporalEncoder::<f64>::new(cfg(), &mut rng).unwrap();

        let content = randn::<f64>(&[2, 6, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let vars = enc.bind(&mut binder, "temporal");
        let x = tape.leaf(content.clone());
        let out = vars.forward(frame_diffs(x).unwrap());
        assert_eq!(out.dims(), vec![2, 5, 8]);

        // two different static videos produce zero diffs, hence equal outputs
        let static_a = ndarray::ArrayD::from_elem(IxDyn(&[1, 6, 8]), 0.3);
        let static_b = ndarray::ArrayD::from_elem(IxDyn(&[1, 6, 8]), -1.7);
        let oa = vars.forward(frame_diffs(tape.leaf(static_a)).unwrap()).value();
        let ob = vars.forward(frame_diffs(tape.leaf(static_b)).unwrap()).value();
        assert_eq!(oa, ob);

        // shifting every frame feature by a constant leaves diffs unchanged
        let shift = randn::<f64>(&[1, 1, 8], 1.0, &mut rng);
        let shifted = &content + &shift;
        let o1 = vars.forward(frame_diffs(tape.leaf(content.clone())).unwrap()).value();
        let o2 = vars.forward(frame_diffs(tape.leaf(shifted)).unwrap()).value();
        for (a, b) in o1.iter().zip(o2.iter()) {
            assert!((a - b).abs() <= 1e-6, "background shift leaked: {a} vs {b}");
        }
    }

    #[test]
    fn permuting_interior_frames_changes_diffs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = randn::<f64>(&[1, 5, 3], 1.0, &mut rng);
        let tape = Tape::<f64>::new();
        let orig = frame_diffs(tape.leaf(data.clone())).unwrap().value();
        let mut swapped = data.clone();
        let r1 = data.index_axis(ndarray::Axis(1), 1).to_owned();
        let r2 = data.index_axis(ndarray::Axis(1), 2).to_owned();
        swapped.index_axis_mut(ndarray::Axis(1), 1).assign(&r2);
        swapped.index_axis_mut(ndarray::Axis(1), 2).assign(&r1);
        let perm = frame_diffs(tape.leaf(swapped)).unwrap().value();
        assert_ne!(orig, perm);
    }

    #[test]
    fn fusion_of_zero_inputs_with_zero_bias_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fusion = FusionMlp::<f64>::new(8, 6, &mut rng);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let vars = fusion.bind(&mut binder, "fusion");
        let z = tape.leaf(ndarray::ArrayD::zeros(IxDyn(&[2, 8])));
        let out = vars.forward(z, z, z, z);
        assert_eq!(out.dims(), vec![2, 6]);
        assert!(out.value().iter().all(|&v| v == 0.0));
    }
}
