//! Trainable building blocks: parameter containers plus their taped forward
//! passes.
//!
//! A module owns plain `ArrayD` parameters. Per training step it is *bound*
//! onto a fresh tape through a [`Binder`], which interns each named parameter
//! as a leaf and remembers `(name, var, decay)` so the optimizer can pair
//! gradients back with the owning arrays by walking [`Params`] in the same
//! order.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{concat_last, Scalar, Tape, Var};

/// Deterministic parameter traversal. `visit` and `bind` must enumerate the
/// same names in the same order; the trainer asserts this when pairing
/// gradients with parameters.
pub trait Params<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>, bool));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>, bool));
}

/// Records which tape leaf each named parameter was bound to.
pub struct Binder<'t, T: Scalar> {
    tape: &'t Tape<T>,
    entries: Vec<(String, Var<'t, T>, bool)>,
}

impl<'t, T: Scalar> Binder<'t, T> {
    pub fn new(tape: &'t Tape<T>) -> Self {
        Binder {
            tape,
            entries: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &ArrayD<T>, decay: bool) -> Var<'t, T> {
        let var = self.tape.leaf(value.clone());
        self.entries.push((name.into(), var, decay));
        var
    }

    pub fn entries(&self) -> &[(String, Var<'t, T>, bool)] {
        &self.entries
    }
}

/// Gaussian init with the given standard deviation; draws in f64 so f32 and
/// f64 models built from the same seed see the same underlying sequence.
pub fn randn<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::of_f64(z * std)
    })
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::ones(IxDyn(shape))
}

/// Fully connected layer; weight is `(in, out)`.
#[derive(Clone)]
pub struct Linear<T> {
    pub w: ArrayD<T>,
    pub b: ArrayD<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: randn(&[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt(), rng),
            b: zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>, name: &str) -> LinearVars<'t, T> {
        LinearVars {
            w: binder.bind(format!("{name}.w"), &self.w, true),
            b: binder.bind(format!("{name}.b"), &self.b, false),
        }
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>, bool)) {
        f(&format!("{prefix}.w"), &self.w, true);
        f(&format!("{prefix}.b"), &self.b, false);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>, bool)) {
        f(&format!("{prefix}.w"), &mut self.w, true);
        f(&format!("{prefix}.b"), &mut self.b, false);
    }
}

pub struct LinearVars<'t, T: Scalar> {
    pub w: Var<'t, T>,
    pub b: Var<'t, T>,
}

impl<'t, T: Scalar> LinearVars<'t, T> {
    /// Applies to the last axis; accepts `(N, in)` or `(B, S, in)`.
    pub fn forward(&self, x: Var<'t, T>) -> Var<'t, T> {
        let dims = x.dims();
        let in_dim = *dims.last().unwrap();
        let out_dim = self.w.dims()[1];
        match dims.len() {
            2 => x.matmul(self.w).add(self.b),
            3 => {
                let (b, s) = (dims[0], dims[1]);
                x.reshape(&[b * s, in_dim])
                    .matmul(self.w)
                    .add(self.b)
                    .reshape(&[b, s, out_dim])
            }
            n => panic!("linear forward expects 2-D or 3-D input, got {n}-D"),
        }
    }
}

/// Two dense layers with a smooth nonlinearity in between.
#[derive(Clone)]
pub struct Mlp2<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

impl<T: Scalar> Mlp2<T> {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp2 {
            l1: Linear::new(in_dim, hidden, rng),
            l2: Linear::new(hidden, out_dim, rng),
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>, name: &str) -> Mlp2Vars<'t, T> {
        Mlp2Vars {
            l1: self.l1.bind(binder, &format!("{name}.l1")),
            l2: self.l2.bind(binder, &format!("{name}.l2")),
        }
    }
}

impl<T: Scalar> Params<T> for Mlp2<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>, bool)) {
        self.l1.visit(&format!("{prefix}.l1"), f);
        self.l2.visit(&format!("{prefix}.l2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>, bool)) {
        self.l1.visit_mut(&format!("{prefix}.l1"), f);
        self.l2.visit_mut(&format!("{prefix}.l2"), f);
    }
}

pub struct Mlp2Vars<'t, T: Scalar> {
    pub l1: LinearVars<'t, T>,
    pub l2: LinearVars<'t, T>,
}

impl<'t, T: Scalar> Mlp2Vars<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Var<'t, T> {
        self.l2.forward(self.l1.forward(x).gelu())
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone)]
pub struct LayerNorm<T> {
    pub gain: ArrayD<T>,
    pub bias: ArrayD<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: ones(&[dim]),
            bias: zeros(&[dim]),
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>, name: &str) -> LayerNormVars<'t, T> {
        LayerNormVars {
            gain: binder.bind(format!("{name}.gain"), &self.gain, false),
            bias: binder.bind(format!("{name}.bias"), &self.bias, false),
        }
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>, bool)) {
        f(&format!("{prefix}.gain"), &self.gain, false);
        f(&format!("{prefix}.bias"), &self.bias, false);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>, bool)) {
        f(&format!("{prefix}.gain"), &mut self.gain, false);
        f(&format!("{prefix}.bias"), &mut self.bias, false);
    }
}

pub struct LayerNormVars<'t, T: Scalar> {
    pub gain: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Scalar> LayerNormVars<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Var<'t, T> {
        let dims = x.dims();
        let last = dims.len() - 1;
        let d = T::from_usize(dims[last]).unwrap();
        let mean = x.sum_axis(last, true).scale(T::one() / d);
        let centered = x.sub(mean);
        let var = centered.square().sum_axis(last, true).scale(T::one() / d);
        let inv_std = var.affine(T::one(), T::of_f64(LAYER_NORM_EPS)).sqrt().recip();
        centered.mul(inv_std).mul(self.gain).add(self.bias)
    }
}

/// Multi-head self-attention. Query/key/value projections plus output
/// projection; an optional `(S,S)` additive bias lands on the logits of
/// every head.
#[derive(Clone)]
pub struct Mha<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> Mha<T> {
    pub fn new(d_model: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d_model % heads == 0, "d_model must divide evenly by heads");
        Mha {
            wq: Linear::new(d_model, d_model, rng),
            wk: Linear::new(d_model, d_model, rng),
            wv: Linear::new(d_model, d_model, rng),
            wo: Linear::new(d_model, d_model, rng),
            heads,
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>, name: &str) -> MhaVars<'t, T> {
        MhaVars {
            wq: self.wq.bind(binder, &format!("{name}.wq")),
            wk: self.wk.bind(binder, &format!("{name}.wk")),
            wv: self.wv.bind(binder, &format!("{name}.wv")),
            wo: self.wo.bind(binder, &format!("{name}.wo")),
            heads: self.heads,
        }
    }
}

impl<T: Scalar> Params<T> for Mha<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>, bool)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>, bool)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

pub struct MhaVars<'t, T: Scalar> {
    pub wq: LinearVars<'t, T>,
    pub wk: LinearVars<'t, T>,
    pub wv: LinearVars<'t, T>,
    pub wo: LinearVars<'t, T>,
    pub heads: usize,
}

impl<'t, T: Scalar> MhaVars<'t, T> {
    /// `x` is `(B, S, d)`; no causal mask.
    pub fn forward(&self, x: Var<'t, T>, logit_bias: Option<Var<'t, T>>) -> Var<'t, T> {
        let dims = x.dims();
        let (b, s, d) = (dims[0], dims[1], dims[2]);
        let h = self.heads;
        let dh = d / h;
        let split = |v: Var<'t, T>| {
            v.reshape(&[b, s, h, dh])
                .transpose(&[0, 2, 1, 3])
                .reshape(&[b * h, s, dh])
        };
        let q = split(self.wq.forward(x));
        let k = split(self.wk.forward(x));
        let v = split(self.wv.forward(x));
        let mut logits = q
            .bmm(k.transpose(&[0, 2, 1]))
            .scale(T::of_f64(1.0 / (dh as f64).sqrt()));
        if let Some(bias) = logit_bias {
            logits = logits.add(bias);
        }
        let weights = logits.softmax_last();
        let ctx = weights
            .bmm(v)
            .reshape(&[b, h, s, dh])
            .transpose(&[0, 2, 1, 3])
            .reshape(&[b, s, d]);
        self.wo.forward(ctx)
    }
}

/// Concatenate `(N, d_i)` features along the feature axis.
pub fn concat_features<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Var<'t, T> {
    concat_last(parts)
}
