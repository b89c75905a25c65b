//! Gradient verification harness: for every trainable component, compare the
//! tape's analytic gradients of a scalar probe loss against central finite
//! differences at f64. Components are instantiated at reduced dimensions so
//! a full sweep stays well under the runtime budget; the math being checked
//! is identical to the training configuration.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::check::{max_rel_error, numeric_grads};
use crate::autodiff::nn::{randn, Binder, Params};
use crate::autodiff::{Tape, Var};
use crate::bank::Combiner;
use crate::config::OrthogonalityMode;
use crate::disentangle::{
    l2_penalty, orthogonality_loss, AttentionBlock, BranchProjector, ClassifierHeads,
};
use crate::encoders::TextBranchHeads;
use crate::error::{Error, Result};
use crate::objective::{aux_loss, clip_loss, LossWeights};
use crate::synth::Triplet;
use crate::temporal::{frame_diffs, FusionMlp, TemporalConfig, TemporalEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    TextHeads,
    Temporal,
    Fusion,
    Attention,
    Branches,
    Classifiers,
    Combiner,
    Frozen,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::TextHeads,
        Component::Temporal,
        Component::Fusion,
        Component::Attention,
        Component::Branches,
        Component::Classifiers,
        Component::Combiner,
    ];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Component::TextHeads => "text_heads",
            Component::Temporal => "temporal",
            Component::Fusion => "fusion",
            Component::Attention => "attention",
            Component::Branches => "branches",
            Component::Classifiers => "classifiers",
            Component::Combiner => "combiner",
            Component::Frozen => "frozen",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "text_heads" | "text" => Component::TextHeads,
            "temporal" => Component::Temporal,
            "fusion" => Component::Fusion,
            "attention" | "attend" => Component::Attention,
            "branches" | "branch" => Component::Branches,
            "classifiers" | "classifier" => Component::Classifiers,
            "combiner" => Component::Combiner,
            "frozen" => Component::Frozen,
            other => {
                return Err(Error::Config(format!(
                    "unknown component {other:?}; expected one of text_heads, temporal, fusion, attention, branches, classifiers, combiner, frozen"
                )))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub component: String,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub pass: bool,
    pub note: Option<String>,
}

impl ComponentReport {
    pub fn print(&self) {
        let status = if self.pass { "PASS" } else { "FAIL" };
        match &self.note {
            Some(note) => println!("[{status}] {:<12} {note}", self.component),
            None => println!(
                "[{status}] {:<12} max relative error {:.3e} over {} parameter tensors",
                self.component,
                self.max_rel_error,
                self.params.len()
            ),
        }
    }
}

/// Randomize every parameter of a module (including biases and norm gains)
/// so the probe sits at a generic point in parameter space.
fn randomize<P: Params<f64>>(module: &mut P, rng: &mut ChaCha8Rng) {
    module.visit_mut("p", &mut |_, v, _| {
        *v = randn::<f64>(v.shape(), 0.5, rng);
    });
}

/// Generic FD check: `loss_of` rebuilds the whole forward from the module's
/// current parameters. Every parameter tensor is FD-probed element by
/// element.
fn check_module<P: Params<f64> + Clone>(
    component: Component,
    module: &P,
    loss_of: impl Fn(&P) -> f64,
    analytic: &[(String, ArrayD<f64>)],
    eps: f64,
    tol: f64,
    corrupt: bool,
) -> ComponentReport {
    let mut params = Vec::new();
    let mut worst = 0.0f64;
    for (name, a_grad) in analytic {
        let mut a_grad = a_grad.clone();
        if corrupt {
            a_grad.mapv_inplace(|g| g * 1.02 + 1e-3);
        }
        let mut current = ArrayD::zeros(ndarray::IxDyn(&[0]));
        module.visit("p", &mut |n, v, _| {
            if n == name {
                current = v.clone();
            }
        });
        let f = |xs: &[ArrayD<f64>]| {
            let mut m = module.clone();
            m.visit_mut("p", &mut |n, v, _| {
                if n == name {
                    *v = xs[0].clone();
                }
            });
            loss_of(&m)
        };
        let numeric = numeric_grads(f, &[current], eps);
        let err = max_rel_error(&a_grad, &numeric[0]);
        worst = worst.max(err);
        params.push(ParamCheck {
            name: name.clone(),
            rel_error: err,
        });
    }
    ComponentReport {
        component: component.to_string(),
        params,
        max_rel_error: worst,
        pass: worst <= tol,
        note: None,
    }
}

/// Analytic gradients for every bound parameter under `build_loss`.
fn analytic_grads(
    build_loss: impl for<'t> Fn(&'t Tape<f64>, &mut Binder<'t, f64>) -> Var<'t, f64>,
) -> Vec<(String, ArrayD<f64>)> {
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let loss = build_loss(&tape, &mut binder);
    let grads = tape.backward(loss);
    binder
        .entries()
        .iter()
        .map(|(name, var, _)| (name.clone(), grads.wrt(*var)))
        .collect()
}

/// Run the finite-difference check for one component.
pub fn check_component(
    component: Component,
    eps: f64,
    tol: f64,
    seed: u64,
    corrupt: bool,
) -> Result<ComponentReport> {
    if eps <= 0.0 {
        return Err(Error::Parameter("eps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = match component {
        Component::Frozen => ComponentReport {
            component: component.to_string(),
            params: Vec::new(),
            max_rel_error: 0.0,
            pass: true,
            note: Some("no trainable parameters".into()),
        },
        Component::TextHeads => {
            let mut heads = TextBranchHeads::<f64>::new(12, 6, &mut rng);
            randomize(&mut heads, &mut rng);
            let base = randn::<f64>(&[3, 12], 1.0, &mut rng);
            let probes: Vec<ArrayD<f64>> =
                (0..3).map(|_| randn::<f64>(&[3, 6], 1.0, &mut rng)).collect();
            let loss_fn = {
                let base = base.clone();
                let probes = probes.clone();
                move |m: &TextBranchHeads<f64>| {
                    let tape = Tape::new();
                    let mut binder = Binder::new(&tape);
                    let vars = m.bind(&mut binder, "p");
                    let x = tape.leaf(base.clone());
                    let (s, a, o) = vars.forward(x);
                    s.mul(tape.leaf(probes[0].clone()))
                        .mean_all()
                        .add(a.mul(tape.leaf(probes[1].clone())).mean_all())
                        .add(o.mul(tape.leaf(probes[2].clone())).mean_all())
                        .scalar()
                }
            };
            let analytic = analytic_grads(|tape, binder| {
                let vars = heads.bind(binder, "p");
                let x = tape.leaf(base.clone());
                let (s, a, o) = vars.forward(x);
                s.mul(tape.leaf(probes[0].clone()))
                    .mean_all()
                    .add(a.mul(tape.leaf(probes[1].clone())).mean_all())
                    .add(o.mul(tape.leaf(probes[2].clone())).mean_all())
            });
            check_module(component, &heads, loss_fn, &analytic, eps, tol, corrupt)
        }
        Component::Temporal => {
            let cfg = TemporalConfig {
                d_model: 8,
                heads: 2,
                layers: 2,
                max_relative_distance: 3,
                d_v: 8,
            };
            let mut enc = TemporalEncoder::<f64>::new(cfg, &mut rng)?;
            randomize(&mut enc, &mut rng);
            let frames = randn::<f64>(&[2, 6, 8], 1.0, &mut rng);
            let probe = randn::<f64>(&[2, 5, 8], 1.0, &mut rng);
            let loss_fn = {
                let frames = frames.clone();
                let probe = probe.clone();
                move |m: &TemporalEncoder<f64>| {
                    let tape = Tape::new();
                    let mut binder = Binder::new(&tape);
                    let vars = m.bind(&mut binder, "p");
                    let x = tape.leaf(frames.clone());
                    let out = vars.forward(frame_diffs(x).unwrap());
                    out.mul(tape.leaf(probe.clone())).mean_all().scalar()
                }
            };
            let analytic = analytic_grads(|tape, binder| {
                let vars = enc.bind(binder, "p");
                let x = tape.leaf(frames.clone());
                let out = vars.forward(frame_diffs(x).unwrap());
                out.mul(tape.leaf(probe.clone())).mean_all()
            });
            check_module(component, &enc, loss_fn, &analytic, eps, tol, corrupt)
        }
        Component::Fusion => {
            let mut fusion = FusionMlp::<f64>::new(8, 6, &mut rng);
            randomize(&mut fusion, &mut rng);
            let inputs: Vec<ArrayD<f64>> =
                (0..4).map(|_| randn::<f64>(&[3, 8], 1.0, &mut rng)).collect();
            let probe = randn::<f64>(&[3, 6], 1.0, &mut rng);
            let loss_fn = {
                let inputs = inputs.clone();
                let probe = probe.clone();
                move |m: &FusionMlp<f64>| {
                    let tape = Tape::new();
                    let mut binder = Binder::new(&tape);
                    let vars = m.bind(&mut binder, "p");
                    let vs: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
                    vars.forward(vs[0], vs[1], vs[2], vs[3])
                        .mul(tape.leaf(probe.clone()))
                        .mean_all()
                        .scalar()
                }
            };
            let analytic = analytic_grads(|tape, binder| {
                let vars = fusion.bind(binder, "p");
                let vs: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
                vars.forward(vs[0], vs[1], vs[2], vs[3])
                    .mul(tape.leaf(probe.clone()))
                    .mean_all()
            });
            check_module(component, &fusion, loss_fn, &analytic, eps, tol, corrupt)
        }
        Component::Attention => {
            let mut block = AttentionBlock::<f64>::new(8, 2, &mut rng);
            randomize(&mut block, &mut rng);
            let x = randn::<f64>(&[3, 8], 1.0, &mut rng);
            let probe = randn::<f64>(&[3, 8], 1.0, &mut rng);
            let loss_fn = {
                let x = x.clone();
                let probe = probe.clone();
                move |m: &AttentionBlock<f64>| {
                    let tape = Tape::new();
                    let mut binder = Binder::new(&tape);
                    let vars = m.bind(&mut binder, "p");
                    vars.attend(tape.leaf(x.clone()))
                        .mul(tape.leaf(probe.clone()))
                        .mean_all()
                        .scalar()
                }
            };
            let analytic = analytic_grads(|tape, binder| {
                let vars = block.bind(binder, "p");
                vars.attend(tape.leaf(x.clone()))
                    .mul(tape.leaf(probe.clone()))
                    .mean_all()
            });
            check_module(component, &block, loss_fn, &analytic, eps, tol, corrupt)
        }
        Component::Branches => {
            let mut proj = BranchProjector::<f64>::new(8, 4, &mut rng);
            randomize(&mut proj, &mut rng);
            let x = randn::<f64>(&[4, 8], 1.0, &mut rng);
            // branch losses exercise the full orthogonality + penalty path
            let loss_fn = {
                let x = x.clone();
                move |m: &BranchProjector<f64>| {
                    let tape = Tape::new();
                    let mut binder = Binder::new(&tape);
                    let vars = m.bind(&mut binder, "p");
                    let b = vars.project(tape.leaf(x.clone()));
                    orthogonality_loss(&b, OrthogonalityMode::Squared)
                        .unwrap()
                        .add(l2_penalty(&b))
                        .scalar()
                }
            };
            let analytic = analytic_grads(|tape, binder| {
                let vars = proj.bind(binder, "p");
                let b = vars.project(tape.leaf(x.clone()));
                orthogonality_loss(&b, OrthogonalityMode::Squared)
                    .unwrap()
                    .add(l2_penalty(&b))
            });
            check_module(component, &proj, loss_fn, &analytic, eps, tol, corrupt)
        }
        Component::Classifiers => {
            let mut heads = ClassifierHeads::<f64>::new(8, 3, 4, 5, &mut rng);
            randomize(&mut heads, &mut rng);
            let x = randn::<f64>(&[4, 8], 1.0, &mut rng);
            let labels: Vec<Triplet> = (0..4).map(|i| Triplet::new(i % 3, i % 4, i % 5)).collect();
            let weights = LossWeights::default();
            let loss_fn = {
                let x = x.clone();
                let labels = labels.clone();
                move |m: &ClassifierHeads<f64>| {
                    let tape = Tape::new();
                    let mut binder = Binder::new(&tape);
                    let vars = m.bind(&mut binder, "p");
                    let (s, a, o) = vars.logits(tape.leaf(x.clone()));
                    aux_loss(s, a, o, &labels, &weights).unwrap().0.scalar()
                }
            };
            let analytic = analytic_grads(|tape, binder| {
                let vars = heads.bind(binder, "p");
                let (s, a, o) = vars.logits(tape.leaf(x.clone()));
                aux_loss(s, a, o, &labels, &weights).unwrap().0
            });
            check_module(component, &heads, loss_fn, &analytic, eps, tol, corrupt)
        }
        Component::Combiner => {
            let mut combiner = Combiner::<f64>::new(4, &mut rng);
            randomize(&mut combiner, &mut rng);
            let slots = randn::<f64>(&[3, 12], 1.0, &mut rng);
            let text = randn::<f64>(&[3, 12], 1.0, &mut rng);
            let tau = ndarray::arr1(&[0.2]).into_dyn();
            // full recombination-style InfoNCE so cosine + softmax are covered
            let loss_fn = {
                let slots = slots.clone();
                let text = text.clone();
                let tau = tau.clone();
                move |m: &Combiner<f64>| {
                    let tape = Tape::new();
                    let mut binder = Binder::new(&tape);
                    let vars = m.bind(&mut binder, "p");
                    let out = vars.combine(tape.leaf(slots.clone()));
                    clip_loss(out, tape.leaf(text.clone()), tape.leaf(tau.clone()), false)
                        .unwrap()
                        .scalar()
                }
            };
            let analytic = analytic_grads(|tape, binder| {
                let vars = combiner.bind(binder, "p");
                let out = vars.combine(tape.leaf(slots.clone()));
                clip_loss(out, tape.leaf(text.clone()), tape.leaf(tau.clone()), false).unwrap()
            });
            check_module(component, &combiner, loss_fn, &analytic, eps, tol, corrupt)
        }
    };
    Ok(report)
}

/// Check one component or all of them.
pub fn grad_check(
    component: Option<Component>,
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<Vec<ComponentReport>> {
    let list: Vec<Component> = match component {
        Some(c) => vec![c],
        None => Component::ALL.to_vec(),
    };
    list.into_iter()
        .map(|c| check_component(c, eps, tol, seed, false))
        .collect()
}

/// Composite-objective linearity: the gradient of the weighted total must
/// equal the weighted sum of per-term gradients. Returns the worst absolute
/// deviation over all parameters of a small end-to-end graph.
pub fn composite_linearity_deviation(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proj = BranchProjector::<f64>::new(8, 4, &mut rng);
    randomize(&mut proj, &mut rng);
    let x = randn::<f64>(&[4, 8], 1.0, &mut rng);
    let text = randn::<f64>(&[4, 12], 1.0, &mut rng);
    let w = LossWeights::default();

    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let vars = proj.bind(&mut binder, "p");
    let b = vars.project(tape.leaf(x.clone()));
    let video = crate::autodiff::concat_last(&[b.subject, b.object, b.action]);
    let tau = tape.leaf(ndarray::arr1(&[0.3]).into_dyn());
    let clip = clip_loss(video, tape.leaf(text.clone()), tau, false).unwrap();
    let sim = orthogonality_loss(&b, OrthogonalityMode::Squared).unwrap();
    let l2 = l2_penalty(&b);
    let zero = tape.leaf(ndarray::arr1(&[0.0]).into_dyn());
    let disent = crate::objective::disent_enhanced(sim, l2, zero, w.lambda_ortho, w.lambda_recomb);
    let total = crate::objective::total_loss(clip, disent, zero, &w);

    let g_total = tape.backward(total);
    let g_clip = tape.backward(clip);
    let g_sim = tape.backward(sim);
    let g_l2 = tape.backward(l2);

    let mut worst = 0.0f64;
    for (_, var, _) in binder.entries() {
        let combined = g_clip.wrt(*var).mapv(|v| v)
            + &g_sim.wrt(*var).mapv(|v| v * (w.lambda_disent * w.lambda_ortho))
            + &g_l2.wrt(*var).mapv(|v| v * (w.lambda_disent * w.lambda_ortho));
        let direct = g_total.wrt(*var);
        for (a, b) in direct.iter().zip(combined.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}
