//! Training orchestration: batching, the forward/backward pass over the full
//! objective, parameter updates, feature-bank scheduling, metrics logging,
//! checkpointing, and the gradient-verification harness.
//!
//! Training is deterministic by construction: batch and recombination
//! sampling derive a fresh RNG from (sampling seed, step), so resuming from
//! a checkpoint replays exactly the same stream as an uninterrupted run.

pub mod checkpoint;
pub mod gradcheck;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::{Binder, Params};
use crate::autodiff::{Scalar, Tape, Var};
use crate::bank::{recomb_caption, recombination_loss, Combiner, FeatureBank};
use crate::config::{AttentionMode, OptimizerKind, RunConfig};
use crate::disentangle::{
    l2_penalty, orthogonality_loss, AttentionBlock, BranchProjector, ClassifierHeads,
};
use crate::encoders::{fingerprint_array, FrozenTextEncoder, FrozenVisualEncoder, TextBranchHeads};
use crate::error::{Error, Result};
use crate::objective::{
    aux_loss, clip_loss, disent_enhanced, total_loss, LossBreakdown, TAU_MAX, TAU_MIN,
};
use crate::synth::{derive_seed, DatasetManifest, Split, Triplet};
use crate::temporal::{
    extract_last, frame_diffs, start_end_diff, FusionMlp, TemporalConfig, TemporalEncoder,
};

/// Every trainable parameter group of the pipeline.
pub struct Model<T> {
    pub text_heads: TextBranchHeads<T>,
    pub temporal: TemporalEncoder<T>,
    pub fusion: FusionMlp<T>,
    pub attend: AttentionBlock<T>,
    pub branches: BranchProjector<T>,
    pub classifiers: ClassifierHeads<T>,
    pub combiner: Combiner<T>,
    /// Shared trainable temperature, clamped to `[TAU_MIN, TAU_MAX]`.
    pub tau: ArrayD<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &RunConfig, vocab_sizes: (usize, usize, usize)) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.model);
        let d = cfg.dims.d;
        let temporal_cfg = TemporalConfig {
            d_model: d,
            heads: cfg.temporal.heads,
            layers: cfg.temporal.layers,
            max_relative_distance: cfg.temporal.max_relative_distance,
            d_v: cfg.dims.d_v,
        };
        Ok(Model {
            text_heads: TextBranchHeads::new(cfg.dims.d_t, cfg.dims.d_b, &mut rng),
            temporal: TemporalEncoder::new(temporal_cfg, &mut rng)?,
            fusion: FusionMlp::new(d, cfg.dims.d_v, &mut rng),
            attend: AttentionBlock::new(cfg.dims.d_v, cfg.attend_heads, &mut rng),
            branches: BranchProjector::new(cfg.dims.d_v, cfg.dims.d_b, &mut rng),
            classifiers: ClassifierHeads::new(
                cfg.dims.d_v,
                vocab_sizes.0,
                vocab_sizes.1,
                vocab_sizes.2,
                &mut rng,
            ),
            combiner: Combiner::new(cfg.dims.d_b, &mut rng),
            tau: ArrayD::from_elem(ndarray::IxDyn(&[1]), T::of_f64(cfg.loss.tau)),
        })
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>) -> ModelVars<'t, T> {
        ModelVars {
            text_heads: self.text_heads.bind(binder, "text_heads"),
            temporal: self.temporal.bind(binder, "temporal"),
            fusion: self.fusion.bind(binder, "fusion"),
            attend: self.attend.bind(binder, "attend"),
            branches: self.branches.bind(binder, "branches"),
            classifiers: self.classifiers.bind(binder, "classifiers"),
            combiner: self.combiner.bind(binder, "combiner"),
            tau: binder.bind("tau", &self.tau, false),
        }
    }

    /// Hash of all trainable parameters.
    pub fn fingerprint(&self) -> String {
        let mut values: Vec<T> = Vec::new();
        self.visit("model", &mut |_, v, _| values.extend(v.iter().copied()));
        fingerprint_array(values.iter())
    }
}

impl<T: Scalar> Params<T> for Model<T> {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>, bool)) {
        self.text_heads.visit("text_heads", f);
        self.temporal.visit("temporal", f);
        self.fusion.visit("fusion", f);
        self.attend.visit("attend", f);
        self.branches.visit("branches", f);
        self.classifiers.visit("classifiers", f);
        self.combiner.visit("combiner", f);
        f("tau", &self.tau, false);
    }
    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>, bool)) {
        self.text_heads.visit_mut("text_heads", f);
        self.temporal.visit_mut("temporal", f);
        self.fusion.visit_mut("fusion", f);
        self.attend.visit_mut("attend", f);
        self.branches.visit_mut("branches", f);
        self.classifiers.visit_mut("classifiers", f);
        self.combiner.visit_mut("combiner", f);
        f("tau", &mut self.tau, false);
    }
}

pub struct ModelVars<'t, T: Scalar> {
    pub text_heads: crate::encoders::TextBranchHeadVars<'t, T>,
    pub temporal: crate::temporal::TemporalEncoderVars<'t, T>,
    pub fusion: crate::temporal::FusionMlpVars<'t, T>,
    pub attend: crate::disentangle::AttentionBlockVars<'t, T>,
    pub branches: crate::disentangle::BranchProjectorVars<'t, T>,
    pub classifiers: crate::disentangle::ClassifierHeadVars<'t, T>,
    pub combiner: crate::bank::CombinerVars<'t, T>,
    pub tau: Var<'t, T>,
}

impl<'t, T: Scalar> ModelVars<'t, T> {
    /// Visual path from frame features `(B, n, d)` to the attention-enhanced
    /// vector `(B, d_v)`.
    pub fn visual_forward(
        &self,
        frames: Var<'t, T>,
        mode: AttentionMode,
    ) -> Result<Var<'t, T>> {
        let n = frames.dims()[1];
        let diffs = frame_diffs(frames)?;
        let tem = extract_last(self.temporal.forward(diffs));
        let delta = start_end_diff(frames)?;
        let first = frames.index_axis(1, 0);
        let last = frames.index_axis(1, n - 1);
        Ok(match mode {
            AttentionMode::Fused => {
                let fused = self.fusion.forward(tem, delta, first, last);
                self.attend.attend(fused)
            }
            AttentionMode::Token => self.attend.attend_tokens([tem, delta, first, last]),
        })
    }

    /// Per-sample `(subject; object; action)` concatenation used by the
    /// cross-modal loss (matching the text side ordering).
    pub fn concat_soa(
        &self,
        subject: Var<'t, T>,
        action: Var<'t, T>,
        object: Var<'t, T>,
    ) -> Var<'t, T> {
        crate::autodiff::concat_last(&[subject, object, action])
    }
}

/// The frozen encoder pair for a run.
pub struct Frozen<T> {
    pub visual: FrozenVisualEncoder<T>,
    pub text: FrozenTextEncoder<T>,
}

impl<T: Scalar> Frozen<T> {
    pub fn new(cfg: &RunConfig) -> Self {
        Frozen {
            visual: FrozenVisualEncoder::new(&cfg.encoder, cfg.dims.d, cfg.seeds.encoder),
            text: FrozenTextEncoder::new(&cfg.encoder, cfg.dims.d_t, cfg.seeds.encoder),
        }
    }

    pub fn fingerprint(&self) -> String {
        format!("{}:{}", self.visual.fingerprint(), self.text.fingerprint())
    }
}

/// Dataset with all frozen encodings precomputed (the encoders never change,
/// so per-record features are constants of the run).
pub struct PreparedDataset<T> {
    pub manifest: DatasetManifest,
    pub frame_features: Vec<Array2<T>>,
    pub text_base: Vec<Array1<T>>,
    pub labels: Vec<Triplet>,
}

impl<T: Scalar> PreparedDataset<T> {
    pub fn load(dir: &Path, cfg: &RunConfig, frozen: &Frozen<T>) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        manifest.validate()?;
        let mut frame_features = Vec::with_capacity(manifest.records.len());
        let mut text_base = Vec::with_capacity(manifest.records.len());
        let mut labels = Vec::with_capacity(manifest.records.len());
        let mut caption_cache: HashMap<String, Array1<T>> = HashMap::new();
        for rec in &manifest.records {
            let frames = crate::synth::clipfile::read_clip(&manifest.clip_path(dir, rec))?;
            let sample = crate::synth::VideoSample {
                video_id: rec.video_id.clone(),
                frames,
                caption: rec.caption.clone(),
                triplet: manifest.triplet_of(rec)?,
                split: rec.split,
            };
            frame_features.push(frozen.visual.encode_video(&sample, cfg.sampled_frames)?);
            let base = match caption_cache.get(&rec.caption) {
                Some(v) => v.clone(),
                None => {
                    let v = frozen.text.encode_text(&rec.caption)?;
                    caption_cache.insert(rec.caption.clone(), v.clone());
                    v
                }
            };
            text_base.push(base);
            labels.push(sample.triplet);
        }
        Ok(PreparedDataset {
            manifest,
            frame_features,
            text_base,
            labels,
        })
    }

    pub fn indices_for(&self, split: Split) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    fn stack_frames(&self, indices: &[usize]) -> ArrayD<T> {
        let (n, d) = self.frame_features[0].dim();
        let mut out = ndarray::Array3::<T>::zeros((indices.len(), n, d));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.frame_features[i]);
        }
        out.into_dyn()
    }

    fn stack_text(&self, indices: &[usize]) -> ArrayD<T> {
        let d_t = self.text_base[0].len();
        let mut out = Array2::<T>::zeros((indices.len(), d_t));
        for (row, &i) in indices.iter().enumerate() {
            out.row_mut(row).assign(&self.text_base[i]);
        }
        out.into_dyn()
    }
}

/// Optimizer state for one run; momentum and Adam keep per-tensor buffers.
pub struct Optimizer<T> {
    pub cfg: crate::config::OptimizerConfig,
    pub kind: OptimizerKind,
    pub steps_applied: usize,
    pub momentum: HashMap<String, ArrayD<T>>,
    pub second_moment: HashMap<String, ArrayD<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: crate::config::OptimizerConfig) -> Self {
        Optimizer {
            kind: cfg.kind,
            cfg,
            steps_applied: 0,
            momentum: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    /// One decoupled-weight-decay update over every parameter. `grads` must
    /// be in the model's visit order.
    pub fn apply(&mut self, model: &mut Model<T>, grads: &[(String, ArrayD<T>, bool)]) {
        self.steps_applied += 1;
        let t = self.steps_applied;
        let warm = if self.cfg.warmup_steps > 0 {
            (t as f64 / self.cfg.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let lr = T::of_f64(self.cfg.learning_rate * warm);
        let wd = T::of_f64(self.cfg.weight_decay);
        let mut i = 0usize;
        model.visit_mut("", &mut |name, param, decay| {
            let (gname, grad, gdecay) = &grads[i];
            assert_eq!(gname, name, "gradient order must match visit order");
            debug_assert_eq!(*gdecay, decay);
            i += 1;
            if decay && self.cfg.weight_decay > 0.0 {
                param.mapv_inplace(|p| p * (T::one() - lr * wd));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    *param = &*param - &grad.mapv(|g| g * lr);
                }
                OptimizerKind::Momentum => {
                    let beta = T::of_f64(self.cfg.momentum_beta);
                    let buf = self
                        .momentum
                        .entry(name.to_string())
                        .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
                    *buf = buf.mapv(|b| b * beta) + grad;
                    *param = &*param - &buf.mapv(|b| b * lr);
                }
                OptimizerKind::Adam => {
                    let b1 = T::of_f64(self.cfg.adam_beta1);
                    let b2 = T::of_f64(self.cfg.adam_beta2);
                    let eps = T::of_f64(self.cfg.adam_eps);
                    let m = self
                        .momentum
                        .entry(name.to_string())
                        .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
                    *m = m.mapv(|v| v * b1) + &grad.mapv(|g| g * (T::one() - b1));
                    let v = self
                        .second_moment
                        .entry(name.to_string())
                        .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
                    *v = v.mapv(|x| x * b2) + &grad.mapv(|g| g * g * (T::one() - b2));
                    let bc1 = T::one() - T::of_f64(self.cfg.adam_beta1).powi(t as i32);
                    let bc2 = T::one() - T::of_f64(self.cfg.adam_beta2).powi(t as i32);
                    let update = m
                        .mapv(|x| x / bc1)
                        .iter()
                        .zip(v.mapv(|x| x / bc2).iter())
                        .map(|(&mh, &vh)| lr * mh / (vh.sqrt() + eps))
                        .collect::<Vec<T>>();
                    let update = ArrayD::from_shape_vec(param.raw_dim(), update).unwrap();
                    *param = &*param - &update;
                }
            }
        });
        assert_eq!(i, grads.len(), "gradient count must match parameter count");
        // temperature clamp
        model.tau.mapv_inplace(|t| {
            t.max(T::of_f64(TAU_MIN)).min(T::of_f64(TAU_MAX))
        });
    }
}

/// One metrics line: the loss breakdown plus step and wall time.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsLine {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub wall_ms: f64,
}

/// Full training state for a run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model<f32>,
    pub bank: FeatureBank<f32>,
    pub optimizer: Optimizer<f32>,
    pub frozen: Frozen<f32>,
    pub data: PreparedDataset<f32>,
    pub step: usize,
    recomb_text: HashMap<Triplet, Array1<f32>>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, dataset_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let frozen = Frozen::new(&cfg);
        let data = PreparedDataset::load(dataset_dir, &cfg, &frozen)?;
        let sizes = data.manifest.vocab.sizes();
        let model = Model::new(&cfg, sizes)?;
        let bank = FeatureBank::new(sizes.0, sizes.1, sizes.2, cfg.dims.d_b, cfg.bank.setting_step)?;
        let optimizer = Optimizer::new(cfg.optimizer);
        let mut trainer = Trainer {
            cfg,
            model,
            bank,
            optimizer,
            frozen,
            data,
            step: 0,
            recomb_text: HashMap::new(),
        };
        trainer.precompute_recomb_text()?;
        Ok(trainer)
    }

    /// Resume from a checkpoint (same dataset).
    pub fn resume(cfg: RunConfig, dataset_dir: &Path, ckpt: &checkpoint::Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg, dataset_dir)?;
        ckpt.restore_into(&mut t.model, &mut t.bank, &mut t.optimizer)?;
        t.step = ckpt.step;
        Ok(t)
    }

    /// Frozen text encodings of every recombination caption over the full
    /// vocabulary product (cheap at desk scale, computed once).
    fn precompute_recomb_text(&mut self) -> Result<()> {
        let (ks, ka, ko) = self.data.manifest.vocab.sizes();
        for s in 0..ks {
            for a in 0..ka {
                for o in 0..ko {
                    let t = Triplet::new(s, a, o);
                    let caption = recomb_caption(t, &self.data.manifest.vocab)?;
                    self.recomb_text.insert(t, self.frozen.text.encode_text(&caption)?);
                }
            }
        }
        Ok(())
    }

    /// Uniform batch of train indices for a step (balanced mode draws the
    /// action class first). Stateless in the trainer: the RNG derives from
    /// (sampling seed, step).
    pub fn batch_for_step(&self, step: usize) -> Vec<usize> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seeds.sampling, &[step as u64, 1]));
        let train = self.data.indices_for(Split::Train);
        assert!(!train.is_empty(), "train split is empty");
        if self.cfg.modes.balanced_batches {
            let ka = self.data.manifest.vocab.actions.len();
            let by_action: Vec<Vec<usize>> = (0..ka)
                .map(|a| {
                    train
                        .iter()
                        .copied()
                        .filter(|&i| self.data.labels[i].action == a)
                        .collect()
                })
                .collect();
            (0..self.cfg.batch_size)
                .map(|_| loop {
                    let a = rng.gen_range(0..ka);
                    if !by_action[a].is_empty() {
                        break by_action[a][rng.gen_range(0..by_action[a].len())];
                    }
                })
                .collect()
        } else {
            (0..self.cfg.batch_size)
                .map(|_| train[rng.gen_range(0..train.len())])
                .collect()
        }
    }

    /// One optimization step over the given records. Computes the full loss,
    /// updates the trainable parameters, then refreshes the feature bank on
    /// its schedule.
    pub fn train_step_on(&mut self, indices: &[usize], step: usize) -> Result<LossBreakdown> {
        if indices.len() < 2 {
            return Err(Error::Parameter(
                "contrastive training needs a batch of at least 2".into(),
            ));
        }
        let labels: Vec<Triplet> = indices.iter().map(|&i| self.data.labels[i]).collect();

        let tape: Tape<f32> = Tape::new();
        let mut binder = Binder::new(&tape);
        let vars = self.model.bind(&mut binder);

        let frames = tape.leaf(self.data.stack_frames(indices));
        let text_base = tape.leaf(self.data.stack_text(indices));

        let f_attn = vars.visual_forward(frames, self.cfg.modes.attention)?;
        let branches = vars.branches.project(f_attn);
        let (ts, ta, to) = vars.text_heads.forward(text_base);

        let video_cat = vars.concat_soa(branches.subject, branches.action, branches.object);
        let text_cat = vars.concat_soa(ts, ta, to);

        let clip = clip_loss(video_cat, text_cat, vars.tau, self.cfg.modes.symmetric_clip)?;
        let sim = orthogonality_loss(&branches, self.cfg.modes.orthogonality)?;
        let l2 = l2_penalty(&branches);
        let (s_logits, a_logits, o_logits) = vars.classifiers.logits(f_attn);
        let (aux, aux_parts) = aux_loss(s_logits, a_logits, o_logits, &labels, &self.cfg.loss)?;

        // Recombination over bank slots (skipped until the bank is ready).
        let recomb = if self.cfg.loss.lambda_recomb > 0.0
            && self.bank.ready()
            && self.cfg.bank.recomb_samples >= 2
        {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.cfg.seeds.sampling,
                &[step as u64, 2],
            ));
            let m = self.bank.sample_triplets(self.cfg.bank.recomb_samples, &mut rng)?;
            let slots = tape.leaf(self.bank.gather(&m).into_dyn());
            let recombined = vars.combiner.combine(slots);
            let d_t = self.cfg.dims.d_t;
            let mut text_m = Array2::<f32>::zeros((m.len(), d_t));
            for (row, t) in m.iter().enumerate() {
                text_m.row_mut(row).assign(&self.recomb_text[t]);
            }
            let (rs, ra, ro) = vars.text_heads.forward(tape.leaf(text_m.into_dyn()));
            let recomb_text_cat = vars.concat_soa(rs, ra, ro);
            Some(recombination_loss(recombined, recomb_text_cat, vars.tau)?)
        } else {
            None
        };
        let recomb_var = recomb.unwrap_or_else(|| {
            tape.leaf(ArrayD::from_elem(ndarray::IxDyn(&[1]), 0.0f32))
        });

        let disent = disent_enhanced(
            sim,
            l2,
            recomb_var,
            self.cfg.loss.lambda_ortho,
            self.cfg.loss.lambda_recomb,
        );
        let total = total_loss(clip, disent, aux, &self.cfg.loss);

        let breakdown = LossBreakdown {
            clip: clip.scalar() as f64,
            sim: sim.scalar() as f64,
            l2: l2.scalar() as f64,
            recomb: recomb_var.scalar() as f64,
            aux_subject: aux_parts[0].scalar() as f64,
            aux_action: aux_parts[1].scalar() as f64,
            aux_object: aux_parts[2].scalar() as f64,
            total: total.scalar() as f64,
        };
        for (term, value) in [
            ("clip", breakdown.clip),
            ("sim", breakdown.sim),
            ("l2", breakdown.l2),
            ("recomb", breakdown.recomb),
            ("aux_subject", breakdown.aux_subject),
            ("aux_action", breakdown.aux_action),
            ("aux_object", breakdown.aux_object),
            ("total", breakdown.total),
        ] {
            if !value.is_finite() {
                return Err(Error::Divergence {
                    term: term.into(),
                    step,
                });
            }
        }

        let grads = tape.backward(total);
        let grad_list: Vec<(String, ArrayD<f32>, bool)> = binder
            .entries()
            .iter()
            .map(|(name, var, decay)| (name.clone(), grads.wrt(*var), *decay))
            .collect();
        // Detached branch values for the bank before parameters move.
        let sub_val = branches.subject.value().into_dimensionality().unwrap();
        let act_val = branches.action.value().into_dimensionality().unwrap();
        let obj_val = branches.object.value().into_dimensionality().unwrap();

        self.optimizer.apply(&mut self.model, &grad_list);
        self.bank.update(&sub_val, &act_val, &obj_val, &labels, step)?;
        Ok(breakdown)
    }

    /// One scheduled step: sample the batch for `self.step`, update, advance.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let indices = self.batch_for_step(self.step);
        let out = self.train_step_on(&indices, self.step)?;
        self.step += 1;
        Ok(out)
    }

    /// Branch features (and the attention-enhanced vector) for arbitrary
    /// records, without touching parameters.
    pub fn embed_records(
        &self,
        indices: &[usize],
    ) -> Result<(Array2<f32>, Array2<f32>, Array2<f32>, Array2<f32>)> {
        let tape: Tape<f32> = Tape::new();
        let mut binder = Binder::new(&tape);
        let vars = self.model.bind(&mut binder);
        let frames = tape.leaf(self.data.stack_frames(indices));
        let f_attn = vars.visual_forward(frames, self.cfg.modes.attention)?;
        let branches = vars.branches.project(f_attn);
        let to2 = |v: Var<'_, f32>| v.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        Ok((
            to2(branches.subject),
            to2(branches.action),
            to2(branches.object),
            to2(f_attn),
        ))
    }

    /// Text-side branch concatenation for arbitrary captions.
    pub fn embed_captions(&self, captions: &[String]) -> Result<Array2<f32>> {
        let d_t = self.cfg.dims.d_t;
        let mut base = Array2::<f32>::zeros((captions.len(), d_t));
        for (row, c) in captions.iter().enumerate() {
            base.row_mut(row).assign(&self.frozen.text.encode_text(c)?);
        }
        let tape: Tape<f32> = Tape::new();
        let mut binder = Binder::new(&tape);
        let vars = self.model.bind(&mut binder);
        let (ts, ta, to) = vars.text_heads.forward(tape.leaf(base.into_dyn()));
        let cat = vars.concat_soa(ts, ta, to);
        Ok(cat.value().into_dimensionality().unwrap())
    }

    /// Video-side branch concatenation `(subject; object; action)`.
    pub fn embed_videos(&self, indices: &[usize]) -> Result<Array2<f32>> {
        let (s, a, o, _) = self.embed_records(indices)?;
        let n = s.nrows();
        let d_b = s.ncols();
        let mut out = Array2::<f32>::zeros((n, 3 * d_b));
        for i in 0..n {
            out.row_mut(i).slice_mut(ndarray::s![0..d_b]).assign(&s.row(i));
            out.row_mut(i)
                .slice_mut(ndarray::s![d_b..2 * d_b])
                .assign(&o.row(i));
            out.row_mut(i)
                .slice_mut(ndarray::s![2 * d_b..3 * d_b])
                .assign(&a.row(i));
        }
        Ok(out)
    }
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub history: Vec<LossBreakdown>,
}

/// Train from scratch (or resume when `resume_from` is given), writing a
/// metrics JSONL and periodic checkpoints under `cfg.data.out_dir`.
pub fn train(cfg: &RunConfig, resume_from: Option<&Path>) -> Result<TrainOutcome> {
    let dataset_dir = PathBuf::from(&cfg.data.dataset_dir);
    let out_dir = PathBuf::from(&cfg.data.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    let mut trainer = match resume_from {
        Some(path) => {
            let ckpt = checkpoint::Checkpoint::load(path)?;
            Trainer::resume(cfg.clone(), &dataset_dir, &ckpt)?
        }
        None => Trainer::new(cfg.clone(), &dataset_dir)?,
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(if trainer.step > 0 {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?
    } else {
        std::fs::File::create(&metrics_path)?
    });

    let mut history = Vec::new();
    let started = Instant::now();
    while trainer.step < cfg.steps {
        let step = trainer.step;
        let losses = trainer.train_step()?;
        let line = MetricsLine {
            step,
            losses,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        serde_json::to_writer(&mut metrics, &line)?;
        metrics.write_all(b"\n")?;
        history.push(losses);
        if cfg.data.checkpoint_interval > 0 && (step + 1) % cfg.data.checkpoint_interval == 0 {
            let path = out_dir.join(format!("ckpt_{:06}.tck", step + 1));
            checkpoint::Checkpoint::save(&path, &trainer, &history)?;
        }
    }
    metrics.flush()?;

    let final_checkpoint = out_dir.join("ckpt_final.tck");
    checkpoint::Checkpoint::save(&final_checkpoint, &trainer, &history)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metrics_path,
        history,
    })
}
