//! Checkpoint container: 8-byte magic, u64 JSON-index length, the JSON
//! index, then concatenated little-endian f32 blobs. The index carries the
//! run configuration echo, step counter, bank schedule state, optimizer
//! counters and a metrics tail; loading validates every tensor shape against
//! the model it restores into, so a reload reproduces forward outputs
//! bit-identically.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Params;
use crate::bank::FeatureBank;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::objective::LossBreakdown;

use super::{Model, Optimizer, Trainer};

const MAGIC: [u8; 8] = *b"TRIADCK1";
const METRICS_TAIL: usize = 16;

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: usize,
    byte_len: usize,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    setting_step: usize,
    last_update_step: Option<usize>,
    initialized_subject: Vec<bool>,
    initialized_action: Vec<bool>,
    initialized_object: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    step: usize,
    config: RunConfig,
    vocab_sizes: (usize, usize, usize),
    bank: BankMeta,
    optimizer_steps: usize,
    metrics_tail: Vec<LossBreakdown>,
    tensors: Vec<TensorIndex>,
}

/// A parsed checkpoint, ready to restore into freshly built state.
pub struct Checkpoint {
    pub step: usize,
    pub config: RunConfig,
    pub vocab_sizes: (usize, usize, usize),
    pub metrics_tail: Vec<LossBreakdown>,
    optimizer_steps: usize,
    bank: BankMeta,
    tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

fn push_tensor(
    tensors: &mut Vec<TensorIndex>,
    blob: &mut Vec<u8>,
    name: &str,
    shape: &[usize],
    values: impl Iterator<Item = f32>,
) {
    let byte_offset = blob.len();
    let mut count = 0usize;
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
        count += 1;
    }
    debug_assert_eq!(count, shape.iter().product::<usize>());
    tensors.push(TensorIndex {
        name: name.to_string(),
        shape: shape.to_vec(),
        dtype: "f32".to_string(),
        byte_offset,
        byte_len: count * 4,
    });
}

impl Checkpoint {
    /// Serialize the trainer's full state.
    pub fn save(path: &Path, trainer: &Trainer, history: &[LossBreakdown]) -> Result<()> {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();

        trainer.model.visit("", &mut |name, value, _| {
            push_tensor(&mut tensors, &mut blob, name, value.shape(), value.iter().copied());
        });
        for (name, table) in [
            ("bank.subject.features", &trainer.bank.subject),
            ("bank.action.features", &trainer.bank.action),
            ("bank.object.features", &trainer.bank.object),
        ] {
            push_tensor(
                &mut tensors,
                &mut blob,
                name,
                table.features.shape(),
                table.features.iter().copied(),
            );
        }
        let mut optim_names: Vec<&String> = trainer.optimizer.momentum.keys().collect();
        optim_names.sort();
        for name in optim_names {
            let m = &trainer.optimizer.momentum[name];
            push_tensor(
                &mut tensors,
                &mut blob,
                &format!("optim.m.{name}"),
                m.shape(),
                m.iter().copied(),
            );
        }
        let mut second_names: Vec<&String> = trainer.optimizer.second_moment.keys().collect();
        second_names.sort();
        for name in second_names {
            let v = &trainer.optimizer.second_moment[name];
            push_tensor(
                &mut tensors,
                &mut blob,
                &format!("optim.v.{name}"),
                v.shape(),
                v.iter().copied(),
            );
        }

        let tail_start = history.len().saturating_sub(METRICS_TAIL);
        let index = IndexFile {
            step: trainer.step,
            config: trainer.cfg.clone(),
            vocab_sizes: trainer.data.manifest.vocab.sizes(),
            bank: BankMeta {
                setting_step: trainer.bank.setting_step,
                last_update_step: trainer.bank.last_update_step,
                initialized_subject: trainer.bank.subject.initialized.clone(),
                initialized_action: trainer.bank.action.initialized.clone(),
                initialized_object: trainer.bank.object.initialized.clone(),
            },
            optimizer_steps: trainer.optimizer.steps_applied,
            metrics_tail: history[tail_start..].to_vec(),
            tensors,
        };
        let json = serde_json::to_vec(&index)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        out.write_all(&blob)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Parse {
                line: 0,
                msg: format!("{}: not a checkpoint (bad magic)", path.display()),
            });
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let json_len = u64::from_le_bytes(len_bytes) as usize;
        let mut json = vec![0u8; json_len];
        file.read_exact(&mut json)?;
        let index: IndexFile = serde_json::from_slice(&json)?;
        let mut blob = Vec::new();
        file.read_to_end(&mut blob)?;

        let mut tensors = HashMap::new();
        for t in &index.tensors {
            if t.dtype != "f32" {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("tensor {}: unsupported dtype {}", t.name, t.dtype),
                });
            }
            let end = t.byte_offset + t.byte_len;
            if end > blob.len() {
                return Err(Error::TruncatedBlob {
                    name: t.name.clone(),
                    need: end,
                    have: blob.len(),
                });
            }
            let values: Vec<f32> = blob[t.byte_offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if values.len() != t.shape.iter().product::<usize>() {
                return Err(Error::TensorShape {
                    name: t.name.clone(),
                    expected: t.shape.clone(),
                    got: vec![values.len()],
                });
            }
            tensors.insert(t.name.clone(), (t.shape.clone(), values));
        }
        Ok(Checkpoint {
            step: index.step,
            config: index.config,
            vocab_sizes: index.vocab_sizes,
            metrics_tail: index.metrics_tail,
            optimizer_steps: index.optimizer_steps,
            bank: index.bank,
            tensors,
        })
    }

    fn take(&self, name: &str, expected_shape: &[usize]) -> Result<ArrayD<f32>> {
        let (shape, values) = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(format!("{name} missing from checkpoint")))?;
        if shape != expected_shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: expected_shape.to_vec(),
                got: shape.clone(),
            });
        }
        Ok(ArrayD::from_shape_vec(ndarray::IxDyn(shape), values.clone()).unwrap())
    }

    /// Restore tensors into an existing model/bank/optimizer, validating
    /// every shape and rejecting tensors the model does not know.
    pub fn restore_into(
        &self,
        model: &mut Model<f32>,
        bank: &mut FeatureBank<f32>,
        optimizer: &mut Optimizer<f32>,
    ) -> Result<()> {
        let mut result = Ok(());
        let mut used: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        model.visit_mut("", &mut |name, param, _| {
            if result.is_err() {
                return;
            }
            match self.take(name, param.shape()) {
                Ok(v) => {
                    *param = v;
                    used.insert(name.to_string());
                }
                Err(e) => result = Err(e),
            }
        });
        result?;

        for (name, table) in [
            ("bank.subject.features", &mut bank.subject),
            ("bank.action.features", &mut bank.action),
            ("bank.object.features", &mut bank.object),
        ] {
            let v = self.take(name, table.features.shape())?;
            table.features = v.into_dimensionality().unwrap();
            used.insert(name.to_string());
        }
        if self.bank.initialized_subject.len() != bank.subject.initialized.len()
            || self.bank.initialized_action.len() != bank.action.initialized.len()
            || self.bank.initialized_object.len() != bank.object.initialized.len()
        {
            return Err(Error::Parse {
                line: 0,
                msg: "bank initialization flags do not match table sizes".into(),
            });
        }
        bank.subject.initialized = self.bank.initialized_subject.clone();
        bank.action.initialized = self.bank.initialized_action.clone();
        bank.object.initialized = self.bank.initialized_object.clone();
        bank.setting_step = self.bank.setting_step;
        bank.last_update_step = self.bank.last_update_step;

        optimizer.steps_applied = self.optimizer_steps;
        for (name, (shape, values)) in &self.tensors {
            if let Some(param) = name.strip_prefix("optim.m.") {
                optimizer.momentum.insert(
                    param.to_string(),
                    ArrayD::from_shape_vec(ndarray::IxDyn(shape), values.clone()).unwrap(),
                );
                used.insert(name.clone());
            } else if let Some(param) = name.strip_prefix("optim.v.") {
                optimizer.second_moment.insert(
                    param.to_string(),
                    ArrayD::from_shape_vec(ndarray::IxDyn(shape), values.clone()).unwrap(),
                );
                used.insert(name.clone());
            }
        }
        if let Some(unknown) = self.tensors.keys().find(|k| !used.contains(*k)) {
            return Err(Error::UnknownTensor(unknown.clone()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthSpec};

    fn tiny_cfg(dataset_dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dims.d = 16;
        cfg.dims.d_t = 16;
        cfg.dims.d_b = 8;
        cfg.dims.d_v = 16;
        cfg.temporal.layers = 1;
        cfg.temporal.heads = 2;
        cfg.attend_heads = 2;
        cfg.batch_size = 4;
        cfg.steps = 3;
        cfg.bank.setting_step = 1;
        cfg.bank.recomb_samples = 4;
        cfg.data.dataset_dir = dataset_dir.display().to_string();
        cfg
    }

    fn tiny_dataset(dir: &Path) {
        let spec = SynthSpec {
            clips_per_triplet: 1,
            frames: 6,
            height: 16,
            width: 16,
            holdout_fraction: 0.0,
            ..SynthSpec::default()
        };
        generate_dataset(&spec, 5, dir).unwrap();
    }

    #[test]
    fn save_load_round_trip_is_forward_identical() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let mut cfg = tiny_cfg(dir.path());
        cfg.encoder.frame_height = 16;
        cfg.encoder.frame_width = 16;
        let mut trainer = Trainer::new(cfg.clone(), dir.path()).unwrap();
        for _ in 0..2 {
            trainer.train_step().unwrap();
        }
        let ckpt_path = dir.path().join("ck.tck");
        Checkpoint::save(&ckpt_path, &trainer, &[]).unwrap();

        let ckpt = Checkpoint::load(&ckpt_path).unwrap();
        let restored = Trainer::resume(cfg, dir.path(), &ckpt).unwrap();
        assert_eq!(restored.step, trainer.step);
        assert_eq!(restored.model.fingerprint(), trainer.model.fingerprint());
        assert_eq!(restored.bank.fingerprint(), trainer.bank.fingerprint());

        let idx: Vec<usize> = (0..4).collect();
        let a = trainer.embed_videos(&idx).unwrap();
        let b = restored.embed_videos(&idx).unwrap();
        assert_eq!(a, b, "forward outputs must be bit-identical after reload");
    }

    #[test]
    fn truncated_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let mut cfg = tiny_cfg(dir.path());
        cfg.encoder.frame_height = 16;
        cfg.encoder.frame_width = 16;
        let trainer = Trainer::new(cfg, dir.path()).unwrap();
        let ckpt_path = dir.path().join("ck.tck");
        Checkpoint::save(&ckpt_path, &trainer, &[]).unwrap();
        let bytes = std::fs::read(&ckpt_path).unwrap();
        std::fs::write(&ckpt_path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            Checkpoint::load(&ckpt_path).err().unwrap(),
            Error::TruncatedBlob { .. }
        ));
    }

    #[test]
    fn mismatched_dimensions_name_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let mut cfg = tiny_cfg(dir.path());
        cfg.encoder.frame_height = 16;
        cfg.encoder.frame_width = 16;
        let trainer = Trainer::new(cfg.clone(), dir.path()).unwrap();
        let ckpt_path = dir.path().join("ck.tck");
        Checkpoint::save(&ckpt_path, &trainer, &[]).unwrap();

        let ckpt = Checkpoint::load(&ckpt_path).unwrap();
        let mut other = cfg;
        other.dims.d_b = 4; // mismatched branch dimension
        let err = Trainer::resume(other, dir.path(), &ckpt).err().unwrap();
        match err {
            Error::TensorShape { name, .. } => {
                assert!(name.contains("text_heads") || name.contains("branches"), "{name}");
            }
            other => panic!("expected TensorShape, got {other}"),
        }
    }

    #[test]
    fn unknown_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let mut cfg = tiny_cfg(dir.path());
        cfg.encoder.frame_height = 16;
        cfg.encoder.frame_width = 16;
        let trainer = Trainer::new(cfg.clone(), dir.path()).unwrap();
        let ckpt_path = dir.path().join("ck.tck");
        Checkpoint::save(&ckpt_path, &trainer, &[]).unwrap();
        let mut ckpt = Checkpoint::load(&ckpt_path).unwrap();
        ckpt.tensors
            .insert("mystery.tensor".into(), (vec![1], vec![1.0]));
        let mut model = Model::new(&cfg, trainer.data.manifest.vocab.sizes()).unwrap();
        let mut bank = FeatureBank::new(3, 6, 8, cfg.dims.d_b, 1).unwrap();
        let mut opt = Optimizer::new(cfg.optimizer);
        let err = ckpt.restore_into(&mut model, &mut bank, &mut opt).unwrap_err();
        assert!(matches!(err, Error::UnknownTensor(_)));
    }
}
