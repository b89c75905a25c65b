//! End-to-end pipeline contracts: determinism, frozen-ness, bank scheduling,
//! metrics logging, resume equality, and chance-level retrieval for an
//! untrained model.

use std::path::Path;

use triad::config::{OptimizerKind, RunConfig};
use triad::eval::{probe_eval, retrieval_eval};
use triad::synth::{generate_dataset, Split, SynthSpec};
use triad::trainer::checkpoint::Checkpoint;
use triad::trainer::{train, Trainer};

fn small_spec() -> SynthSpec {
    SynthSpec {
        clips_per_triplet: 2,
        frames: 8,
        height: 16,
        width: 16,
        holdout_fraction: 0.1,
        ..SynthSpec::default()
    }
}

fn small_cfg(dataset: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dims.d = 32;
    cfg.dims.d_t = 32;
    cfg.dims.d_b = 16;
    cfg.dims.d_v = 32;
    cfg.sampled_frames = 8;
    cfg.batch_size = 8;
    cfg.steps = 12;
    cfg.temporal.layers = 1;
    cfg.bank.setting_step = 5;
    cfg.bank.recomb_samples = 8;
    cfg.encoder.frame_height = 16;
    cfg.encoder.frame_width = 16;
    cfg.data.dataset_dir = dataset.display().to_string();
    cfg
}

fn make_dataset(dir: &Path) {
    generate_dataset(&small_spec(), 11, dir).unwrap();
}

#[test]
fn zero_learning_rate_freezes_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let mut cfg = small_cfg(dir.path());
    cfg.optimizer.learning_rate = 0.0;
    cfg.optimizer.weight_decay = 0.0;
    let mut trainer = Trainer::new(cfg, dir.path()).unwrap();
    let batch = trainer.batch_for_step(0);
    let a = trainer.train_step_on(&batch, 0).unwrap();
    let b = trainer.train_step_on(&batch, 0).unwrap();
    assert_eq!(a, b, "no update means identical loss breakdowns");
}

#[test]
fn frozen_encoders_never_change_during_training() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let mut trainer = Trainer::new(small_cfg(dir.path()), dir.path()).unwrap();
    let before = trainer.frozen.fingerprint();
    for _ in 0..6 {
        trainer.train_step().unwrap();
    }
    assert_eq!(trainer.frozen.fingerprint(), before);
}

#[test]
fn loss_decreases_over_a_seeded_run() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let mut cfg = small_cfg(dir.path());
    cfg.steps = 200;
    cfg.optimizer.kind = OptimizerKind::Adam;
    cfg.optimizer.learning_rate = 1e-3;
    let mut trainer = Trainer::new(cfg, dir.path()).unwrap();
    let first = trainer.train_step().unwrap();
    let mut last = first;
    for _ in 1..200 {
        last = trainer.train_step().unwrap();
    }
    assert!(
        last.total < first.total,
        "total loss after 200 steps ({}) should be below step 1 ({})",
        last.total,
        first.total
    );
}

#[test]
fn bank_updates_follow_the_schedule_exactly() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let mut cfg = small_cfg(dir.path());
    cfg.steps = 12;
    cfg.bank.setting_step = 5;
    let mut trainer = Trainer::new(cfg, dir.path()).unwrap();
    let mut updates = 0usize;
    for step in 0..12 {
        let before = trainer.bank.fingerprint();
        trainer.train_step().unwrap();
        if trainer.bank.fingerprint() != before {
            updates += 1;
            assert_eq!(step % 5, 0, "bank changed off schedule at step {step}");
        }
    }
    // steps 0, 5, 10 -> floor((12-1)/5) + 1 = 3
    assert_eq!(updates, (12 - 1) / 5 + 1);
    assert_eq!(trainer.bank.last_update_step, Some(10));
}

#[test]
fn bank_receives_no_gradient_from_the_backward_pass() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let mut cfg = small_cfg(dir.path());
    cfg.bank.setting_step = 1000; // never updates after warm fill
    let mut trainer = Trainer::new(cfg, dir.path()).unwrap();
    // step 0 hits the schedule (0 % n == 0) and fills slots
    trainer.train_step().unwrap();
    assert!(trainer.bank.ready());
    let fingerprint = trainer.bank.fingerprint();
    for _ in 0..4 {
        trainer.train_step().unwrap();
    }
    assert_eq!(
        trainer.bank.fingerprint(),
        fingerprint,
        "backward passes and optimizer updates must not mutate bank tables"
    );
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());

    // run A: 12 uninterrupted steps
    let mut cfg_a = small_cfg(dir.path());
    cfg_a.data.out_dir = dir.path().join("run_a").display().to_string();
    let out_a = train(&cfg_a, None).unwrap();

    // run B: identical config, fresh process state
    let mut cfg_b = small_cfg(dir.path());
    cfg_b.data.out_dir = dir.path().join("run_b").display().to_string();
    let out_b = train(&cfg_b, None).unwrap();

    let ck_a = Checkpoint::load(&out_a.final_checkpoint).unwrap();
    let ck_b = Checkpoint::load(&out_b.final_checkpoint).unwrap();
    let t_a = Trainer::resume(cfg_a.clone(), dir.path(), &ck_a).unwrap();
    let t_b = Trainer::resume(cfg_b.clone(), dir.path(), &ck_b).unwrap();
    assert_eq!(
        t_a.model.fingerprint(),
        t_b.model.fingerprint(),
        "same seeds and config must give identical final parameters"
    );

    // identical metrics, ignoring wall time
    let lines = |p: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    assert_eq!(lines(&out_a.metrics_path), lines(&out_b.metrics_path));

    // run C: 6 steps, checkpoint, resume for 6 more -> equals run A
    let mut cfg_c = small_cfg(dir.path());
    cfg_c.steps = 6;
    cfg_c.data.out_dir = dir.path().join("run_c").display().to_string();
    let out_c = train(&cfg_c, None).unwrap();
    let mut cfg_c2 = small_cfg(dir.path());
    cfg_c2.steps = 12;
    cfg_c2.data.out_dir = dir.path().join("run_c2").display().to_string();
    let out_c2 = train(&cfg_c2, Some(&out_c.final_checkpoint)).unwrap();
    let ck_c2 = Checkpoint::load(&out_c2.final_checkpoint).unwrap();
    let t_c2 = Trainer::resume(cfg_c2.clone(), dir.path(), &ck_c2).unwrap();
    assert_eq!(
        t_c2.model.fingerprint(),
        t_a.model.fingerprint(),
        "resumed training must match the uninterrupted run"
    );
    assert_eq!(ck_c2.step, 12);
}

#[test]
fn single_step_run_logs_exactly_one_line() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let mut cfg = small_cfg(dir.path());
    cfg.steps = 1;
    cfg.data.out_dir = dir.path().join("one").display().to_string();
    let out = train(&cfg, None).unwrap();
    let text = std::fs::read_to_string(&out.metrics_path).unwrap();
    assert_eq!(text.lines().count(), 1);
    let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in [
        "step",
        "clip",
        "sim",
        "l2",
        "recomb",
        "aux_subject",
        "aux_action",
        "aux_object",
        "total",
        "wall_ms",
    ] {
        assert!(line.get(key).is_some(), "metrics line missing {key}");
    }
}

#[test]
fn untrained_model_retrieves_at_chance_and_probes_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let trainer = Trainer::new(small_cfg(dir.path()), dir.path()).unwrap();
    let (v2t, _) = retrieval_eval(&trainer, Split::Train).unwrap();
    let chance = 1.0 / v2t.gallery_size as f64;
    assert!(
        v2t.recall_at_1 <= 3.0 * chance,
        "untrained recall@1 {} above 3x chance {}",
        v2t.recall_at_1,
        3.0 * chance
    );
    let a = probe_eval(&trainer, Split::Train).unwrap();
    let b = probe_eval(&trainer, Split::Train).unwrap();
    assert_eq!(a, b, "probe results must be deterministic given the seed");
}

#[test]
fn breakdown_total_recombines_from_parts() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let mut trainer = Trainer::new(small_cfg(dir.path()), dir.path()).unwrap();
    for _ in 0..6 {
        let b = trainer.train_step().unwrap();
        b.check_consistent(&trainer.cfg.loss).unwrap();
    }
}

#[test]
fn divergence_names_the_offending_term() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path());
    let mut cfg = small_cfg(dir.path());
    cfg.optimizer.learning_rate = 1e9; // guaranteed blow-up
    let mut trainer = Trainer::new(cfg, dir.path()).unwrap();
    let mut saw_divergence = false;
    for _ in 0..6 {
        match trainer.train_step() {
            Ok(_) => {}
            Err(triad::Error::Divergence { term, step }) => {
                assert!(!term.is_empty());
                let _ = step;
                saw_divergence = true;
                break;
            }
            Err(e) => panic!("expected divergence, got {e}"),
        }
    }
    assert!(saw_divergence, "lr=1e9 should produce a non-finite loss");
}
