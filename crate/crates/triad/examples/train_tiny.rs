//! A short end-to-end training run on a reduced corpus: every loss term of
//! the composite objective logged per step.
//!
//! ```bash
//! cargo run --release --example train_tiny
//! ```

use triad::config::RunConfig;
use triad::synth::{generate_dataset, SynthSpec};
use triad::trainer::Trainer;

fn main() -> triad::Result<()> {
    let dir = std::env::temp_dir().join("triad_example_tiny");
    let spec = SynthSpec {
        clips_per_triplet: 1,
        frames: 8,
        holdout_fraction: 0.0,
        ..SynthSpec::default()
    };
    generate_dataset(&spec, 3, &dir)?;

    let mut cfg = RunConfig::default();
    cfg.batch_size = 16;
    cfg.steps = 60;
    cfg.bank.setting_step = 10;
    cfg.optimizer.kind = triad::config::OptimizerKind::Adam;
    cfg.optimizer.learning_rate = 1e-3;
    cfg.data.dataset_dir = dir.display().to_string();

    let mut trainer = Trainer::new(cfg, &dir)?;
    println!("step   clip    ortho   l2      recomb  aux_s   aux_a   aux_o   total");
    for _ in 0..60 {
        let step = trainer.step;
        let l = trainer.train_step()?;
        if step % 10 == 0 || step == 59 {
            println!(
                "{step:>4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
                l.clip, l.sim, l.l2, l.recomb, l.aux_subject, l.aux_action, l.aux_object, l.total
            );
        }
    }
    println!("temperature after training: {:.4}", trainer.model.tau[[0]]);
    Ok(())
}
