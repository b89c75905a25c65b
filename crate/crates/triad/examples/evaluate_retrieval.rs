//! Train briefly, then run the evaluation suite: cross-modal retrieval in
//! both directions, the per-branch leakage matrix, and compositional
//! generalization on held-out triplets.
//!
//! ```bash
//! cargo run --release --example evaluate_retrieval
//! ```

use triad::config::RunConfig;
use triad::eval::{compositional_eval, probe_eval, retrieval_eval};
use triad::synth::{generate_dataset, Split, SynthSpec};
use triad::trainer::Trainer;

fn main() -> triad::Result<()> {
    let dir = std::env::temp_dir().join("triad_example_eval");
    generate_dataset(&SynthSpec::default(), 7, &dir)?;

    let mut cfg = RunConfig::default();
    cfg.steps = 400;
    cfg.optimizer.kind = triad::config::OptimizerKind::Adam;
    cfg.optimizer.learning_rate = 1e-3;
    cfg.data.dataset_dir = dir.display().to_string();

    let mut trainer = Trainer::new(cfg, &dir)?;
    for _ in 0..400 {
        trainer.train_step()?;
    }

    let (v2t, t2v) = retrieval_eval(&trainer, Split::TestSeen)?;
    println!(
        "video->text: recall@1 {:.3}, recall@5 {:.3}, median rank {:.1} (gallery {}, chance {:.3})",
        v2t.recall_at_1,
        v2t.recall_at_5,
        v2t.median_rank,
        v2t.gallery_size,
        1.0 / v2t.gallery_size as f64
    );
    println!(
        "text->video: recall@1 {:.3}, recall@5 {:.3}, median rank {:.1}",
        t2v.recall_at_1, t2v.recall_at_5, t2v.median_rank
    );

    let leakage = probe_eval(&trainer, Split::Train)?;
    print!("{}", leakage.text_table());

    let (cv2t, _) = compositional_eval(&trainer)?;
    println!(
        "compositional retrieval on unseen triplets: recall@1 {:.3} (gallery {})",
        cv2t.recall_at_1, cv2t.gallery_size
    );
    Ok(())
}
