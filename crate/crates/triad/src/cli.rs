//! Command-line interface: one binary, six subcommands, shared config
//! handling. Exit codes: 0 success, 1 runtime failure, 2 configuration
//! error. Every flag that overrides a config key names that key in its help
//! text.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{OptimizerKind, RunConfig};
use crate::curation::{
    filter_and_reannotate, read_records, summarize, write_records, AnnotationClassifier,
    OfflineOracle, RemoteClassifier,
};
use crate::error::{Error, Result};
use crate::eval::{compositional_eval, export_embeddings, probe_eval, retrieval_eval};
use crate::synth::{generate_dataset, Split, SynthSpec};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::gradcheck::{grad_check, Component};
use crate::trainer::{train, Trainer};

#[derive(Parser)]
#[command(
    name = "triad",
    version,
    about = "Temporal-difference video-text contrastive learning with subject/action/object disentanglement",
    propagate_version = true
)]
pub struct Cli {
    /// Run configuration file (TOML or JSON); omitted keys use defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Force single-threaded deterministic execution [config: modes.deterministic]
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic labeled corpus (clips + manifest)
    Synth {
        /// Output dataset directory [config: data.dataset_dir]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master generation seed [config: seeds.data]
        #[arg(long)]
        seed: Option<u64>,
        /// Clips rendered per (subject, action, object) triplet
        #[arg(long)]
        clips_per_triplet: Option<usize>,
        /// Fraction of triplets held out as test_unseen
        #[arg(long)]
        holdout: Option<f64>,
        /// Frames per clip
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Classify annotations, eliminate multi-action clips, re-annotate
    Curate {
        /// Input manifest (JSONL)
        #[arg(long)]
        input: PathBuf,
        /// Output curated manifest (JSONL)
        #[arg(long)]
        output: PathBuf,
        /// Use the shipped lexicon oracle instead of the remote classifier
        #[arg(long)]
        offline: bool,
        /// Maximum concurrent classification requests
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        /// Also write the corpus summary JSON here
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Train on a prepared dataset, writing metrics and checkpoints
    Train {
        /// Dataset directory [config: data.dataset_dir]
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory for checkpoints and metrics [config: data.out_dir]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of optimization steps [config: steps]
        #[arg(long)]
        steps: Option<usize>,
        /// Batch size [config: batch_size]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Learning rate [config: optimizer.learning_rate]
        #[arg(long)]
        lr: Option<f64>,
        /// Optimizer: sgd, momentum or adam [config: optimizer.kind]
        #[arg(long)]
        optimizer: Option<String>,
        /// Checkpoint every N steps, 0 = final only [config: data.checkpoint_interval]
        #[arg(long)]
        checkpoint_interval: Option<usize>,
        /// Model init seed [config: seeds.model]
        #[arg(long)]
        seed_model: Option<u64>,
        /// Batch/recombination sampling seed [config: seeds.sampling]
        #[arg(long)]
        seed_sampling: Option<u64>,
        /// Resume from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Retrieval, probe and compositional evaluation of a checkpoint
    Eval {
        /// Checkpoint to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory override [config: data.dataset_dir]
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Split for retrieval rankings
        #[arg(long, default_value = "test_seen")]
        split: String,
        /// Split for the leakage probes (needs >= 2 clips per class; the
        /// probe holds out its own 20% fold)
        #[arg(long, default_value = "train")]
        probe_split: String,
        /// Write the JSON report here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write an SVG bar chart of the leakage matrix
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences
    Gradcheck {
        /// One component (text_heads, temporal, fusion, attention, branches,
        /// classifiers, combiner, frozen); default checks all
        #[arg(long)]
        component: Option<String>,
        /// Finite-difference step
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Maximum allowed relative error
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Harness seed
        #[arg(long, default_value_t = 12345)]
        seed: u64,
    },
    /// Export per-record branch embeddings as JSONL
    Export {
        /// Checkpoint to embed with
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory override [config: data.dataset_dir]
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Restrict to one split (default: all records)
        #[arg(long)]
        split: Option<String>,
        /// Output JSONL path
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test_seen" => Split::TestSeen,
        "test_unseen" => Split::TestUnseen,
        other => {
            return Err(Error::Config(format!(
                "split: unknown value {other:?} (train, val, test_seen, test_unseen)"
            )))
        }
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.deterministic {
        cfg.modes.deterministic = true;
    }
    Ok(cfg)
}

/// Dispatch one invocation. Errors bubble up for exit-code mapping.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth {
            out,
            seed,
            clips_per_triplet,
            holdout,
            frames,
        } => {
            let mut spec = SynthSpec::default();
            if let Some(v) = clips_per_triplet {
                spec.clips_per_triplet = v;
            }
            if let Some(v) = holdout {
                spec.holdout_fraction = v;
            }
            if let Some(v) = frames {
                spec.frames = v;
            }
            spec.height = cfg.encoder.frame_height;
            spec.width = cfg.encoder.frame_width;
            let seed = seed.unwrap_or(cfg.seeds.data);
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.data.dataset_dir));
            let manifest = generate_dataset(&spec, seed, &out)?;
            let counts = |s: Split| manifest.records.iter().filter(|r| r.split == s).count();
            println!(
                "wrote {} clips to {} (train {}, val {}, test_seen {}, test_unseen {})",
                manifest.records.len(),
                out.display(),
                counts(Split::Train),
                counts(Split::Val),
                counts(Split::TestSeen),
                counts(Split::TestUnseen),
            );
            Ok(())
        }
        Command::Curate {
            input,
            output,
            offline,
            concurrency,
            summary,
        } => {
            let records = read_records(&input)?;
            let classifier: Box<dyn AnnotationClassifier> = if offline {
                Box::new(OfflineOracle)
            } else {
                Box::new(RemoteClassifier::from_env()?)
            };
            let curated = filter_and_reannotate(records, classifier.as_ref(), concurrency)?;
            write_records(&output, &curated)?;
            let s = summarize(&curated);
            let report = serde_json::json!({
                "task_definition": "distinct (action, object) pairs",
                "total_videos": s.total_videos,
                "unique_tasks": s.unique_tasks,
                "distinct_atomic_actions": s.distinct_atomic_actions,
                "total_frames": s.total_frames,
            });
            println!("{report}");
            if let Some(path) = summary {
                std::fs::write(path, format!("{report}\n"))?;
            }
            Ok(())
        }
        Command::Train {
            dataset,
            out,
            steps,
            batch_size,
            lr,
            optimizer,
            checkpoint_interval,
            seed_model,
            seed_sampling,
            resume,
        } => {
            if let Some(v) = dataset {
                cfg.data.dataset_dir = v.display().to_string();
            }
            if let Some(v) = out {
                cfg.data.out_dir = v.display().to_string();
            }
            if let Some(v) = steps {
                cfg.steps = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = lr {
                cfg.optimizer.learning_rate = v;
            }
            if let Some(v) = optimizer {
                cfg.optimizer.kind = match v.as_str() {
                    "sgd" => OptimizerKind::Sgd,
                    "momentum" => OptimizerKind::Momentum,
                    "adam" => OptimizerKind::Adam,
                    other => {
                        return Err(Error::Config(format!(
                            "optimizer.kind: unknown value {other:?}"
                        )))
                    }
                };
            }
            if let Some(v) = checkpoint_interval {
                cfg.data.checkpoint_interval = v;
            }
            if let Some(v) = seed_model {
                cfg.seeds.model = v;
            }
            if let Some(v) = seed_sampling {
                cfg.seeds.sampling = v;
            }
            cfg.validate()?;
            let outcome = train(&cfg, resume.as_deref())?;
            let last = outcome.history.last();
            println!(
                "trained {} steps; final total loss {}; checkpoint {}; metrics {}",
                outcome.history.len(),
                last.map(|l| format!("{:.4}", l.total)).unwrap_or_default(),
                outcome.final_checkpoint.display(),
                outcome.metrics_path.display(),
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            probe_split,
            out,
            svg,
        } => {
            let split = parse_split(&split)?;
            let probe_split = parse_split(&probe_split)?;
            let trainer = trainer_from_checkpoint(&checkpoint, dataset.as_deref())?;
            let (v2t, t2v) = retrieval_eval(&trainer, split)?;
            let leakage = probe_eval(&trainer, probe_split)?;
            let compositional = if trainer.data.indices_for(Split::TestUnseen).is_empty() {
                None
            } else {
                Some(compositional_eval(&trainer)?)
            };
            let report = serde_json::json!({
                "split": split.to_string(),
                "probe_split": probe_split.to_string(),
                "retrieval": [v2t, t2v],
                "leakage": leakage,
                "compositional": compositional.as_ref().map(|(a, b)| vec![a, b]),
            });
            println!(
                "video->text  recall@1 {:.3}  recall@5 {:.3}  median rank {:.1}  gallery {}",
                v2t.recall_at_1, v2t.recall_at_5, v2t.median_rank, v2t.gallery_size
            );
            println!(
                "text->video  recall@1 {:.3}  recall@5 {:.3}  median rank {:.1}  gallery {}",
                t2v.recall_at_1, t2v.recall_at_5, t2v.median_rank, t2v.gallery_size
            );
            print!("{}", leakage.text_table());
            if let Some((cv2t, _)) = &compositional {
                println!(
                    "compositional (test_unseen)  recall@1 {:.3}  gallery {}",
                    cv2t.recall_at_1, cv2t.gallery_size
                );
            }
            if let Some(path) = out {
                std::fs::write(path, format!("{report}\n"))?;
            }
            if let Some(path) = svg {
                std::fs::write(path, leakage.svg())?;
            }
            Ok(())
        }
        Command::Gradcheck {
            component,
            eps,
            tol,
            seed,
        } => {
            let component = component.map(|c| c.parse::<Component>()).transpose()?;
            let reports = grad_check(component, eps, tol, seed)?;
            let mut all_pass = true;
            for r in &reports {
                r.print();
                all_pass &= r.pass;
            }
            if all_pass {
                Ok(())
            } else {
                Err(Error::Parameter("gradient check failed".into()))
            }
        }
        Command::Export {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let split = split.as_deref().map(parse_split).transpose()?;
            let trainer = trainer_from_checkpoint(&checkpoint, dataset.as_deref())?;
            let lines = export_embeddings(&trainer, split)?;
            let mut body = lines.join("\n");
            body.push('\n');
            std::fs::write(&out, body)?;
            println!("wrote {} embeddings to {}", lines.len(), out.display());
            Ok(())
        }
    }
}

fn trainer_from_checkpoint(path: &Path, dataset: Option<&Path>) -> Result<Trainer> {
    let ckpt = Checkpoint::load(path)?;
    let mut cfg = ckpt.config.clone();
    if let Some(d) = dataset {
        cfg.data.dataset_dir = d.display().to_string();
    }
    let dataset_dir = PathBuf::from(&cfg.data.dataset_dir);
    Trainer::resume(cfg, &dataset_dir, &ckpt)
}

/// Entry point used by the binary; maps errors to process exit codes.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("configuration error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
