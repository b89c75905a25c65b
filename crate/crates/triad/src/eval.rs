//! Desk-scale evaluations: cross-modal retrieval, per-branch linear probing
//! with a leakage matrix, and compositional generalization on unseen
//! triplets.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{make_caption, Split, Triplet};
use crate::trainer::Trainer;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalReport {
    pub direction: String,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub median_rank: f64,
    pub gallery_size: usize,
}

/// Probe accuracies: rows are labels (subject, action, object), columns are
/// the branch features the probe reads.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LeakageMatrix {
    pub accuracy: [[f64; 3]; 3],
}

pub const FACTORS: [&str; 3] = ["subject", "action", "object"];

impl LeakageMatrix {
    pub fn text_table(&self) -> String {
        let mut out = String::from("label \\ branch   subject   action    object\n");
        for (i, label) in FACTORS.iter().enumerate() {
            out.push_str(&format!(
                "{label:<14} {:>9.3} {:>9.3} {:>9.3}\n",
                self.accuracy[i][0], self.accuracy[i][1], self.accuracy[i][2]
            ));
        }
        out
    }

    /// Simple grouped-bar SVG of the nine accuracies.
    pub fn svg(&self) -> String {
        let width = 560;
        let height = 300;
        let chart_h = 220.0;
        let group_w = 160.0;
        let bar_w = 40.0;
        let colors = ["#4c78a8", "#f58518", "#54a24b"];
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
             <style>text{{font-family:sans-serif;font-size:12px}}</style>\n\
             <text x=\"10\" y=\"16\">probe accuracy by label row (bars: branch read)</text>\n"
        );
        for (row, label) in FACTORS.iter().enumerate() {
            let gx = 30.0 + row as f64 * group_w;
            for (col, _) in FACTORS.iter().enumerate() {
                let acc = self.accuracy[row][col];
                let h = acc.max(0.0).min(1.0) * chart_h;
                let x = gx + col as f64 * (bar_w + 6.0);
                let y = 40.0 + (chart_h - h);
                s.push_str(&format!(
                    "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w}\" height=\"{h:.1}\" fill=\"{}\"/>\n\
                     <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.2}</text>\n",
                    colors[col],
                    x + bar_w / 2.0,
                    y - 4.0,
                    acc
                ));
            }
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
                gx + 1.5 * bar_w + 6.0,
                height - 18
            ));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn l2_normalize_rows(m: &Array2<f32>) -> Array2<f32> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Rank positions (1-based) of the correct gallery entries under cosine
/// similarity, for each query row.
fn ranks_of_correct(
    queries: &Array2<f32>,
    gallery: &Array2<f32>,
    correct: impl Fn(usize, usize) -> bool,
) -> Vec<usize> {
    let q = l2_normalize_rows(queries);
    let g = l2_normalize_rows(gallery);
    let sims = q.dot(&g.t());
    let mut ranks = Vec::with_capacity(sims.nrows());
    for (qi, row) in sims.rows().into_iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let rank = order
            .iter()
            .position(|&gi| correct(qi, gi))
            .map(|p| p + 1)
            .unwrap_or(row.len());
        ranks.push(rank);
    }
    ranks
}

fn report_from_ranks(direction: &str, ranks: &[usize], gallery_size: usize) -> RetrievalReport {
    let n = ranks.len() as f64;
    let recall_at = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let median = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2] as f64
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) as f64 / 2.0
    };
    RetrievalReport {
        direction: direction.to_string(),
        recall_at_1: recall_at(1),
        recall_at_5: recall_at(5),
        median_rank: median,
        gallery_size,
    }
}

/// Core ranking protocol on explicit features: the text gallery holds one
/// caption per unique triplet; video->text ranks captions per clip,
/// text->video scores each caption by its best-ranked matching clip.
pub fn rank_features(
    video: &Array2<f32>,
    video_triplets: &[Triplet],
    text: &Array2<f32>,
    text_triplets: &[Triplet],
) -> (RetrievalReport, RetrievalReport) {
    let v2t_ranks = ranks_of_correct(video, text, |qi, gi| {
        video_triplets[qi] == text_triplets[gi]
    });
    let v2t = report_from_ranks("video->text", &v2t_ranks, text_triplets.len());
    let t2v_ranks = ranks_of_correct(text, video, |qi, gi| {
        text_triplets[qi] == video_triplets[gi]
    });
    let t2v = report_from_ranks("text->video", &t2v_ranks, video_triplets.len());
    (v2t, t2v)
}

/// Retrieval over one split of the trainer's dataset.
pub fn retrieval_eval(trainer: &Trainer, split: Split) -> Result<(RetrievalReport, RetrievalReport)> {
    let indices = trainer.data.indices_for(split);
    if indices.is_empty() {
        return Err(Error::Parameter(format!("split {split} is empty")));
    }
    let video_triplets: Vec<Triplet> = indices.iter().map(|&i| trainer.data.labels[i]).collect();
    let unique: Vec<Triplet> = {
        let set: BTreeSet<Triplet> = video_triplets.iter().copied().collect();
        set.into_iter().collect()
    };
    let captions: Vec<String> = unique
        .iter()
        .map(|&t| make_caption(t, &trainer.data.manifest.vocab))
        .collect::<Result<_>>()?;
    let video = trainer.embed_videos(&indices)?;
    let text = trainer.embed_captions(&captions)?;
    Ok(rank_features(&video, &video_triplets, &text, &unique))
}

/// Same ranking protocol restricted to the unseen-triplet gallery.
pub fn compositional_eval(trainer: &Trainer) -> Result<(RetrievalReport, RetrievalReport)> {
    let report = retrieval_eval(trainer, Split::TestUnseen)?;
    Ok(report)
}

/// Multinomial logistic probe: full-batch gradient descent on standardized
/// features with a stratified 80/20 fold. Deterministic given the seed.
fn linear_probe_accuracy(
    features: &Array2<f32>,
    labels: &[usize],
    classes: usize,
    seed: u64,
) -> Result<f64> {
    let n = features.nrows();
    let d = features.ncols();
    assert_eq!(n, labels.len());

    // stratified fold: per class, 80% train / 20% test, at least one each
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if members.len() < 2 {
            return Err(Error::InsufficientData {
                class: format!("class {c}"),
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * 0.2).round().max(1.0) as usize;
        let n_test = n_test.min(members.len() - 1);
        test_idx.extend_from_slice(&members[..n_test]);
        train_idx.extend_from_slice(&members[n_test..]);
    }

    // standardize on the train fold
    let mut mean = Array1::<f64>::zeros(d);
    for &i in &train_idx {
        for j in 0..d {
            mean[j] += features[[i, j]] as f64;
        }
    }
    mean.mapv_inplace(|v| v / train_idx.len() as f64);
    let mut std = Array1::<f64>::zeros(d);
    for &i in &train_idx {
        for j in 0..d {
            let c = features[[i, j]] as f64 - mean[j];
            std[j] += c * c;
        }
    }
    std.mapv_inplace(|v| (v / train_idx.len() as f64).sqrt() + 1e-6);

    let standardized = |i: usize| -> Array1<f64> {
        Array1::from_iter((0..d).map(|j| (features[[i, j]] as f64 - mean[j]) / std[j]))
    };

    // softmax regression, full-batch GD
    let mut w = Array2::<f64>::zeros((d, classes));
    let mut b = Array1::<f64>::zeros(classes);
    let x_train: Vec<Array1<f64>> = train_idx.iter().map(|&i| standardized(i)).collect();
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let m = x_train.len() as f64;
    for _ in 0..300 {
        let mut gw = Array2::<f64>::zeros((d, classes));
        let mut gb = Array1::<f64>::zeros(classes);
        for (x, &y) in x_train.iter().zip(&y_train) {
            let mut logits: Array1<f64> = x.dot(&w) + &b;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            logits.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = logits.sum();
            logits.mapv_inplace(|v| v / sum);
            logits[y] -= 1.0;
            for j in 0..d {
                for c in 0..classes {
                    gw[[j, c]] += x[j] * logits[c];
                }
            }
            gb += &logits;
        }
        gw.mapv_inplace(|v| v / m);
        gb.mapv_inplace(|v| v / m);
        w -= &gw.mapv(|v| v * 0.5);
        b -= &gb.mapv(|v| v * 0.5);
    }

    let mut correct = 0usize;
    for &i in &test_idx {
        let logits: Array1<f64> = standardized(i).dot(&w) + &b;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap();
        if pred == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}

/// Fit one probe per (label, branch) cell on frozen features.
pub fn probe_eval(trainer: &Trainer, split: Split) -> Result<LeakageMatrix> {
    let indices = trainer.data.indices_for(split);
    if indices.is_empty() {
        return Err(Error::Parameter(format!("split {split} is empty")));
    }
    let (subj_f, act_f, obj_f, _) = trainer.embed_records(&indices)?;
    let triplets: Vec<Triplet> = indices.iter().map(|&i| trainer.data.labels[i]).collect();
    let (ks, ka, ko) = trainer.data.manifest.vocab.sizes();

    let label_sets: [(Vec<usize>, usize); 3] = [
        (triplets.iter().map(|t| t.subject).collect(), ks),
        (triplets.iter().map(|t| t.action).collect(), ka),
        (triplets.iter().map(|t| t.object).collect(), ko),
    ];
    let branches = [&subj_f, &act_f, &obj_f];

    let mut accuracy = [[0.0; 3]; 3];
    for (row, (labels, classes)) in label_sets.iter().enumerate() {
        for (col, feats) in branches.iter().enumerate() {
            accuracy[row][col] = linear_probe_accuracy(
                feats,
                labels,
                *classes,
                crate::synth::derive_seed(trainer.cfg.seeds.probe, &[row as u64, col as u64]),
            )?;
        }
    }
    Ok(LeakageMatrix { accuracy })
}

/// Export per-record branch embeddings as JSONL lines.
pub fn export_embeddings(trainer: &Trainer, split: Option<Split>) -> Result<Vec<String>> {
    let indices: Vec<usize> = match split {
        Some(s) => trainer.data.indices_for(s),
        None => (0..trainer.data.manifest.records.len()).collect(),
    };
    if indices.is_empty() {
        return Err(Error::Parameter("no records to export".into()));
    }
    let (s, a, o, _) = trainer.embed_records(&indices)?;
    let mut lines = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        let rec = &trainer.data.manifest.records[i];
        let line = serde_json::json!({
            "video_id": rec.video_id,
            "split": rec.split,
            "subject": s.row(row).to_vec(),
            "action": a.row(row).to_vec(),
            "object": o.row(row).to_vec(),
        });
        lines.push(line.to_string());
    }
    Ok(lines)
}
