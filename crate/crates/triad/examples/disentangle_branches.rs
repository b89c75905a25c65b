//! The orthogonality constraint in action: minimize the squared pairwise
//! cosine over three free vector batches and watch the branches decorrelate.
//!
//! ```bash
//! cargo run --release --example disentangle_branches
//! ```

use ndarray::ArrayD;
use triad::autodiff::nn::randn;
use triad::autodiff::Tape;
use triad::config::OrthogonalityMode;
use triad::disentangle::{l2_penalty, orthogonality_loss, BranchFeatures};

fn max_abs_cosine(vecs: &[ArrayD<f64>; 3]) -> f64 {
    let cos = |a: &ArrayD<f64>, b: &ArrayD<f64>, row: usize| {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for k in 0..a.shape()[1] {
            dot += a[[row, k]] * b[[row, k]];
            na += a[[row, k]] * a[[row, k]];
            nb += b[[row, k]] * b[[row, k]];
        }
        dot / (na.sqrt() * nb.sqrt())
    };
    let mut worst = 0.0f64;
    for row in 0..vecs[0].shape()[0] {
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            worst = worst.max(cos(&vecs[a], &vecs[b], row).abs());
        }
    }
    worst
}

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut vecs: [ArrayD<f64>; 3] = [
        randn::<f64>(&[8, 16], 1.0, &mut rng),
        randn::<f64>(&[8, 16], 1.0, &mut rng),
        randn::<f64>(&[8, 16], 1.0, &mut rng),
    ];
    println!("initial max pairwise |cos|: {:.4}", max_abs_cosine(&vecs));

    let lr = 0.1;
    for step in 0..=500 {
        let tape = Tape::new();
        let branches = BranchFeatures {
            subject: tape.leaf(vecs[0].clone()),
            action: tape.leaf(vecs[1].clone()),
            object: tape.leaf(vecs[2].clone()),
        };
        let loss = orthogonality_loss(&branches, OrthogonalityMode::Squared).unwrap();
        if step % 100 == 0 {
            println!(
                "step {step:>4}: loss {:.6}, max |cos| {:.4}, magnitude penalty {:.4}",
                loss.scalar(),
                max_abs_cosine(&vecs),
                l2_penalty(&branches).scalar()
            );
        }
        let grads = tape.backward(loss);
        for (v, var) in vecs.iter_mut().zip([
            branches.subject,
            branches.action,
            branches.object,
        ]) {
            *v = &*v - &grads.wrt(var).mapv(|g| g * lr);
        }
    }
    println!("final max pairwise |cos|: {:.6}", max_abs_cosine(&vecs));
}
