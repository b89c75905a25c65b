//! Walk the visual path by hand: render a clip, sample and encode frames
//! with the frozen encoder, take consecutive feature differences, run the
//! temporal transformer, and demonstrate the background-shift invariance of
//! the difference path.
//!
//! ```bash
//! cargo run --example temporal_features
//! ```

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triad::autodiff::nn::Binder;
use triad::autodiff::Tape;
use triad::config::RunConfig;
use triad::encoders::FrozenVisualEncoder;
use triad::synth::{render::render_video, SynthSpec, Triplet};
use triad::temporal::{
    extract_last, frame_diffs, start_end_diff, TemporalConfig, TemporalEncoder,
};

fn main() -> triad::Result<()> {
    let cfg = RunConfig::default();
    let spec = SynthSpec::default();
    let clip = render_video(Triplet::new(0, 5, 2), 42, &spec, "demo")?;
    println!("rendered {:?}: {}", clip.caption, clip.video_id);

    let encoder = FrozenVisualEncoder::<f64>::new(&cfg.encoder, cfg.dims.d, cfg.seeds.encoder);
    let features = encoder.encode_video(&clip, cfg.sampled_frames)?;
    println!(
        "frame features: {:?} (n = {}, d = {})",
        features.shape(),
        cfg.sampled_frames,
        cfg.dims.d
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.model);
    let temporal = TemporalEncoder::<f64>::new(
        TemporalConfig {
            d_model: cfg.dims.d,
            heads: cfg.temporal.heads,
            layers: cfg.temporal.layers,
            max_relative_distance: cfg.temporal.max_relative_distance,
            d_v: cfg.dims.d_v,
        },
        &mut rng,
    )?;

    let batched = features.clone().insert_axis(ndarray::Axis(0)).into_dyn();
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let vars = temporal.bind(&mut binder, "temporal");

    let frames = tape.leaf(batched.clone());
    let diffs = frame_diffs(frames)?;
    let encoded = vars.forward(diffs);
    let summary = extract_last(encoded);
    let span = start_end_diff(frames)?;
    println!("difference sequence: {:?}", diffs.dims());
    println!("temporal summary vector: {:?}", summary.dims());
    println!("start-end difference:   {:?}", span.dims());

    // add one constant vector to every frame feature: the difference path
    // cannot see it
    let shift = Array3::from_shape_fn((1, 1, cfg.dims.d), |(_, _, k)| (k as f64) * 0.37 - 3.0);
    let shifted = &batched + &shift.into_dyn();
    let shifted_summary = extract_last(vars.forward(frame_diffs(tape.leaf(shifted))?));
    let max_dev = summary
        .value()
        .iter()
        .zip(shifted_summary.value().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("max deviation after a constant background shift: {max_dev:.2e}");
    Ok(())
}
