//! Frozen per-frame visual encoder, frozen base text encoder, frame
//! sampling, and the trainable text branch heads.
//!
//! The frozen encoders are deterministic functions of a seed: a fixed
//! Gaussian projection over an average-pooled frame, and hashed token
//! embeddings with mean pooling. Their parameters never enter any optimizer;
//! training touches only the three text branch heads here.

use ndarray::{Array1, Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::nn::{randn, Binder, Mlp2, Mlp2Vars, Params};
use crate::autodiff::{Scalar, Var};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::synth::VideoSample;

/// Pooled spatial grid per frame: 8x8 over 4 channels = 256 inputs.
const POOL_GRID: usize = 8;
const POOLED_LEN: usize = POOL_GRID * POOL_GRID * 4;
const NORM_EPS: f64 = 1e-5;

/// Uniform frame sampling indices: `round(j * (T-1) / (n-1))` for
/// `j = 0..n-1`. The first and last frames are always included; short clips
/// repeat indices.
pub fn sample_indices(t_len: usize, n: usize) -> Result<Vec<usize>> {
    if t_len == 0 {
        return Err(Error::EmptyVideo);
    }
    if n < 2 {
        return Err(Error::Parameter(format!("sample count {n} must be >= 2")));
    }
    Ok((0..n)
        .map(|j| {
            let pos = j as f64 * (t_len as f64 - 1.0) / (n as f64 - 1.0);
            pos.round() as usize
        })
        .collect())
}

/// Sampled frame subsequence of a clip as an owned `(n, H, W, 4)` tensor.
pub fn sample_frames(video: &VideoSample, n: usize) -> Result<ndarray::Array4<f32>> {
    let idx = sample_indices(video.frames.shape()[0], n)?;
    let views: Vec<_> = idx
        .iter()
        .map(|&i| video.frames.index_axis(ndarray::Axis(0), i))
        .collect();
    Ok(ndarray::stack(ndarray::Axis(0), &views).expect("frame shapes agree"))
}

/// Subtract the mean and divide by (population std + eps), per vector.
fn normalize_vector<T: Scalar>(mut v: Array1<T>) -> Array1<T> {
    let n = T::from_usize(v.len()).unwrap();
    let mean = v.sum() / n;
    v.mapv_inplace(|x| x - mean);
    let std = (v.mapv(|x| x * x).sum() / n).sqrt();
    let denom = std + T::of_f64(NORM_EPS);
    v.mapv_inplace(|x| x / denom);
    v
}

/// Frozen visual encoder: average-pool to 8x8x4, flatten, project through a
/// seeded Gaussian matrix, normalize. Parameters are fixed at construction.
pub struct FrozenVisualEncoder<T> {
    projection: Array2<T>,
    height: usize,
    width: usize,
}

impl<T: Scalar> FrozenVisualEncoder<T> {
    pub fn new(cfg: &EncoderConfig, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = randn::<T>(&[POOLED_LEN, d], 1.0 / (POOLED_LEN as f64).sqrt(), &mut rng)
            .into_dimensionality()
            .unwrap();
        FrozenVisualEncoder {
            projection,
            height: cfg.frame_height,
            width: cfg.frame_width,
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.shape()[1]
    }

    /// Encode one `(H, W, 4)` frame to a `d` vector.
    pub fn encode_frame(&self, frame: ArrayView3<'_, f32>) -> Result<Array1<T>> {
        let (h, w, c) = frame.dim();
        if h != self.height || w != self.width || c != 4 {
            return Err(Error::Shape {
                expected: format!("({}, {}, 4)", self.height, self.width),
                got: format!("({h}, {w}, {c})"),
            });
        }
        let mut pooled = Array1::<T>::zeros(POOLED_LEN);
        for gy in 0..POOL_GRID {
            let y0 = gy * h / POOL_GRID;
            let y1 = (gy + 1) * h / POOL_GRID;
            for gx in 0..POOL_GRID {
                let x0 = gx * w / POOL_GRID;
                let x1 = (gx + 1) * w / POOL_GRID;
                let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for ch in 0..4 {
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc = acc + T::of_f64(frame[[y, x, ch]] as f64);
                        }
                    }
                    pooled[(gy * POOL_GRID + gx) * 4 + ch] = acc / count;
                }
            }
        }
        Ok(normalize_vector(pooled.dot(&self.projection)))
    }

    /// Sampled-and-encoded clip: `(n, d)` feature sequence.
    pub fn encode_video(&self, video: &VideoSample, n: usize) -> Result<Array2<T>> {
        let idx = sample_indices(video.frames.shape()[0], n)?;
        let mut out = Array2::zeros((n, self.dim()));
        for (row, &i) in idx.iter().enumerate() {
            let f = self.encode_frame(video.frames.index_axis(ndarray::Axis(0), i))?;
            out.row_mut(row).assign(&f);
        }
        Ok(out)
    }

    /// Hash of the frozen parameters; training must never change it.
    pub fn fingerprint(&self) -> String {
        fingerprint_array(self.projection.iter())
    }
}

/// Frozen text encoder: lowercase alphanumeric tokenization, tokens hashed
/// into a seeded embedding table, mean-pooled, normalized.
pub struct FrozenTextEncoder<T> {
    table: Array2<T>,
}

impl<T: Scalar> FrozenTextEncoder<T> {
    pub fn new(cfg: &EncoderConfig, d_t: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e00);
        let table = randn::<T>(&[cfg.vocab_hash_size, d_t], 1.0, &mut rng)
            .into_dimensionality()
            .unwrap();
        FrozenTextEncoder { table }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn encode_text(&self, text: &str) -> Result<Array1<T>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::InvalidText(format!(
                "no tokens in {:?}",
                text.chars().take(40).collect::<String>()
            )));
        }
        let rows = self.table.shape()[0] as u64;
        let mut acc = Array1::<T>::zeros(self.dim());
        for tok in &tokens {
            let row = (fnv1a(tok) % rows) as usize;
            acc = acc + self.table.row(row);
        }
        let n = T::from_usize(tokens.len()).unwrap();
        Ok(normalize_vector(acc.mapv(|x| x / n)))
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_array(self.table.iter())
    }
}

/// Lowercase alphanumeric runs; punctuation and repeated whitespace vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

/// FNV-1a, stable across runs and platforms.
fn fnv1a(s: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

pub(crate) fn fingerprint_array<'a, T: Scalar + 'a>(
    values: impl Iterator<Item = &'a T>,
) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.as_f64().to_le_bytes());
    }
    hex::encode(&hasher.finalize()[..16])
}

/// The three trainable text branch heads: independent 2-layer MLPs from the
/// frozen base vector to branch space, no weight sharing.
#[derive(Clone)]
pub struct TextBranchHeads<T> {
    pub subject: Mlp2<T>,
    pub action: Mlp2<T>,
    pub object: Mlp2<T>,
}

impl<T: Scalar> TextBranchHeads<T> {
    pub fn new(d_t: usize, d_b: usize, rng: &mut ChaCha8Rng) -> Self {
        TextBranchHeads {
            subject: Mlp2::new(d_t, d_t, d_b, rng),
            action: Mlp2::new(d_t, d_t, d_b, rng),
            object: Mlp2::new(d_t, d_t, d_b, rng),
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t, T>, name: &str) -> TextBranchHeadVars<'t, T> {
        TextBranchHeadVars {
            subject: self.subject.bind(binder, &format!("{name}.subject")),
            action: self.action.bind(binder, &format!("{name}.action")),
            object: self.object.bind(binder, &format!("{name}.object")),
        }
    }
}

impl<T: Scalar> Params<T> for TextBranchHeads<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ndarray::ArrayD<T>, bool)) {
        self.subject.visit(&format!("{prefix}.subject"), f);
        self.action.visit(&format!("{prefix}.action"), f);
        self.object.visit(&format!("{prefix}.object"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<T>, bool)) {
        self.subject.visit_mut(&format!("{prefix}.subject"), f);
        self.action.visit_mut(&format!("{prefix}.action"), f);
        self.object.visit_mut(&format!("{prefix}.object"), f);
    }
}

pub struct TextBranchHeadVars<'t, T: Scalar> {
    pub subject: Mlp2Vars<'t, T>,
    pub action: Mlp2Vars<'t, T>,
    pub object: Mlp2Vars<'t, T>,
}

impl<'t, T: Scalar> TextBranchHeadVars<'t, T> {
    /// Base vectors `(N, d_t)` to three branch matrices `(N, d_b)`.
    pub fn forward(&self, base: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>, Var<'t, T>) {
        (
            self.subject.forward(base),
            self.action.forward(base),
            self.object.forward(base),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderConfig;
    use crate::synth::{render::render_video, SynthSpec, Triplet};
    use ndarray::Array3;

    #[test]
    fn sampling_formula_matches_hand_evaluation() {
        assert_eq!(sample_indices(16, 16).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(
            sample_indices(31, 16).unwrap(),
            (0..16).map(|j| 2 * j).collect::<Vec<_>>()
        );
        let short = sample_indices(5, 16).unwrap();
        assert_eq!(short.first(), Some(&0));
        assert_eq!(short.last(), Some(&4));
        for v in 0..5 {
            assert!(short.contains(&v), "index {v} missing from {short:?}");
        }
        assert!(matches!(sample_indices(0, 16), Err(Error::EmptyVideo)));
    }

    #[test]
    fn frame_encoding_is_frozen_and_normalized() {
        let enc = FrozenVisualEncoder::<f64>::new(&EncoderConfig::default(), 64, 17);
        let frame = Array3::from_shape_fn((32, 32, 4), |(y, x, c)| {
            ((y * 31 + x * 7 + c) % 97) as f32 / 97.0
        });
        let a = enc.encode_frame(frame.view()).unwrap();
        let b = enc.encode_frame(frame.view()).unwrap();
        assert_eq!(a, b);
        let mean = a.sum() / a.len() as f64;
        assert!(mean.abs() < 1e-6, "post-normalization mean {mean}");
    }

    #[test]
    fn single_pooled_cell_difference_changes_the_vector() {
        let enc = FrozenVisualEncoder::<f64>::new(&EncoderConfig::default(), 64, 17);
        let base = Array3::from_elem((32, 32, 4), 0.25f32);
        let mut tweaked = base.clone();
        tweaked[[0, 0, 0]] = 0.9;
        let a = enc.encode_frame(base.view()).unwrap();
        let b = enc.encode_frame(tweaked.view()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn frame_shape_mismatch_is_reported() {
        let enc = FrozenVisualEncoder::<f32>::new(&EncoderConfig::default(), 32, 1);
        let frame = Array3::zeros((16, 32, 4));
        assert!(matches!(
            enc.encode_frame(frame.view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn text_encoding_collapses_whitespace_and_ignores_order() {
        let enc = FrozenTextEncoder::<f64>::new(&EncoderConfig::default(), 64, 5);
        let a = enc.encode_text("open drawer").unwrap();
        let b = enc.encode_text("open  drawer").unwrap();
        assert_eq!(a, b);
        let c = enc.encode_text("drawer open").unwrap();
        assert_eq!(a, c);
        let other_seed = FrozenTextEncoder::<f64>::new(&EncoderConfig::default(), 64, 6);
        assert_ne!(a, other_seed.encode_text("open drawer").unwrap());
        assert!(matches!(
            enc.encode_text("  ,. "),
            Err(Error::InvalidText(_))
        ));
    }

    #[test]
    fn video_encoding_round_trips_through_sampling() {
        let spec = SynthSpec::default();
        let sample = render_video(Triplet::new(0, 1, 2), 3, &spec, "v").unwrap();
        let enc = FrozenVisualEncoder::<f32>::new(&EncoderConfig::default(), 64, 17);
        let feats = enc.encode_video(&sample, 16).unwrap();
        assert_eq!(feats.shape(), &[16, 64]);
        assert!(feats.iter().all(|v| v.is_finite()));
    }
}
