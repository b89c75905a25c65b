//! Sprite renderer: one subject executing one motion relative to one object.
//!
//! The action-to-motion mapping is a fixed table so that action identity is
//! recoverable from pixels. Object colors are saturated and unique while the
//! background clutter stays muted, which lets tests locate sprites by color.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use super::{make_caption, Split, SynthSpec, Triplet, VideoSample};

/// Actions with a shipped motion pattern.
pub const KNOWN_ACTIONS: [&str; 6] = ["open", "close", "push", "pull", "lift", "rotate"];

/// Subject motion relative to the object sprite. The object sprite itself
/// stays put for every action, so action identity lives in the subject's
/// trajectory and object identity in static appearance; that keeps the two
/// factors independent in pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    /// Start adjacent, translate straight up and away.
    Away,
    /// Descend from above and attach.
    TowardAttach,
    /// Ram horizontally from the left: approach, recoil, approach again.
    Ram,
    /// Start attached on the right, drag away rightward after a hold.
    DragAway,
    /// Approach from below, then rise in place while the depth plane
    /// brightens.
    Raise,
    /// Orbit the object at a safe radius.
    Orbit,
}

/// Fixed action-name to motion table.
pub fn motion_for(action: &str) -> Option<Motion> {
    match action {
        "open" => Some(Motion::Away),
        "close" => Some(Motion::TowardAttach),
        "push" => Some(Motion::Ram),
        "pull" => Some(Motion::DragAway),
        "lift" => Some(Motion::Raise),
        "rotate" => Some(Motion::Orbit),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Square,
    Circle,
    Triangle,
    Diamond,
    Cross,
    Ring,
    HBar,
    VBar,
}

const SUBJECT_SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
const SUBJECT_COLORS: [[f32; 3]; 3] = [
    [0.95, 0.20, 0.20],
    [0.20, 0.95, 0.20],
    [0.25, 0.35, 0.95],
];

const OBJECT_SHAPES: [Shape; 8] = [
    Shape::Square,
    Shape::Circle,
    Shape::Diamond,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::HBar,
    Shape::VBar,
];

/// Saturated and mutually distinct; `object_color` exposes these for the
/// centroid oracle.
const OBJECT_COLORS: [[f32; 3]; 8] = [
    [0.95, 0.90, 0.10],
    [0.90, 0.10, 0.90],
    [0.10, 0.90, 0.90],
    [0.95, 0.55, 0.10],
    [0.55, 0.10, 0.95],
    [0.10, 0.95, 0.50],
    [0.95, 0.40, 0.60],
    [0.10, 0.60, 0.95],
];

pub fn object_color(object_id: usize) -> [f32; 3] {
    OBJECT_COLORS[object_id % OBJECT_COLORS.len()]
}

const SUBJECT_HALF: f64 = 3.0;
const OBJECT_HALF: f64 = 2.5;
const OBJECT_DEPTH: f32 = 0.35;
const SUBJECT_DEPTH: f32 = 0.55;

fn inside(shape: Shape, dx: f64, dy: f64, h: f64) -> bool {
    match shape {
        Shape::Square => dx.abs() <= h && dy.abs() <= h,
        Shape::Circle => dx * dx + dy * dy <= h * h,
        Shape::Triangle => dy.abs() <= h && dx.abs() <= (dy + h) / 2.0,
        Shape::Diamond => dx.abs() + dy.abs() <= h,
        Shape::Cross => {
            (dx.abs() <= h / 3.0 && dy.abs() <= h) || (dy.abs() <= h / 3.0 && dx.abs() <= h)
        }
        Shape::Ring => {
            let r2 = dx * dx + dy * dy;
            r2 <= h * h && r2 >= 0.36 * h * h
        }
        Shape::HBar => dy.abs() <= h / 3.0 && dx.abs() <= h,
        Shape::VBar => dx.abs() <= h / 3.0 && dy.abs() <= h,
    }
}

struct Frame<'a> {
    data: ndarray::ArrayViewMut3<'a, f32>,
    h: usize,
    w: usize,
}

impl Frame<'_> {
    fn stamp(&mut self, shape: Shape, cx: f64, cy: f64, half: f64, rgb: [f32; 3], depth: f32) {
        let x0 = ((cx - half - 1.0).floor().max(0.0)) as usize;
        let x1 = ((cx + half + 1.0).ceil().min(self.w as f64 - 1.0)) as usize;
        let y0 = ((cy - half - 1.0).floor().max(0.0)) as usize;
        let y1 = ((cy + half + 1.0).ceil().min(self.h as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if inside(shape, x as f64 - cx, y as f64 - cy, half) {
                    self.data[[y, x, 0]] = rgb[0];
                    self.data[[y, x, 1]] = rgb[1];
                    self.data[[y, x, 2]] = rgb[2];
                    self.data[[y, x, 3]] = depth;
                }
            }
        }
    }
}

/// Render one clip. Deterministic given `(triplet, seed)`; the background
/// depends on the seed only, never on the labels.
pub fn render_video(
    triplet: Triplet,
    seed: u64,
    spec: &SynthSpec,
    video_id: &str,
) -> Result<VideoSample> {
    spec.vocab.check(triplet)?;
    let action_name = &spec.vocab.actions[triplet.action];
    let motion = motion_for(action_name).ok_or_else(|| {
        Error::Config(format!(
            "action {action_name:?} has no motion mapping; known: {KNOWN_ACTIONS:?}"
        ))
    })?;

    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Static cluttered background, muted colors, zero depth.
    let base = 0.12 + rng.gen::<f32>() * 0.06;
    let mut background = ndarray::Array3::<f32>::zeros((h, w, 4));
    background.slice_mut(ndarray::s![.., .., 0..3]).fill(base);
    for _ in 0..8 {
        let rw = rng.gen_range(2..w / 2);
        let rh = rng.gen_range(2..h / 2);
        let rx = rng.gen_range(0..w - rw);
        let ry = rng.gen_range(0..h - rh);
        let col: [f32; 3] = [
            0.05 + rng.gen::<f32>() * 0.30,
            0.05 + rng.gen::<f32>() * 0.30,
            0.05 + rng.gen::<f32>() * 0.30,
        ];
        for y in ry..ry + rh {
            for x in rx..rx + rw {
                background[[y, x, 0]] = col[0];
                background[[y, x, 1]] = col[1];
                background[[y, x, 2]] = col[2];
            }
        }
    }

    // Object near the center with a small jitter.
    let ocx = w as f64 / 2.0 + rng.gen_range(-1.5..1.5);
    let ocy = h as f64 / 2.0 + rng.gen_range(-1.5..1.5);
    let oshape = OBJECT_SHAPES[triplet.object % OBJECT_SHAPES.len()];
    let ocol = object_color(triplet.object);

    let sshape = SUBJECT_SHAPES[triplet.subject % SUBJECT_SHAPES.len()];
    let scol = SUBJECT_COLORS[triplet.subject % SUBJECT_COLORS.len()];

    let contact = OBJECT_HALF + SUBJECT_HALF + 1.0;
    let far = contact + 7.0;
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    // keep the subject fully on screen regardless of angle and jitter
    let clamp_pos = |p: (f64, f64)| {
        (
            p.0.clamp(SUBJECT_HALF + 1.0, w as f64 - SUBJECT_HALF - 2.0),
            p.1.clamp(SUBJECT_HALF + 1.0, h as f64 - SUBJECT_HALF - 2.0),
        )
    };

    let mut frames = Array4::<f32>::zeros((t_len, h, w, 4));
    for fi in 0..t_len {
        let t = fi as f64 / (t_len - 1) as f64;
        // (subject center, extra subject depth); the object never moves
        let (sc, lift): ((f64, f64), f32) = match motion {
            Motion::Away => {
                let r = contact + (far - contact) * t;
                ((ocx, ocy - r), 0.0)
            }
            Motion::TowardAttach => {
                let s = (t / 0.75).min(1.0);
                let r = far - (far - contact) * s;
                ((ocx, ocy - r), 0.0)
            }
            Motion::Ram => {
                // two strikes from the left: in, recoil, in again, hold
                let depth_in = if t < 0.35 {
                    t / 0.35
                } else if t < 0.55 {
                    1.0 - 0.6 * (t - 0.35) / 0.2
                } else if t < 0.9 {
                    0.4 + 0.6 * (t - 0.55) / 0.35
                } else {
                    1.0
                };
                let r = far - (far - contact) * depth_in;
                ((ocx - r, ocy), 0.0)
            }
            Motion::DragAway => {
                // hold at contact, then pull away to the right
                let s = ((t - 0.35) / 0.65).max(0.0);
                let r = contact + (far - contact) * s;
                ((ocx + r, ocy), 0.0)
            }
            Motion::Raise => {
                let approach = (t / 0.3).min(1.0);
                let height = ((t - 0.3) / 0.7).max(0.0);
                let r = far - (far - contact) * approach;
                ((ocx, ocy + r - height * 3.0), (height * 0.45) as f32)
            }
            Motion::Orbit => {
                let a = angle + std::f64::consts::TAU * t;
                let r = contact + 2.0;
                ((ocx + r * a.cos(), ocy + r * a.sin()), 0.0)
            }
        };
        let oc = (ocx, ocy);

        let sc = clamp_pos(sc);
        let mut view = frames.index_axis_mut(ndarray::Axis(0), fi);
        view.assign(&background);
        let mut frame = Frame {
            data: view,
            h,
            w,
        };
        frame.stamp(oshape, oc.0, oc.1, OBJECT_HALF, ocol, OBJECT_DEPTH + lift);
        frame.stamp(
            sshape,
            sc.0,
            sc.1,
            SUBJECT_HALF,
            scol,
            (SUBJECT_DEPTH + lift).min(1.0),
        );
    }

    Ok(VideoSample {
        video_id: video_id.to_string(),
        frames,
        caption: make_caption(triplet, &spec.vocab)?,
        triplet,
        split: Split::Train,
    })
}

/// Per-frame centroid of pixels matching `color` (independent oracle for
/// sprite-motion tests). Returns `None` for frames with no matching pixel.
pub fn color_centroids(frames: &Array4<f32>, color: [f32; 3]) -> Vec<Option<(f64, f64)>> {
    let (t_len, h, w, _) = frames.dim();
    let mut out = Vec::with_capacity(t_len);
    for fi in 0..t_len {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                let close = (0..3).all(|c| (frames[[fi, y, x, c]] - color[c]).abs() < 0.05);
                if close {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        out.push(if n == 0 {
            None
        } else {
            Some((sx / n as f64, sy / n as f64))
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec::default()
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = Triplet::new(1, 2, 3);
        let a = render_video(t, 99, &spec(), "a").unwrap();
        let b = render_video(t, 99, &spec(), "a").unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn different_seeds_change_background_not_caption() {
        let t = Triplet::new(0, 0, 0);
        let a = render_video(t, 1, &spec(), "a").unwrap();
        let b = render_video(t, 2, &spec(), "b").unwrap();
        assert_ne!(a.frames, b.frames);
        assert_eq!(a.caption, b.caption);
    }

    #[test]
    fn rotate_keeps_object_centroid_stationary() {
        let spec = spec();
        let rotate = spec.vocab.actions.iter().position(|a| a == "rotate").unwrap();
        for object in [0, 3, 5] {
            let t = Triplet::new(0, rotate, object);
            let sample = render_video(t, 7, &spec, "r").unwrap();
            let centroids = color_centroids(&sample.frames, object_color(object));
            let first = centroids[0].expect("object visible in frame 0");
            for c in &centroids {
                let (cx, cy) = c.expect("object visible in every frame");
                assert!(
                    (cx - first.0).abs() <= 1.0 && (cy - first.1).abs() <= 1.0,
                    "object drifted: ({cx}, {cy}) vs ({}, {})",
                    first.0,
                    first.1
                );
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let sample = render_video(Triplet::new(2, 4, 7), 5, &spec(), "x").unwrap();
        sample.validate(&spec().vocab).unwrap();
    }

    #[test]
    fn unknown_action_is_a_configuration_error() {
        let mut s = spec();
        s.vocab.actions[0] = "teleport".into();
        let err = render_video(Triplet::new(0, 0, 0), 1, &s, "x").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
