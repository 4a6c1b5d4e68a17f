//! Toy moving-square clips: a bright square drifts up, down, left or right
//! over a dark background with Gaussian pixel noise.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tensor::Tensor;
use crate::videoio::{FrameSequence, RawFrame};

pub const CLASS_NAMES: [&str; 4] = ["up", "down", "left", "right"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn label(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub per_class: usize,
    pub frames: usize,
    pub side: usize,
    pub square: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { per_class: 25, frames: 20, side: 16, square: 4, noise_std: 0.05, seed: 0 }
    }
}

/// Area of `[a, a + len)` covered by pixel `[p, p + 1)`.
fn overlap(a: f64, len: f64, p: usize) -> f64 {
    let lo = a.max(p as f64);
    let hi = (a + len).min(p as f64 + 1.0);
    (hi - lo).max(0.0)
}

/// Renders one clip. The square travels `travel` pixels along the motion
/// axis starting at `(y0, x0)`, with anti-aliased edges.
#[allow(clippy::too_many_arguments)]
pub fn render_clip(
    direction: Direction,
    y0: f64,
    x0: f64,
    travel: f64,
    config: &SyntheticConfig,
    rng: &mut crate::nn::Rng,
) -> Result<FrameSequence> {
    let (t_n, side, sq) = (config.frames, config.side, config.square as f64);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(t_n * side * side);
    for t in 0..t_n {
        let step = if t_n > 1 { travel * t as f64 / (t_n - 1) as f64 } else { 0.0 };
        let (dy, dx) = match direction {
            Direction::Up => (-step, 0.0),
            Direction::Down => (step, 0.0),
            Direction::Left => (0.0, -step),
            Direction::Right => (0.0, step),
        };
        let (y, x) = (y0 + dy, x0 + dx);
        for py in 0..side {
            let cy = overlap(y, sq, py);
            for px in 0..side {
                let v = cy * overlap(x, sq, px) + noise.sample(rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    FrameSequence::new(Tensor::new(vec![t_n, side, side, 1], data)?)
}

/// `per_class` clips for each direction, interleaved by class.
pub fn generate(config: &SyntheticConfig) -> Result<Vec<(FrameSequence, usize)>> {
    if config.square == 0 || config.side <= config.square + 1 || config.frames == 0 {
        return Err(Error::invalid("synthetic clips need frames >= 1 and side > square + 1"));
    }
    let mut rng = seeded_rng(config.seed);
    let room = (config.side - config.square) as f64;
    let mut out = Vec::with_capacity(4 * config.per_class);
    for _ in 0..config.per_class {
        for dir in Direction::ALL {
            let travel = rng.random_range(room * 0.5..=room);
            let along = rng.random_range(0.0..=room - travel);
            let across = rng.random_range(0.0..=room);
            let (y0, x0) = match dir {
                Direction::Down => (along, across),
                Direction::Up => (along + travel, across),
                Direction::Right => (across, along),
                Direction::Left => (across, along + travel),
            };
            out.push((render_clip(dir, y0, x0, travel, config, &mut rng)?, dir.label()));
        }
    }
    Ok(out)
}

pub fn generate_examples(config: &SyntheticConfig) -> Result<Vec<Example>> {
    Ok(generate(config)?.into_iter().map(|(seq, label)| Example { input: seq.into_tensor(), label }).collect())
}

/// Quantizes one frame of a clip to 8 bits.
pub fn to_raw_frame(seq: &FrameSequence, t: usize) -> Result<RawFrame> {
    let [h, w, c] = seq.frame_shape();
    let frame = seq.data().index_axis0(t);
    RawFrame::new(h, w, c, frame.data().iter().map(|&v| (v * 255.0).round() as u8).collect())
}
