//! Binary inpainting masks. A value of 1 marks a missing pixel that the
//! sampler must fill; 0 marks a known pixel.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, SampleRng, STREAM_MASK};
use crate::tensor::Tensor;

/// Largest allowed gap between the requested and realized mask ratio.
pub const RATIO_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskMode {
    Rect,
    Brush,
    Border,
    /// One image half; the requested ratio is ignored.
    Half,
}

impl MaskMode {
    pub const RANDOM_MODES: [MaskMode; 3] = [MaskMode::Rect, MaskMode::Brush, MaskMode::Border];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Rect => "rect",
            MaskMode::Brush => "brush",
            MaskMode::Border => "border",
            MaskMode::Half => "half",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rect" => Ok(MaskMode::Rect),
            "brush" => Ok(MaskMode::Brush),
            "border" => Ok(MaskMode::Border),
            "half" => Ok(MaskMode::Half),
            other => Err(Error::config(format!("unknown mask mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(mode: MaskMode, ratio: f64, seed: u64) -> Self {
        MaskSpec { mode, ratio, seed }
    }

    /// Mode drawn uniformly from rect, brush and border; ratio uniform on `[0, 1)`.
    pub fn random(seed: u64) -> Self {
        let mut rng = stream(seed, STREAM_MASK + 1);
        let mode = MaskMode::RANDOM_MODES[rng.random_range(0..3)];
        let ratio = rng.random_range(0.0..1.0);
        MaskSpec { mode, ratio, seed }
    }
}

/// Generate an `[1, S, S]` mask for `spec`.
///
/// Rect masks hit the requested pixel count exactly, brush masks overshoot by
/// at most one stamp, and border masks take the closest frame. The realized
/// ratio is checked against [`RATIO_TOLERANCE`].
pub fn generate_mask(spec: &MaskSpec, size: usize) -> Result<Tensor<f32>> {
    if size == 0 {
        return Err(Error::invalid("mask size must be positive"));
    }
    if !spec.ratio.is_finite() || !(0.0..=1.0).contains(&spec.ratio) {
        return Err(Error::invalid(format!("mask ratio {} outside [0, 1]", spec.ratio)));
    }
    let total = size * size;
    let mut rng = stream(spec.seed, STREAM_MASK);
    let target = (spec.ratio * total as f64).round() as usize;
    let mask = match spec.mode {
        MaskMode::Half => half(size, &mut rng),
        _ if target == 0 => vec![false; total],
        _ if target == total => vec![true; total],
        MaskMode::Rect => rect(size, target, &mut rng),
        MaskMode::Brush => brush(size, target, &mut rng),
        MaskMode::Border => border(size, target, &mut rng),
    };
    let realized = mask.iter().filter(|&&m| m).count() as f64 / total as f64;
    let wanted = if spec.mode == MaskMode::Half { 0.5 } else { spec.ratio };
    if (realized - wanted).abs() > RATIO_TOLERANCE {
        return Err(Error::invalid(format!(
            "{} mask cannot reach ratio {wanted:.3} at size {size} (got {realized:.3})",
            spec.mode.as_str()
        )));
    }
    Tensor::new(vec![1, size, size], mask.into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect())
}

fn half(size: usize, rng: &mut SampleRng) -> Vec<bool> {
    let side = rng.random_range(0..4);
    let h = size / 2;
    (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            match side {
                0 => y < h,
                1 => y >= size - h,
                2 => x < h,
                _ => x >= size - h,
            }
        })
        .collect()
}

/// A `w x h` block whose last row is only partly filled, so the pixel count
/// equals `target` exactly.
fn rect(size: usize, target: usize, rng: &mut SampleRng) -> Vec<bool> {
    let aspect = (rng.random_range(-2f64.ln()..2f64.ln())).exp();
    let mut w = ((target as f64 * aspect).sqrt().round() as usize).clamp(1, size);
    if target.div_ceil(w) > size {
        w = target.div_ceil(size);
    }
    let h = target.div_ceil(w);
    let last = target - w * (h - 1);
    let x0 = rng.random_range(0..=size - w);
    let y0 = rng.random_range(0..=size - h);
    let mut mask = vec![false; size * size];
    for row in 0..h {
        let width = if row == h - 1 { last } else { w };
        for col in 0..width {
            mask[(y0 + row) * size + x0 + col] = true;
        }
    }
    mask
}

/// Random-walk strokes with a square brush, then frontier growth if the walk
/// budget runs out before the target is covered.
fn brush(size: usize, target: usize, rng: &mut SampleRng) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    let mut count = 0usize;
    let budget = 4 * size * size;
    let mut steps = 0usize;
    'strokes: while count < target && steps < budget {
        let mut x = rng.random_range(0..size) as f64;
        let mut y = rng.random_range(0..size) as f64;
        let mut angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(4..=2 * size);
        for _ in 0..len {
            let remaining = target - count;
            let thick = rng.random_range(1..=3usize).min(((remaining as f64).sqrt().floor() as usize).max(1));
            let (cx, cy) = (x as usize, y as usize);
            for dy in 0..thick {
                for dx in 0..thick {
                    let (px, py) = (cx + dx, cy + dy);
                    if px < size && py < size && !mask[py * size + px] {
                        mask[py * size + px] = true;
                        count += 1;
                    }
                }
            }
            steps += 1;
            if count >= target || steps >= budget {
                break 'strokes;
            }
            angle += rng.random_range(-0.6..0.6);
            x = (x + angle.cos()).clamp(0.0, (size - 1) as f64);
            y = (y + angle.sin()).clamp(0.0, (size - 1) as f64);
        }
    }
    while count < target {
        let frontier: Vec<usize> = (0..size * size)
            .filter(|&i| {
                !mask[i] && {
                    let (x, y) = (i % size, i / size);
                    (x > 0 && mask[i - 1])
                        || (x + 1 < size && mask[i + 1])
                        || (y > 0 && mask[i - size])
                        || (y + 1 < size && mask[i + size])
                }
            })
            .collect();
        if frontier.is_empty() {
            let free: Vec<usize> = (0..size * size).filter(|&i| !mask[i]).collect();
            mask[free[rng.random_range(0..free.len())]] = true;
        } else {
            mask[frontier[rng.random_range(0..frontier.len())]] = true;
        }
        count += 1;
    }
    mask
}

/// Frame with independently grown side widths; keeps whichever of the last
/// two frames is closer to the target.
fn border(size: usize, target: usize, rng: &mut SampleRng) -> Vec<bool> {
    let covered = |w: &[usize; 4]| -> usize {
        let inner_h = size.saturating_sub(w[0] + w[1]);
        let inner_w = size.saturating_sub(w[2] + w[3]);
        size * size - inner_h * inner_w
    };
    let mut widths = [0usize; 4];
    let mut prev = widths;
    while covered(&widths) < target {
        prev = widths;
        let open: Vec<usize> = (0..4)
            .filter(|&s| {
                let mut w = widths;
                w[s] += 1;
                w[0] + w[1] <= size && w[2] + w[3] <= size
            })
            .collect();
        let side = open[rng.random_range(0..open.len())];
        widths[side] += 1;
    }
    let over = covered(&widths) - target;
    let under = target - covered(&prev);
    let chosen = if under < over { prev } else { widths };
    (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            y < chosen[0] || y >= size - chosen[1] || x < chosen[2] || x >= size - chosen[3]
        })
        .collect()
}
