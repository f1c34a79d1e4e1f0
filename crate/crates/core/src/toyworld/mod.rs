//! Procedural grayscale scenes with exact segmentation, depth and
//! modality maps, plus inpainting masks.
//!
//! Every generator is a pure function of `(seed, config)`.

mod mask;
mod modality;

pub use mask::{generate_mask, MaskMode, MaskSpec};
pub use modality::{edge_map, extract_modality, gaussian_blur, Modality, EDGE_THRESHOLD, SKETCH_SIGMA};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, STREAM_SCENE};
use crate::tensor::Tensor;

/// Number of segmentation classes, background included.
pub const NUM_CLASSES: usize = 4;

/// Class-conditional intensity bands. Background sits around
/// [`SceneConfig::bg_level`].
pub const CLASS_BANDS: [(f32, f32); NUM_CLASSES] = [(0.0, 0.2), (0.35, 0.5), (0.6, 0.75), (0.85, 1.0)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle = 1,
    Rectangle = 2,
    Triangle = 3,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Triangle];

    pub fn class_id(self) -> u8 {
        self as u8
    }
}

/// Geometry of one shape in pixel units. A pixel `(x, y)` is covered when
/// its centre `(x + 0.5, y + 0.5)` lies inside the shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    /// Bounding box `[x0, x1) x [y0, y1)`.
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub intensity: f32,
    pub depth: f32,
}

impl ShapeInstance {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || x >= self.x1 || y < self.y0 || y >= self.y1 {
            return false;
        }
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let (w, h) = ((self.x1 - self.x0) as f32, (self.y1 - self.y0) as f32);
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Circle => {
                let (cx, cy) = (self.x0 as f32 + w / 2.0, self.y0 as f32 + h / 2.0);
                let r = w.min(h) / 2.0;
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // apex at top centre, base along the bottom edge
                let cx = self.x0 as f32 + w / 2.0;
                let rel = (py - self.y0 as f32) / h;
                (px - cx).abs() <= rel * w / 2.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub bg_level: f32,
    /// Amplitude of the smooth background variation.
    pub bg_amplitude: f32,
    /// Shape extent range as fractions of the image size.
    pub min_extent: f32,
    pub max_extent: f32,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 32,
            min_shapes: 1,
            max_shapes: 3,
            bg_level: 0.1,
            bg_amplitude: 0.04,
            min_extent: 0.22,
            max_extent: 0.4,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    pub fn with_size(size: usize) -> Self {
        SceneConfig { size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::config(format!("scene size {} too small", self.size)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes > max_shapes"));
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent && self.max_extent <= 1.0) {
            return Err(Error::config("shape extent fractions must satisfy 0 < min <= max <= 1"));
        }
        Ok(())
    }

    fn extent_range(&self) -> (usize, usize) {
        let lo = ((self.size as f32 * self.min_extent).round() as usize).max(3);
        let hi = ((self.size as f32 * self.max_extent).round() as usize).max(lo);
        (lo, hi.min(self.size))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[1, S, S]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major class ids, `S * S`.
    pub seg: Vec<u8>,
    /// Row-major depth in `[0, 1]`, exactly 0 on background.
    pub depth: Vec<f32>,
    /// Number of shapes; the stand-in for a text prompt.
    pub class_count_label: usize,
    pub shapes: Vec<ShapeInstance>,
    pub seed: u64,
}

impl Scene {
    pub fn size(&self) -> usize {
        self.image.shape()[1]
    }
}

fn background(size: usize, cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<f32> {
    let two_pi = std::f32::consts::TAU;
    let fx: f32 = rng.random_range(0.5..1.0);
    let fy: f32 = rng.random_range(0.5..1.0);
    let px: f32 = rng.random_range(0.0..two_pi);
    let py: f32 = rng.random_range(0.0..two_pi);
    let s = size as f32;
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f32, (i / size) as f32);
            let wave = 0.5 * ((two_pi * fx * x / s + px).cos() + (two_pi * fy * y / s + py).cos());
            cfg.bg_level + cfg.bg_amplitude * wave
        })
        .collect()
}

/// Rasterize explicit shapes over a background.
pub fn render_scene(size: usize, background: Vec<f32>, shapes: &[ShapeInstance], seed: u64) -> Result<Scene> {
    if background.len() != size * size {
        return Err(Error::invalid("background extent does not match size"));
    }
    let mut image = background;
    let mut seg = vec![0u8; size * size];
    let mut depth = vec![0f32; size * size];
    for s in shapes {
        for y in s.y0..s.y1.min(size) {
            for x in s.x0..s.x1.min(size) {
                if s.covers(x, y) {
                    image[y * size + x] = s.intensity;
                    seg[y * size + x] = s.kind.class_id();
                    depth[y * size + x] = s.depth;
                }
            }
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![1, size, size], image)?,
        seg,
        depth,
        class_count_label: shapes.len(),
        shapes: shapes.to_vec(),
        seed,
    })
}

/// Generate the scene for `seed`: 1 to 3 non-touching shapes over a smooth
/// background.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let size = cfg.size;
    let mut rng = stream(seed, STREAM_SCENE);
    let bg = background(size, cfg, &mut rng);
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let (lo, hi) = cfg.extent_range();

    // occupancy dilated by one pixel so shapes never touch
    let mut blocked = vec![false; size * size];
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = ShapeKind::ALL[rng.random_range(0..3)];
        let band = CLASS_BANDS[kind.class_id() as usize];
        let intensity = rng.random_range(band.0..=band.1);
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let w = rng.random_range(lo..=hi);
            let h = match kind {
                ShapeKind::Circle => w,
                _ => rng.random_range(lo..=hi),
            };
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            let cand = ShapeInstance { kind, x0, y0, x1: x0 + w, y1: y0 + h, intensity, depth: 0.0 };
            let mut pixels = Vec::new();
            let mut clash = false;
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    if cand.covers(x, y) {
                        if blocked[y * size + x] {
                            clash = true;
                        }
                        pixels.push((x, y));
                    }
                }
            }
            if !clash && pixels.len() >= 6 {
                placed = Some((cand, pixels));
                break;
            }
        }
        let (shape, pixels) = placed.ok_or_else(|| Error::Placement {
            seed,
            reason: format!("no free placement for shape {} of {count}", shapes.len() + 1),
        })?;
        for (x, y) in pixels {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < size && (ny as usize) < size {
                        blocked[ny as usize * size + nx as usize] = true;
                    }
                }
            }
        }
        shapes.push(shape);
    }
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.shuffle(&mut rng);
    let n = shapes.len() as f32;
    for (rank, &i) in order.iter().enumerate() {
        shapes[i].depth = (rank as f32 + 1.0) / n;
    }
    render_scene(size, bg, &shapes, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// Fixed, disjoint seed ranges.
    pub fn seeds(self) -> std::ops::Range<u64> {
        match self {
            Split::Train => 0..10_000,
            Split::Val => 10_000..11_000,
            Split::Test => 11_000..12_000,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }

    pub fn of_seed(seed: u64) -> Option<Self> {
        Split::ALL.into_iter().find(|s| s.seeds().contains(&seed))
    }
}

/// `seed,split` manifest lines for the given seeds, in order.
pub fn manifest(entries: &[(u64, Split)]) -> String {
    entries.iter().map(|(seed, split)| format!("{seed},{}\n", split.as_str())).collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<(u64, Split)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (seed, split) =
                l.split_once(',').ok_or_else(|| Error::invalid(format!("malformed manifest line `{l}`")))?;
            let seed = seed.trim().parse().map_err(|_| Error::invalid(format!("bad seed in `{l}`")))?;
            Ok((seed, Split::parse(split.trim())?))
        })
        .collect()
}
