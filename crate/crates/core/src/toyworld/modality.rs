use super::{Scene, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sobel magnitude at or above this value counts as an edge.
pub const EDGE_THRESHOLD: f32 = 0.2;
/// Gaussian blur width turning edges into sketches.
pub const SKETCH_SIGMA: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Edge,
    Sketch,
    Segmentation,
    Depth,
    /// Number of shapes, fed through the backbone's class embedding.
    ClassLabel,
}

impl Modality {
    pub const ALL: [Modality; 5] =
        [Modality::Edge, Modality::Sketch, Modality::Segmentation, Modality::Depth, Modality::ClassLabel];
    /// Modalities that carry a spatial map and get their own guidance encoder.
    pub const SPATIAL: [Modality; 4] = [Modality::Edge, Modality::Sketch, Modality::Segmentation, Modality::Depth];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Edge => "edge",
            Modality::Sketch => "sketch",
            Modality::Segmentation => "segmentation",
            Modality::Depth => "depth",
            Modality::ClassLabel => "class_label",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "edge" => Ok(Modality::Edge),
            "sketch" => Ok(Modality::Sketch),
            "segmentation" | "seg" => Ok(Modality::Segmentation),
            "depth" => Ok(Modality::Depth),
            "class_label" | "text" => Ok(Modality::ClassLabel),
            other => Err(Error::InvalidArgument(format!("unknown modality `{other}`"))),
        }
    }

    /// Channel count of the extracted map; 0 for the non-spatial label.
    pub fn channels(self) -> usize {
        match self {
            Modality::Edge | Modality::Sketch | Modality::Depth => 1,
            Modality::Segmentation => NUM_CLASSES,
            Modality::ClassLabel => 0,
        }
    }

    pub fn is_spatial(self) -> bool {
        self != Modality::ClassLabel
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::parse(s)
    }
}

fn at(img: &[f32], size: usize, x: isize, y: isize) -> f32 {
    let cx = x.clamp(0, size as isize - 1) as usize;
    let cy = y.clamp(0, size as isize - 1) as usize;
    img[cy * size + cx]
}

/// Binary Sobel edge map of a `[1, S, S]` image with replicate padding.
pub fn edge_map(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let size = square_extent(image)?;
    let img = image.data();
    let out = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as isize, (i / size) as isize);
            let p = |dx: isize, dy: isize| at(img, size, x + dx, y + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            if (gx * gx + gy * gy).sqrt() >= EDGE_THRESHOLD {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(vec![1, size, size], out)
}

/// Separable Gaussian blur of a `[1, S, S]` map, kernel truncated at 3 sigma,
/// replicate padding.
pub fn gaussian_blur(map: &Tensor<f32>, sigma: f32) -> Result<Tensor<f32>> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::invalid("blur sigma must be positive"));
    }
    let size = square_extent(map)?;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as isize, (i / size) as isize);
                kernel
                    .iter()
                    .zip(-radius..=radius)
                    .map(|(k, d)| if horizontal { k * at(src, size, x + d, y) } else { k * at(src, size, x, y + d) })
                    .sum::<f32>()
                    .clamp(0.0, 1.0)
            })
            .collect()
    };
    let h = pass(map.data(), true);
    Tensor::new(vec![1, size, size], pass(&h, false))
}

fn square_extent(t: &Tensor<f32>) -> Result<usize> {
    match t.shape() {
        [1, h, w] if h == w && *h > 0 => Ok(*h),
        s => Err(Error::InvalidShape { op: "modality map", shape: s.to_vec(), reason: "expected [1, S, S]".into() }),
    }
}

/// Extract a modality map from a scene. The class label comes back as a
/// rank-0 tensor holding the shape count.
pub fn extract_modality(scene: &Scene, modality: Modality) -> Result<Tensor<f32>> {
    let size = scene.size();
    match modality {
        Modality::Edge => edge_map(&scene.image),
        Modality::Sketch => gaussian_blur(&edge_map(&scene.image)?, SKETCH_SIGMA),
        Modality::Segmentation => {
            let n = size * size;
            let mut data = vec![0f32; NUM_CLASSES * n];
            for (i, &c) in scene.seg.iter().enumerate() {
                data[c as usize * n + i] = 1.0;
            }
            Tensor::new(vec![NUM_CLASSES, size, size], data)
        }
        Modality::Depth => Tensor::new(vec![1, size, size], scene.depth.clone()),
        Modality::ClassLabel => Ok(Tensor::scalar(scene.class_count_label as f32)),
    }
}
