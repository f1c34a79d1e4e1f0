//! Masked-region agreement between a completed image and its guidance maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toyworld::{edge_map, Scene, NUM_CLASSES};

/// Representative intensity of each class: the default background level and
/// the midpoint of every shape band.
pub const INTENSITY_CENTERS: [f32; NUM_CLASSES] = [0.1, 0.425, 0.675, 0.925];

/// Ground-truth maps a completion is scored against.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMaps {
    /// Binary `[1, S, S]`.
    pub edge: Tensor<f32>,
    pub seg: Vec<u8>,
    pub depth: Vec<f32>,
}

impl GuidanceMaps {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Ok(GuidanceMaps { edge: edge_map(&scene.image)?, seg: scene.seg.clone(), depth: scene.depth.clone() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Fidelity {
    pub edge_f1: Option<f64>,
    pub seg_iou: Option<f64>,
    pub depth_mae: Option<f64>,
}

impl Fidelity {
    /// Mean of edge F1 and segmentation IoU over whichever are defined.
    pub fn guidance_score(&self) -> Option<f64> {
        match (self.edge_f1, self.seg_iou) {
            (Some(e), Some(s)) => Some(0.5 * (e + s)),
            (e, s) => e.or(s),
        }
    }
}

fn check_pair(image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<usize> {
    match image.shape() {
        [1, h, w] if h == w && mask.shape() == image.shape() => Ok(*h),
        _ => Err(Error::ShapeMismatch { op: "fidelity", lhs: image.shape().to_vec(), rhs: mask.shape().to_vec() }),
    }
}

fn masked_indices(mask: &Tensor<f32>) -> Vec<usize> {
    mask.data().iter().enumerate().filter(|(_, &m)| m > 0.5).map(|(i, _)| i).collect()
}

/// F1 of the output's edge map against `guide_edge` over missing pixels.
/// `None` when the mask is empty or neither map has an edge there.
pub fn edge_f1(output: &Tensor<f32>, guide_edge: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Option<f64>> {
    check_pair(output, mask)?;
    guide_edge.expect_same_shape(output, "edge_f1")?;
    let pred = edge_map(output)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for i in masked_indices(mask) {
        match (pred.data()[i] > 0.5, guide_edge.data()[i] > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok((denom > 0).then(|| 2.0 * tp as f64 / denom as f64))
}

/// Class of the nearest entry in [`INTENSITY_CENTERS`].
pub fn classify_intensity(v: f32) -> u8 {
    let mut best = 0;
    for (c, &center) in INTENSITY_CENTERS.iter().enumerate() {
        if (v - center).abs() < (v - INTENSITY_CENTERS[best]).abs() {
            best = c;
        }
    }
    best as u8
}

/// Mean IoU over classes present in the prediction or the guide within the
/// mask.
pub fn seg_iou(output: &Tensor<f32>, guide_seg: &[u8], mask: &Tensor<f32>) -> Result<Option<f64>> {
    check_pair(output, mask)?;
    if guide_seg.len() != output.numel() {
        return Err(Error::ShapeMismatch { op: "seg_iou", lhs: output.shape().to_vec(), rhs: vec![guide_seg.len()] });
    }
    let idx = masked_indices(mask);
    if idx.is_empty() {
        return Ok(None);
    }
    let mut inter = [0usize; NUM_CLASSES];
    let mut union = [0usize; NUM_CLASSES];
    for i in idx {
        let (p, g) = (classify_intensity(output.data()[i]) as usize, guide_seg[i] as usize);
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g.min(NUM_CLASSES - 1)] += 1;
        }
    }
    let ious: Vec<f64> =
        (0..NUM_CLASSES).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    Ok(Some(ious.iter().sum::<f64>() / ious.len() as f64))
}

/// Layer-ordering proxy for depth agreement.
///
/// A missing pixel the output renders as foreground is assigned the guide's
/// layer value there, or the mean foreground layer where the guide is
/// background; a background pixel gets 0. The score is the mean absolute
/// difference to the guide depth over the mask.
pub fn depth_mae(output: &Tensor<f32>, guide_depth: &[f32], mask: &Tensor<f32>) -> Result<Option<f64>> {
    check_pair(output, mask)?;
    if guide_depth.len() != output.numel() {
        return Err(Error::ShapeMismatch {
            op: "depth_mae",
            lhs: output.shape().to_vec(),
            rhs: vec![guide_depth.len()],
        });
    }
    let idx = masked_indices(mask);
    if idx.is_empty() {
        return Ok(None);
    }
    let fg: Vec<f64> = guide_depth.iter().filter(|&&d| d > 0.0).map(|&d| d as f64).collect();
    let fallback = if fg.is_empty() { 1.0 } else { fg.iter().sum::<f64>() / fg.len() as f64 };
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let g = guide_depth[i] as f64;
            let proxy = match (classify_intensity(output.data()[i]) > 0, g > 0.0) {
                (false, _) => 0.0,
                (true, true) => g,
                (true, false) => fallback,
            };
            (proxy - g).abs()
        })
        .sum();
    Ok(Some(total / idx.len() as f64))
}

pub fn guidance_fidelity(output: &Tensor<f32>, maps: &GuidanceMaps, mask: &Tensor<f32>) -> Result<Fidelity> {
    Ok(Fidelity {
        edge_f1: edge_f1(output, &maps.edge, mask)?,
        seg_iou: seg_iou(output, &maps.seg, mask)?,
        depth_mae: depth_mae(output, &maps.depth, mask)?,
    })
}
