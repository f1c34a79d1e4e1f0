//! Metrics: Fréchet feature distance, masked-region guidance fidelity,
//! preservation of known pixels and the feature-pull statistic.

mod extractor;
mod fidelity;
mod frechet;
mod stats;

pub use extractor::{ExtractorConfig, FeatureExtractor, ACCURACY_GATE};
pub use fidelity::{
    classify_intensity, depth_mae, edge_f1, guidance_fidelity, seg_iou, Fidelity, GuidanceMaps, INTENSITY_CENTERS,
};
pub use frechet::{frechet_distance, frechet_from_moments, moments, sqrt_psd, EIGEN_CLIP};
pub use stats::{bootstrap, feature_pull_statistic, mean, paired_bootstrap, std_dev, win_rate, Interval};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sample count below which the Fréchet value is reported but flagged.
pub const MIN_FID_SAMPLES: usize = 100;

/// One completed image with everything needed to score it.
#[derive(Clone, Debug)]
pub struct EvalSample {
    /// Composited output `[1, S, S]`.
    pub output: Tensor<f32>,
    /// Original image `[1, S, S]`.
    pub original: Tensor<f32>,
    /// `[1, S, S]`, 1 on missing pixels.
    pub mask: Tensor<f32>,
    pub maps: GuidanceMaps,
}

impl EvalSample {
    /// Known pixels of the output equal the original bit for bit.
    pub fn preserves_known(&self) -> bool {
        self.output
            .data()
            .iter()
            .zip(self.original.data())
            .zip(self.mask.data())
            .all(|((o, x), &m)| m > 0.5 || o.to_bits() == x.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub n_samples: usize,
    pub toy_fid: Option<f64>,
    /// False when the extractor gate failed or there are too few samples.
    pub fid_valid: bool,
    pub edge_f1: Option<f64>,
    pub seg_iou: Option<f64>,
    pub depth_mae: Option<f64>,
    pub preservation_exact: bool,
    pub config_digest: String,
}

pub const REPORT_HEADER: &str =
    "n_samples,toy_fid,fid_valid,edge_f1,seg_iou,depth_mae,preservation_exact,config_digest";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.n_samples,
            opt(self.toy_fid),
            self.fid_valid,
            opt(self.edge_f1),
            opt(self.seg_iou),
            opt(self.depth_mae),
            self.preservation_exact,
            self.config_digest
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}\n", self.csv_row())
    }

    /// `key = value` lines.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (k, v) in REPORT_HEADER.split(',').zip(self.csv_row().split(',')) {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Mean of edge F1 and segmentation IoU, when both are defined.
    pub fn guidance_score(&self) -> Option<f64> {
        Fidelity { edge_f1: self.edge_f1, seg_iou: self.seg_iou, depth_mae: None }.guidance_score()
    }
}

/// Per-sample fidelity plus the run-level report. Without an extractor the
/// Fréchet distance is left out.
pub fn evaluate_run(
    samples: &[EvalSample],
    reference: &[Vec<f64>],
    extractor: Option<&FeatureExtractor>,
    config_digest: &str,
) -> Result<(MetricReport, Vec<Fidelity>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let fid: Vec<Fidelity> =
        samples.iter().map(|s| guidance_fidelity(&s.output, &s.maps, &s.mask)).collect::<Result<_>>()?;
    let avg = |f: fn(&Fidelity) -> Option<f64>| mean(&fid.iter().filter_map(f).collect::<Vec<_>>());
    let toy_fid = match extractor {
        Some(ex) if samples.len() >= 2 && reference.len() >= 2 => {
            let outs: Vec<Tensor<f32>> = samples.iter().map(|s| s.output.clone()).collect();
            let feats = ex.features(&Tensor::stack(&outs)?)?;
            Some(frechet_distance(&feats, reference)?)
        }
        _ => None,
    };
    let report = MetricReport {
        n_samples: samples.len(),
        fid_valid: toy_fid.is_some() && extractor.is_some_and(|e| e.gate_passed()) && samples.len() >= MIN_FID_SAMPLES,
        toy_fid,
        edge_f1: avg(|f| f.edge_f1),
        seg_iou: avg(|f| f.seg_iou),
        depth_mae: avg(|f| f.depth_mae),
        preservation_exact: samples.iter().all(EvalSample::preserves_known),
        config_digest: config_digest.to_string(),
    };
    Ok((report, fid))
}
