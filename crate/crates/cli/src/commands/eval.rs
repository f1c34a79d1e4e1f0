//! Scoring of finished completion runs.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use magic_core::eval::{
    evaluate_run, paired_bootstrap, EvalSample, ExtractorConfig, FeatureExtractor, Fidelity, MetricReport,
    REPORT_HEADER,
};
use magic_core::toyworld::{generate_scene, Split};
use magic_core::Tensor;

use super::complete::INDEX;
use super::{load_checkpoint, mask_for, Common};
use crate::config::RunConfig;
use crate::pnm;
use crate::rundir::{RunDir, CHECKPOINTS, ECHO, METRICS, SAMPLES};

/// A completion run as found on disk.
pub struct LoadedRun {
    pub root: PathBuf,
    pub config: RunConfig,
    pub files: Vec<String>,
    pub samples: Vec<EvalSample>,
}

fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| pnm::from_byte(pnm::to_byte(v)))
}

/// Reads `config.echo` and the sample index, and regenerates the originals,
/// masks and guidance maps from the recorded scene seeds. Originals are
/// quantized the same way the stored samples are.
pub fn load_run(root: &Path) -> Result<LoadedRun> {
    let config = RunConfig::load(&root.join(ECHO)).with_context(|| format!("reading run {}", root.display()))?;
    let index_path = root.join(SAMPLES).join(INDEX);
    let index = std::fs::read_to_string(&index_path).with_context(|| format!("reading {}", index_path.display()))?;
    let size = config.data.size;
    let mut files = Vec::new();
    let mut samples = Vec::new();
    for (n, line) in index.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let [file, _, seed, ..] = cols[..] else { bail!("{}:{}: malformed row", index_path.display(), n + 1) };
        let seed: u64 =
            seed.parse().map_err(|_| anyhow!("{}: sample {file} has no scene seed", index_path.display()))?;
        let img = pnm::read_pgm(&root.join(SAMPLES).join(file))?;
        if img.width != size || img.height != size {
            bail!("{file} is {}x{}, run size is {size}", img.width, img.height);
        }
        let scene = generate_scene(seed, &config.scene())?;
        let maps = magic_core::eval::GuidanceMaps::from_scene(&scene)?;
        samples.push(EvalSample {
            output: Tensor::new(vec![1, size, size], img.values())?,
            original: quantize(&scene.image),
            mask: mask_for(&config, seed)?,
            maps,
        });
        files.push(file.to_string());
    }
    if samples.is_empty() {
        bail!("run {} has no samples", root.display());
    }
    Ok(LoadedRun { root: root.to_path_buf(), config, files, samples })
}

fn split_seeds(cfg: &RunConfig, split: Split) -> Vec<u64> {
    let v: Vec<u64> = cfg.data.seeds.clone().filter(|&s| Split::of_seed(s) == Some(split)).collect();
    if v.is_empty() {
        split.seeds().collect()
    } else {
        v
    }
}

fn extractor(cfg: &RunConfig, dir: &RunDir) -> Result<FeatureExtractor> {
    if let Some(p) = &cfg.eval.extractor {
        return Ok(FeatureExtractor::from_checkpoint(&load_checkpoint(p)?)?);
    }
    eprintln!("training feature extractor ({} steps)", cfg.eval.extractor_steps);
    let scene = cfg.scene();
    let mut ex = FeatureExtractor::build(ExtractorConfig::for_scenes(&scene), cfg.run.seed)?;
    ex.train(&split_seeds(cfg, Split::Train), &scene, cfg.eval.extractor_steps, 32, cfg.run.seed)?;
    let acc = ex.evaluate(&split_seeds(cfg, Split::Test), &scene)?;
    eprintln!("extractor test accuracy {acc:.3}");
    ex.checkpoint().save(&dir.path(CHECKPOINTS).join("extractor.ck"))?;
    Ok(ex)
}

pub const DELTA_HEADER: &str = "file,edge_f1,seg_iou,depth_mae,guidance_score";

fn delta(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(a), Some(b)) => format!("{:.6}", b - a),
        _ => String::new(),
    }
}

fn paired(a: &LoadedRun, fa: &[Fidelity], b: &LoadedRun, fb: &[Fidelity], seed: u64) -> Result<(String, String)> {
    if a.samples.len() != b.samples.len() {
        bail!(
            "paired evaluation needs equal sample counts: {} has {}, {} has {}",
            a.root.display(),
            a.samples.len(),
            b.root.display(),
            b.samples.len()
        );
    }
    let mut csv = format!("{DELTA_HEADER}\n");
    let (mut ga, mut gb) = (Vec::new(), Vec::new());
    for (i, (x, y)) in fa.iter().zip(fb).enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            a.files[i],
            delta(x.edge_f1, y.edge_f1),
            delta(x.seg_iou, y.seg_iou),
            delta(x.depth_mae, y.depth_mae),
            delta(x.guidance_score(), y.guidance_score())
        ));
        if let (Some(p), Some(q)) = (x.guidance_score(), y.guidance_score()) {
            ga.push(p);
            gb.push(q);
        }
    }
    let summary = if ga.is_empty() {
        "paired guidance_score: no sample defined in both runs\n".to_string()
    } else {
        let ci = paired_bootstrap(&gb, &ga, 2000, 0.95, seed)?;
        format!(
            "paired guidance_score (second minus first) over {} samples: mean {:.6}, 95% interval [{:.6}, {:.6}]\n",
            ga.len(),
            ci.estimate,
            ci.lo,
            ci.hi
        )
    };
    Ok((csv, summary))
}

/// Returns one report per run, in the order given.
pub fn run(c: &Common) -> Result<Vec<MetricReport>> {
    let cfg = &c.config;
    if cfg.eval.runs.is_empty() {
        bail!("[eval] runs is empty");
    }
    let runs: Vec<LoadedRun> = cfg.eval.runs.iter().map(|r| load_run(r)).collect::<Result<_>>()?;
    if runs.len() == 2 && runs[0].samples.len() != runs[1].samples.len() {
        bail!(
            "paired evaluation needs equal sample counts, got {} and {}",
            runs[0].samples.len(),
            runs[1].samples.len()
        );
    }
    let dir = RunDir::create(&c.out_dir()?, c.force, cfg, &[CHECKPOINTS])?;
    let ex = extractor(cfg, &dir)?;

    let mut csv = format!("run,{REPORT_HEADER},guidance_score\n");
    let mut summary = String::new();
    let mut reports = Vec::new();
    let mut fids = Vec::new();
    for r in &runs {
        let originals: Vec<Tensor<f32>> = r.samples.iter().map(|s| s.original.clone()).collect();
        let reference = ex.features(&Tensor::stack(&originals)?)?;
        let (report, fid) = evaluate_run(&r.samples, &reference, Some(&ex), &r.config.digest())?;
        let gs = report.guidance_score().map(|g| format!("{g:.6}")).unwrap_or_default();
        csv.push_str(&format!("{},{},{gs}\n", r.root.display(), report.csv_row()));
        summary.push_str(&format!("[{}]\n{}guidance_score = {gs}\n\n", r.root.display(), report.summary()));
        reports.push(report);
        fids.push(fid);
    }
    dir.write(METRICS, csv)?;
    if runs.len() == 2 {
        let (deltas, line) = paired(&runs[0], &fids[0], &runs[1], &fids[1], cfg.run.seed)?;
        dir.write("deltas.csv", deltas)?;
        summary.push_str(&line);
    }
    dir.write("summary.txt", summary)?;
    Ok(reports)
}
