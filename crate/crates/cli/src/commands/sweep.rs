//! One-axis grid over the blending hyperparameters.

use anyhow::{anyhow, bail, Result};
use magic_core::eval::{evaluate_run, EvalSample, FeatureExtractor, REPORT_HEADER};
use magic_core::Modality;

use super::{inputs, load_checkpoint, load_nets, sample_all, write_gray, Common, Input, Nets, Plan};
use crate::config::{parse_modality, Axis, Mode, RunConfig};
use crate::rundir::{RunDir, METRICS, SAMPLES};

pub const SWEEP_HEADER_PREFIX: &str = "axis,value";

/// Every non-empty subset of `mods`, smallest first.
pub fn subsets(mods: &[Modality]) -> Vec<Vec<Modality>> {
    let mut out: Vec<Vec<Modality>> = (1u32..1 << mods.len())
        .map(|bits| mods.iter().enumerate().filter(|(i, _)| bits >> i & 1 == 1).map(|(_, &m)| m).collect())
        .collect();
    out.sort_by_key(|s: &Vec<Modality>| s.len());
    out
}

fn parse_subset(v: &str) -> Result<Vec<Modality>> {
    v.split('+').map(|m| parse_modality(m.trim())).collect()
}

fn subset_name(s: &[Modality]) -> String {
    s.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("+")
}

/// Axis values as written in the output.
pub fn axis_values(cfg: &RunConfig) -> Result<Vec<String>> {
    let v = &cfg.sweep.values;
    match cfg.sweep.axis {
        Axis::ModalitySubsets if v.is_empty() => {
            if cfg.complete.modalities.is_empty() {
                bail!("modality_subsets sweep needs [complete] modalities or explicit values");
            }
            Ok(subsets(&cfg.complete.modalities).iter().map(|s| subset_name(s)).collect())
        }
        _ if v.is_empty() => bail!("[sweep] values is empty"),
        _ => Ok(v.clone()),
    }
}

fn point_plan(cfg: &RunConfig, value: &str) -> Result<Plan> {
    let mut plan = Plan::from_config(cfg);
    plan.mode = Mode::Cmb;
    match cfg.sweep.axis {
        Axis::P => plan.cmb.p = value.parse().map_err(|e| anyhow!("p `{value}`: {e}"))?,
        Axis::Q => plan.cmb.q = value.parse().map_err(|e| anyhow!("q `{value}`: {e}"))?,
        Axis::Gamma => plan.cmb.gamma = value.parse().map_err(|e| anyhow!("gamma `{value}`: {e}"))?,
        Axis::ModalitySubsets => plan.modalities = parse_subset(value)?,
    }
    if plan.cmb.p > cfg.schedule.t_sample {
        bail!("p = {} exceeds the {} sampling steps", plan.cmb.p, cfg.schedule.t_sample);
    }
    Ok(plan)
}

fn needed_modalities(cfg: &RunConfig, values: &[String]) -> Vec<Modality> {
    let mut mods = cfg.complete.modalities.clone();
    if cfg.sweep.axis == Axis::ModalitySubsets {
        for m in values.iter().filter_map(|v| parse_subset(v).ok()).flatten() {
            if !mods.contains(&m) {
                mods.push(m);
            }
        }
    }
    mods
}

/// Everything a grid point is sampled and scored with.
struct Scorer<'a> {
    dir: &'a RunDir,
    nets: &'a Nets,
    ins: &'a [Input],
    ex: Option<&'a FeatureExtractor>,
    reference: &'a [Vec<f64>],
    digest: &'a str,
}

impl Scorer<'_> {
    fn score(&self, tag: &str, plan: &Plan) -> Result<String> {
        let Scorer { dir, nets, ins, ex, reference, digest } = *self;
        plan.check()?;
        let samples = sample_all(nets, plan, ins)?;
        let sdir = dir.path(SAMPLES).join(tag);
        std::fs::create_dir_all(&sdir)?;
        let mut evals = Vec::with_capacity(samples.len());
        for s in &samples {
            let input = &ins[s.input];
            write_gray(&sdir.join(format!("{}-{}.pgm", input.id, s.k)), &s.image)?;
            let scene = input.scene.as_ref().ok_or_else(|| anyhow!("sweep needs scene inputs"))?;
            evals.push(EvalSample {
                output: s.image.clone(),
                original: scene.image.clone(),
                mask: input.mask.clone(),
                maps: input.maps()?.ok_or_else(|| anyhow!("sweep needs scene inputs"))?,
            });
        }
        let (report, _) = evaluate_run(&evals, reference, ex, digest)?;
        Ok(format!("{},{}", report.csv_row(), report.guidance_score().map(|g| format!("{g:.6}")).unwrap_or_default()))
    }
}

/// Returns the metrics CSV. The first row is the unguided reference.
pub fn run(c: &Common) -> Result<String> {
    let cfg = &c.config;
    if cfg.complete.image.is_some() {
        bail!("sweep runs over scene seeds; unset [complete] image");
    }
    let values = axis_values(cfg)?;
    let mods = needed_modalities(cfg, &values);
    let nets = load_nets(cfg, &mods)?;
    let ins = inputs(cfg, &mods)?;
    let ex = cfg
        .eval
        .extractor
        .as_ref()
        .map(|p| Ok::<_, anyhow::Error>(FeatureExtractor::from_checkpoint(&load_checkpoint(p)?)?))
        .transpose()?;
    let reference = match &ex {
        Some(e) => {
            let imgs: Vec<_> = ins.iter().filter_map(|i| i.scene.as_ref().map(|s| s.image.clone())).collect();
            e.features(&magic_core::Tensor::stack(&imgs)?)?
        }
        None => Vec::new(),
    };
    let dir = RunDir::create(&c.out_dir()?, c.force, cfg, &[SAMPLES])?;
    let digest = cfg.digest();
    let axis = cfg.sweep.axis.as_str();
    let cols = REPORT_HEADER.split(',').count() + 1;
    let mut csv = format!("{SWEEP_HEADER_PREFIX},{REPORT_HEADER},guidance_score,error\n");

    let mut unguided = Plan::from_config(cfg);
    unguided.mode = Mode::Unguided;
    let scorer = Scorer { dir: &dir, nets: &nets, ins: &ins, ex: ex.as_ref(), reference: &reference, digest: &digest };
    let row = scorer.score("unguided", &unguided)?;
    csv.push_str(&format!("unguided,,{row},\n"));

    for v in &values {
        let tag = format!("{axis}-{}", v.replace('+', "_"));
        let result = point_plan(cfg, v).and_then(|plan| scorer.score(&tag, &plan));
        match result {
            Ok(row) => csv.push_str(&format!("{axis},{v},{row},\n")),
            Err(e) => {
                eprintln!("sweep point {axis}={v} failed: {e:#}");
                let msg = format!("{e:#}").replace([',', '\n'], ";");
                csv.push_str(&format!("{axis},{v},{}{msg}\n", ",".repeat(cols)));
            }
        }
        dir.write(METRICS, &csv)?;
    }
    dir.write(METRICS, &csv)?;
    Ok(csv)
}
