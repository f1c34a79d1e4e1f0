//! Guided completion of scene seeds or image files.

use anyhow::Result;
use magic_core::eval::{guidance_fidelity, mean, std_dev, Fidelity};
use magic_core::Modality;

use super::{inputs, load_nets, sample_all, trace_csv, write_gray, write_seg, Common, Input, Plan, Sample};
use crate::rundir::{RunDir, CHECKPOINTS, METRICS, SAMPLES, TRACES};

pub const INDEX: &str = "index.csv";
pub const INDEX_HEADER: &str = "file,input,input_seed,sample,seed";
pub const METRICS_HEADER: &str = "file,edge_f1,seg_iou,depth_mae,guidance_score,preserved";

pub fn sample_name(input: &Input, s: &Sample) -> String {
    format!("{}-{}", input.id, s.k)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Known pixels of `out` equal the input's known region bit for bit.
pub fn preserved(input: &Input, out: &magic_core::Tensor<f32>) -> bool {
    out.data()
        .iter()
        .zip(input.masked.data())
        .zip(input.mask.data())
        .all(|((o, k), m)| *m > 0.5 || o.to_bits() == k.to_bits())
}

fn write_guides(dir: &RunDir, input: &Input) -> Result<()> {
    let gdir = dir.path("guides");
    std::fs::create_dir_all(&gdir)?;
    write_gray(&gdir.join(format!("{}-mask.pgm", input.id)), &input.mask)?;
    write_gray(&gdir.join(format!("{}-known.pgm", input.id)), &input.masked)?;
    for (m, cond) in &input.conds {
        if *m == Modality::Segmentation {
            let (_, h, w) = (cond.shape()[0], cond.shape()[1], cond.shape()[2]);
            let plane = h * w;
            let ids: Vec<u8> = (0..plane)
                .map(|p| {
                    (0..cond.shape()[0])
                        .max_by(|&a, &b| cond.data()[a * plane + p].total_cmp(&cond.data()[b * plane + p]))
                        .unwrap() as u8
                })
                .collect();
            write_seg(&gdir.join(format!("{}-{m}.ppm", input.id)), &ids, w)?;
        } else {
            write_gray(&gdir.join(format!("{}-{m}.pgm", input.id)), cond)?;
        }
    }
    Ok(())
}

/// Returns the per-sample fidelity rows (scene inputs only).
pub fn run(c: &Common) -> Result<Vec<(String, Fidelity)>> {
    let cfg = &c.config;
    let plan = Plan::from_config(cfg);
    plan.check()?;
    let mods = plan.used_modalities();
    let nets = load_nets(cfg, &mods)?;
    let ins = inputs(cfg, &mods)?;
    let dir = RunDir::create(&c.out_dir()?, c.force, cfg, &[CHECKPOINTS, SAMPLES, TRACES])?;
    for input in &ins {
        write_guides(&dir, input)?;
    }
    let samples = sample_all(&nets, &plan, &ins)?;

    let mut index = format!("{INDEX_HEADER}\n");
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut warnings = String::new();
    let mut rows = Vec::new();
    for s in &samples {
        let input = &ins[s.input];
        let name = sample_name(input, s);
        write_gray(&dir.path(SAMPLES).join(format!("{name}.pgm")), &s.image)?;
        let raw = s.latent.map(|v| v.clamp(0.0, 1.0));
        write_gray(&dir.path(SAMPLES).join(format!("{name}-raw.pgm")), &raw)?;
        dir.write(format!("{TRACES}/{name}.csv"), trace_csv(&s.trace))?;
        for w in &s.trace.warnings {
            warnings.push_str(&format!("{name}: {w}\n"));
        }
        let seed_col = input.seed.map(|v| v.to_string()).unwrap_or_default();
        index.push_str(&format!("{name}.pgm,{},{seed_col},{},{}\n", input.id, s.k, s.seed));
        let fid = match input.maps()? {
            Some(maps) => guidance_fidelity(&s.image, &maps, &input.mask)?,
            None => Fidelity::default(),
        };
        metrics.push_str(&format!(
            "{name}.pgm,{},{},{},{},{}\n",
            opt(fid.edge_f1),
            opt(fid.seg_iou),
            opt(fid.depth_mae),
            opt(fid.guidance_score()),
            preserved(input, &s.image)
        ));
        rows.push((name, fid));
    }
    dir.write(format!("{SAMPLES}/{INDEX}"), index)?;
    dir.write(METRICS, metrics)?;
    if !warnings.is_empty() {
        dir.write(format!("{TRACES}/warnings.txt"), warnings)?;
    }

    let mut summary = String::from("input,samples,guidance_score_mean,guidance_score_std\n");
    for (i, input) in ins.iter().enumerate() {
        let scores: Vec<f64> = samples
            .iter()
            .zip(&rows)
            .filter(|(s, _)| s.input == i)
            .filter_map(|(_, (_, f))| f.guidance_score())
            .collect();
        summary.push_str(&format!("{},{},{},{}\n", input.id, plan.samples, opt(mean(&scores)), opt(std_dev(&scores))));
    }
    dir.write("summary.csv", summary)?;
    Ok(rows)
}
