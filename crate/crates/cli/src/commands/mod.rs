//! Shared plumbing for the subcommands.

pub mod complete;
pub mod dataset;
pub mod eval;
pub mod sweep;
pub mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use magic_core::checkpoint::Checkpoint;
use magic_core::cmb::{
    cmb_sample, fla_sample, single_modality_sample, unguided_sample, CmbConfig, Completion, Guide, SampleTrace, Task,
};
use magic_core::eval::GuidanceMaps;
use magic_core::parallel::{map_chunks, thread_count};
use magic_core::toyworld::{extract_modality, generate_mask, generate_scene, MaskSpec, Scene, NUM_CLASSES};
use magic_core::train::{load_backbone, load_mcu, mix_seed};
use magic_core::unet::masked_image;
use magic_core::{Denoiser, McuNet, Modality, NoiseSchedule, ScheduleConfig, Tensor};

use crate::config::{MaskChoice, Mode, RunConfig};
use crate::pnm;

/// Options shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Common {
    pub config: RunConfig,
    pub out: Option<PathBuf>,
    pub force: bool,
}

impl Common {
    pub fn out_dir(&self) -> Result<PathBuf> {
        self.out
            .clone()
            .or_else(|| self.config.run.out.clone())
            .ok_or_else(|| anyhow!("no output directory: pass --out or set [run] out"))
    }
}

/// Mask of a scene-seed input.
pub fn mask_for(cfg: &RunConfig, seed: u64) -> Result<Tensor<f32>> {
    let mask_seed = mix_seed(seed, 1);
    let spec = match cfg.complete.mask {
        MaskChoice::Random => MaskSpec::random(mask_seed),
        MaskChoice::Fixed(mode, ratio) => MaskSpec::new(mode, ratio, mask_seed),
    };
    Ok(generate_mask(&spec, cfg.data.size)?)
}

/// Colors for segmentation class ids.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [[0, 0, 0], [230, 80, 60], [60, 160, 230], [240, 200, 50]];

pub fn write_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = *t.shape().last().ok_or_else(|| anyhow!("empty image"))?;
    pnm::write_pgm(path, s, t.numel() / s, t.data())
}

pub fn write_seg(path: &Path, seg: &[u8], size: usize) -> Result<()> {
    let rgb: Vec<[u8; 3]> = seg.iter().map(|&c| PALETTE[c as usize]).collect();
    pnm::write_ppm(path, size, size, &rgb)
}

/// One completion problem.
#[derive(Clone, Debug)]
pub struct Input {
    pub id: String,
    /// Scene seed when the input comes from the toy generator.
    pub seed: Option<u64>,
    pub scene: Option<Scene>,
    /// `[1, S, S]` known region.
    pub masked: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub conds: BTreeMap<Modality, Tensor<f32>>,
}

impl Input {
    pub fn maps(&self) -> Result<Option<GuidanceMaps>> {
        self.scene.as_ref().map(|s| GuidanceMaps::from_scene(s).map_err(Into::into)).transpose()
    }
}

pub fn scene_input(cfg: &RunConfig, seed: u64, modalities: &[Modality]) -> Result<Input> {
    let scene = generate_scene(seed, &cfg.scene())?;
    let mask = mask_for(cfg, seed)?;
    let masked = masked_image(&scene.image, &mask)?;
    let conds = modalities.iter().map(|&m| Ok((m, extract_modality(&scene, m)?))).collect::<Result<_>>()?;
    Ok(Input { id: format!("scene{seed}"), seed: Some(seed), scene: Some(scene), masked, mask, conds })
}

fn read_plane(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = pnm::read_pgm(path)?;
    if img.width != size || img.height != size {
        bail!("{} is {}x{}, expected {size}x{size}", path.display(), img.width, img.height);
    }
    Ok(img.values())
}

/// Input read from PGM files. Segmentation conditions hold class ids as raw
/// byte values.
pub fn file_input(cfg: &RunConfig, modalities: &[Modality]) -> Result<Input> {
    let s = cfg.data.size;
    let image = cfg.complete.image.as_ref().ok_or_else(|| anyhow!("[complete] image is not set"))?;
    let mask_path = cfg.complete.mask_file.as_ref().ok_or_else(|| anyhow!("[complete] image needs mask_file"))?;
    let x = Tensor::new(vec![1, s, s], read_plane(image, s)?)?;
    let m: Vec<f32> = read_plane(mask_path, s)?.into_iter().map(|v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::new(vec![1, s, s], m)?;
    let mut conds = BTreeMap::new();
    for &md in modalities {
        let p = cfg.complete.conds.get(&md).ok_or_else(|| anyhow!("missing condition map cond.{md}"))?;
        let t = if md == Modality::Segmentation {
            let ids = pnm::read_pgm(p)?;
            if ids.width != s || ids.height != s {
                bail!("{} is not {s}x{s}", p.display());
            }
            let mut onehot = vec![0.0f32; NUM_CLASSES * s * s];
            for (i, &c) in ids.pixels.iter().enumerate() {
                if c as usize >= NUM_CLASSES {
                    bail!("{}: class id {c} out of range", p.display());
                }
                onehot[c as usize * s * s + i] = 1.0;
            }
            Tensor::new(vec![NUM_CLASSES, s, s], onehot)?
        } else {
            Tensor::new(vec![1, s, s], read_plane(p, s)?)?
        };
        conds.insert(md, t);
    }
    Ok(Input { id: "input".into(), seed: None, scene: None, masked: masked_image(&x, &mask)?, mask, conds })
}

pub fn inputs(cfg: &RunConfig, modalities: &[Modality]) -> Result<Vec<Input>> {
    if cfg.complete.image.is_some() {
        return Ok(vec![file_input(cfg, modalities)?]);
    }
    cfg.complete.seeds.clone().map(|seed| scene_input(cfg, seed, modalities)).collect()
}

/// Backbone and guidance encoders named by the config.
pub struct Nets {
    pub sched: NoiseSchedule,
    pub backbone: Arc<Denoiser<f32>>,
    pub mcus: BTreeMap<Modality, McuNet<f32>>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn load_nets(cfg: &RunConfig, modalities: &[Modality]) -> Result<Nets> {
    let path = cfg.run.backbone.as_ref().ok_or_else(|| anyhow!("[run] backbone checkpoint is not set"))?;
    let (net, sched) = load_backbone::<f32>(&load_checkpoint(path)?)?;
    if net.config().image_size != cfg.data.size {
        bail!("backbone was trained at size {}, config asks for {}", net.config().image_size, cfg.data.size);
    }
    let backbone = Arc::new(net);
    let trained = sched.config();
    let c = &cfg.schedule;
    if (trained.kind, trained.t_train, trained.beta_start, trained.beta_end)
        != (c.kind, c.t_train, c.beta_start, c.beta_end)
    {
        bail!("[schedule] differs from the schedule the backbone was trained with");
    }
    let sched = ScheduleConfig { t_sample: c.t_sample, ..trained.clone() }.build()?;
    let mut mcus = BTreeMap::new();
    for &m in modalities {
        let p = cfg
            .mcu
            .get(&m)
            .and_then(|s| s.checkpoint.as_ref())
            .ok_or_else(|| anyhow!("no checkpoint for modality {m}: set [mcu.{m}] checkpoint"))?;
        let net = load_mcu(backbone.clone(), &load_checkpoint(p)?)?;
        if net.modality() != m {
            bail!("{} holds a {} encoder, expected {m}", p.display(), net.modality());
        }
        mcus.insert(m, net);
    }
    Ok(Nets { sched, backbone, mcus })
}

/// What to sample.
#[derive(Clone, Debug)]
pub struct Plan {
    pub mode: Mode,
    pub modalities: Vec<Modality>,
    pub cmb: CmbConfig,
    pub fla_steps: usize,
    pub eta: f64,
    pub samples: usize,
    pub run_seed: u64,
}

impl Plan {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Plan {
            mode: cfg.complete.mode,
            modalities: cfg.complete.modalities.clone(),
            cmb: cfg.cmb.clone(),
            fla_steps: cfg.fla_steps(),
            eta: cfg.eta,
            samples: cfg.complete.samples,
            run_seed: cfg.run.seed,
        }
    }

    pub fn check(&self) -> Result<()> {
        match self.mode {
            Mode::Cmb if self.modalities.is_empty() => bail!("mode cmb needs at least one modality"),
            Mode::Single if self.modalities.len() != 1 => {
                bail!("mode single needs exactly one modality, got {}", self.modalities.len())
            }
            _ => Ok(()),
        }
    }

    /// Modalities whose encoders the mode actually uses.
    pub fn used_modalities(&self) -> Vec<Modality> {
        if self.mode == Mode::Unguided {
            Vec::new()
        } else {
            self.modalities.clone()
        }
    }

    pub fn sample_seed(&self, input: &Input, k: usize) -> u64 {
        mix_seed(mix_seed(self.run_seed, input.seed.unwrap_or(u64::MAX)), k as u64)
    }
}

/// One finished sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: usize,
    pub k: usize,
    pub seed: u64,
    /// Composited `[1, S, S]`.
    pub image: Tensor<f32>,
    pub latent: Tensor<f32>,
    pub trace: SampleTrace,
}

fn stack(ts: impl Iterator<Item = Tensor<f32>>) -> Result<Tensor<f32>> {
    let v: Vec<Tensor<f32>> = ts.collect();
    Ok(Tensor::stack(&v)?)
}

fn complete_batch(nets: &Nets, plan: &Plan, inputs: &[Input], jobs: &[(usize, usize)]) -> Result<Completion<f32>> {
    let task = Task {
        masked: stack(jobs.iter().map(|&(i, _)| inputs[i].masked.clone()))?,
        mask: stack(jobs.iter().map(|&(i, _)| inputs[i].mask.clone()))?,
        class_ids: None,
        seeds: jobs.iter().map(|&(i, k)| plan.sample_seed(&inputs[i], k)).collect(),
    };
    let mods = plan.used_modalities();
    let guides: Vec<Guide<'_, f32>> = mods
        .iter()
        .map(|m| {
            let cond = stack(jobs.iter().map(|&(i, _)| inputs[i].conds[m].clone()))?;
            Ok(Guide::new(&nets.mcus[m], cond)?)
        })
        .collect::<Result<_>>()?;
    let s = &nets.sched;
    Ok(match plan.mode {
        Mode::Unguided => unguided_sample(&nets.backbone, s, &task, plan.eta, None)?,
        Mode::Single => single_modality_sample(&guides[0], s, &task, plan.eta, None)?,
        Mode::Fla => fla_sample(&nets.backbone, &guides, plan.fla_steps, s, &task, plan.eta, None)?,
        Mode::Cmb => {
            let cfg = CmbConfig { plain_eta: plan.eta, ..plan.cmb.clone() };
            cmb_sample(&nets.backbone, &guides, &cfg, s, &task, None)?
        }
    })
}

/// Sample `b` of a `[B, 1, S, S]` batch as `[1, S, S]`.
fn unbatch(t: &Tensor<f32>, b: usize) -> magic_core::Result<Tensor<f32>> {
    let item = t.batch_item(b)?;
    item.reshape(item.shape()[1..].to_vec())
}

/// `plan.samples` completions of every input, in input-major order.
pub fn sample_all(nets: &Nets, plan: &Plan, inputs: &[Input]) -> Result<Vec<Sample>> {
    plan.check()?;
    for m in plan.used_modalities() {
        if !nets.mcus.contains_key(&m) {
            bail!("no encoder loaded for {m}");
        }
    }
    let jobs: Vec<(usize, usize)> = (0..inputs.len()).flat_map(|i| (0..plan.samples).map(move |k| (i, k))).collect();
    map_chunks(&jobs, 8, thread_count(), |chunk| {
        let c = complete_batch(nets, plan, inputs, chunk).map_err(|e| magic_core::Error::invalid(format!("{e:#}")))?;
        chunk
            .iter()
            .enumerate()
            .map(|(b, &(i, k))| {
                Ok(Sample {
                    input: i,
                    k,
                    seed: plan.sample_seed(&inputs[i], k),
                    image: unbatch(&c.images, b)?,
                    latent: unbatch(&c.latent, b)?,
                    trace: c.traces[b].clone(),
                })
            })
            .collect()
    })
    .map_err(Into::into)
}

pub const TRACE_HEADER: &str = "t,t_prev,guided,sigma,loss_before,loss_after,grad_norm,inner_losses";

pub fn trace_csv(trace: &SampleTrace) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut out = format!("{TRACE_HEADER}\n");
    for s in &trace.steps {
        let inner: Vec<String> = s.inner_losses.iter().map(|l| format!("{l:e}")).collect();
        out.push_str(&format!(
            "{},{},{},{:e},{},{},{},{}\n",
            s.t,
            s.t_prev,
            s.guided,
            s.sigma,
            opt(s.loss_before),
            opt(s.loss_after),
            opt(s.grad_norm),
            inner.join(";")
        ));
    }
    out
}
