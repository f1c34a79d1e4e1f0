//! Noise-prediction training for the backbone and the guidance encoders.
//!
//! Every batch is a pure function of `(seed, step)`, so a run resumed from a
//! checkpoint continues exactly as if it had never stopped.

use std::sync::Arc;

use rand::Rng;

use crate::checkpoint::{get_schedule_config, get_unet_config, put_schedule_config, put_unet_config, Checkpoint};
use crate::error::{Error, Result};
use crate::mcu::{GuidanceEncoder, GuidanceEncoderConfig, McuNet};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::rng::{stream, STREAM_TRAIN};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Element, Graph, Tensor};
use crate::toyworld::{extract_modality, generate_mask, generate_scene, MaskSpec, Modality, SceneConfig};
use crate::unet::{masked_image, no_injection, Denoiser, UNetConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Reuse the step-0 batch (scenes, masks, timesteps and noise) forever.
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 20_000, batch_size: 32, adam: AdamConfig::default(), seed: 0, fixed_batch: false }
    }
}

/// Scene seeds to draw training examples from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub seeds: Vec<u64>,
    pub scene: SceneConfig,
}

impl TrainData {
    pub fn new(seeds: Vec<u64>, scene: SceneConfig) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(TrainData { seeds, scene })
    }
}

/// One training batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x0: Tensor<T>,
    pub mask: Tensor<T>,
    pub masked: Tensor<T>,
    pub cond: Option<Tensor<T>>,
    pub class_ids: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
    pub z_t: Tensor<T>,
}

/// Mix two words into a seed (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Build the batch for `step` of a run seeded with `cfg.seed`.
pub fn make_batch<T: Element>(
    data: &TrainData,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    step: u64,
    modality: Option<Modality>,
) -> Result<Batch<T>> {
    let step = if cfg.fixed_batch { 0 } else { step };
    let mut rng = stream(mix_seed(cfg.seed, step), STREAM_TRAIN);
    let (mut xs, mut ms, mut cs, mut ids, mut ts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.batch_size {
        let seed = data.seeds[rng.random_range(0..data.seeds.len())];
        let scene = generate_scene(seed, &data.scene)?;
        let mask = generate_mask(&MaskSpec::random(rng.random()), data.scene.size)?;
        if let Some(m) = modality {
            cs.push(extract_modality(&scene, m)?.cast::<T>());
        }
        xs.push(scene.image.cast::<T>());
        ms.push(mask.cast::<T>());
        ids.push(scene.class_count_label);
        ts.push(rng.random_range(1..=sched.t_train()));
    }
    let x0 = Tensor::stack(&xs)?;
    let mask = Tensor::stack(&ms)?;
    let masked = masked_image(&x0, &mask)?;
    let eps = Tensor::randn(x0.shape().to_vec(), &mut rng);
    let z_t = sched.forward_noise_batch(&x0, &ts, &eps)?;
    let cond = if modality.is_some() { Some(Tensor::stack(&cs)?) } else { None };
    Ok(Batch { x0, mask, masked, cond, class_ids: ids, t: ts, eps, z_t })
}

fn class_ids<'a, T: Element>(net: &Denoiser<T>, batch: &'a Batch<T>) -> Option<&'a [usize]> {
    (net.config().cond_embed_classes > 0).then_some(batch.class_ids.as_slice())
}

fn save_optimizer(ck: &mut Checkpoint, opt: &Adam) {
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        ck.push(format!("adam.m.{i}"), &Tensor::new(vec![m.len()], m.clone()).expect("moment extent"));
        ck.push(format!("adam.v.{i}"), &Tensor::new(vec![v.len()], v.clone()).expect("moment extent"));
    }
    ck.set_meta("adam.step", opt.step);
}

fn load_optimizer<T: Element>(ck: &Checkpoint, cfg: AdamConfig, params: &ParamStore<T>) -> Result<Adam> {
    let mut opt = Adam::new(cfg, params);
    if ck.get("adam.m.0").is_none() && !params.is_empty() {
        return Ok(opt);
    }
    for i in 0..params.len() {
        let get = |k: String| -> Result<Vec<f64>> {
            let t = ck.get(&k).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")))?;
            Ok(t.to::<f64>().into_vec())
        };
        opt.m[i] = get(format!("adam.m.{i}"))?;
        opt.v[i] = get(format!("adam.v.{i}"))?;
        if opt.m[i].len() != params.tensors()[i].numel() {
            return Err(Error::Checkpoint(format!("optimizer moment {i} has the wrong extent")));
        }
    }
    opt.step = ck.meta_parse("adam.step")?;
    Ok(opt)
}

/// Trainer for the backbone noise predictor.
pub struct BackboneTrainer<T> {
    pub net: Denoiser<T>,
    pub sched: NoiseSchedule,
    pub opt: Adam,
    pub cfg: TrainConfig,
    pub step: u64,
    pub last_loss: Option<f64>,
}

impl<T: Element> BackboneTrainer<T> {
    pub fn new(net_cfg: UNetConfig, sched: NoiseSchedule, cfg: TrainConfig) -> Result<Self> {
        let net = Denoiser::build(net_cfg, cfg.seed)?;
        let opt = Adam::new(cfg.adam.clone(), net.params());
        Ok(BackboneTrainer { net, sched, opt, cfg, step: 0, last_loss: None })
    }

    /// Resume from a checkpoint written by [`checkpoint`](Self::checkpoint).
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let (net, sched) = load_backbone::<T>(ck)?;
        let opt = load_optimizer(ck, cfg.adam.clone(), net.params())?;
        let step = ck.meta_parse("train.step")?;
        Ok(BackboneTrainer { net, sched, opt, cfg, step, last_loss: ck.meta_parse("train.final_loss").ok() })
    }

    /// Mean squared noise-prediction error on `batch` without updating.
    pub fn loss_on(&self, batch: &Batch<T>) -> Result<f64> {
        let out = self.net.denoise(&batch.z_t, &batch.t, &batch.mask, &batch.masked, class_ids(&self.net, batch))?;
        Ok(out.eps_pred.sub(&batch.eps)?.sq_norm_f64() / batch.eps.numel() as f64)
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step_once(&mut self, data: &TrainData) -> Result<f64> {
        let batch = make_batch::<T>(data, &self.sched, &self.cfg, self.step, None)?;
        let mut g = Graph::new();
        let p = self.net.params().bind(&mut g, true);
        let (z, m, x) =
            (g.constant(batch.z_t.clone()), g.constant(batch.mask.clone()), g.constant(batch.masked.clone()));
        let ids = class_ids(&self.net, &batch);
        let (eps_pred, _) = self.net.forward_graph(&mut g, &p, z, m, x, &batch.t, ids, &mut no_injection)?;
        let target = g.constant(batch.eps.clone());
        let diff = g.sub(eps_pred, target)?;
        let sq = g.square(diff)?;
        let loss_v = g.mean(sq)?;
        let loss = g.value(loss_v).item()?.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite { t: self.step as usize, context: "backbone training loss".into() });
        }
        g.backward(loss_v)?;
        let grads: Vec<_> = p.vars().iter().map(|&v| g.grad(v)).collect();
        self.opt.update(self.net.params_mut(), &grads)?;
        self.step += 1;
        self.last_loss = Some(loss);
        Ok(loss)
    }

    /// Train until `cfg.steps`, reporting `(step, loss)` after each update.
    pub fn run(&mut self, data: &TrainData, mut log: impl FnMut(u64, f64)) -> Result<()> {
        while self.step < self.cfg.steps {
            let loss = self.step_once(data)?;
            log(self.step, loss);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = backbone_checkpoint(&self.net, &self.sched);
        save_optimizer(&mut ck, &self.opt);
        ck.set_meta("train.seed", self.cfg.seed);
        ck.set_meta("train.step", self.step);
        if let Some(l) = self.last_loss {
            ck.set_meta("train.final_loss", l);
        }
        ck
    }
}

/// Parameters, architecture and schedule of a backbone.
pub fn backbone_checkpoint<T: Element>(net: &Denoiser<T>, sched: &NoiseSchedule) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "backbone");
    ck.push_params("param.", net.params());
    put_unet_config(&mut ck, "unet.", net.config());
    put_schedule_config(&mut ck, sched.config());
    ck.set_meta("param_digest", net.params().digest());
    ck
}

pub fn load_backbone<T: Element>(ck: &Checkpoint) -> Result<(Denoiser<T>, NoiseSchedule)> {
    if ck.meta_str("kind")? != "backbone" {
        return Err(Error::Checkpoint("not a backbone checkpoint".into()));
    }
    let mut net = Denoiser::build(get_unet_config(ck, "unet.")?, 0)?;
    ck.load_params("param.", net.params_mut())?;
    Ok((net, get_schedule_config(ck)?.build()?))
}

/// Trainer for one guidance encoder on top of a frozen backbone.
pub struct McuTrainer<T> {
    pub backbone: Arc<Denoiser<T>>,
    pub encoder: GuidanceEncoder<T>,
    pub sched: NoiseSchedule,
    pub opt: Adam,
    pub cfg: TrainConfig,
    pub step: u64,
    pub last_loss: Option<f64>,
}

impl<T: Element> McuTrainer<T> {
    pub fn new(backbone: Arc<Denoiser<T>>, sched: NoiseSchedule, modality: Modality, cfg: TrainConfig) -> Result<Self> {
        let enc_cfg = GuidanceEncoderConfig::for_backbone(modality, backbone.config())?;
        let encoder = GuidanceEncoder::build(enc_cfg, cfg.seed)?;
        let opt = Adam::new(cfg.adam.clone(), encoder.params());
        Ok(McuTrainer { backbone, encoder, sched, opt, cfg, step: 0, last_loss: None })
    }

    pub fn resume(backbone: Arc<Denoiser<T>>, ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let net = load_mcu(backbone, ck)?;
        let opt = load_optimizer(ck, cfg.adam.clone(), net.encoder.params())?;
        let sched = get_schedule_config(ck)?.build()?;
        let step = ck.meta_parse("train.step")?;
        Ok(McuTrainer {
            backbone: net.backbone,
            encoder: net.encoder,
            sched,
            opt,
            cfg,
            step,
            last_loss: ck.meta_parse("train.final_loss").ok(),
        })
    }

    pub fn modality(&self) -> Modality {
        self.encoder.config().modality
    }

    /// Guided and unguided noise-prediction losses on `batch`.
    pub fn losses_on(&self, batch: &Batch<T>) -> Result<(f64, f64)> {
        let cond = batch.cond.as_ref().ok_or_else(|| Error::invalid("batch lacks a condition map"))?;
        let ids = class_ids(&self.backbone, batch);
        let net = McuNet::new(self.backbone.clone(), self.encoder.clone())?;
        let guided = net.denoise(&batch.z_t, &batch.t, &batch.mask, &batch.masked, cond, ids)?;
        let plain = self.backbone.denoise(&batch.z_t, &batch.t, &batch.mask, &batch.masked, ids)?;
        let n = batch.eps.numel() as f64;
        Ok((guided.eps_pred.sub(&batch.eps)?.sq_norm_f64() / n, plain.eps_pred.sub(&batch.eps)?.sq_norm_f64() / n))
    }

    pub fn batch(&self, data: &TrainData, step: u64) -> Result<Batch<T>> {
        make_batch(data, &self.sched, &self.cfg, step, Some(self.modality()))
    }

    pub fn step_once(&mut self, data: &TrainData) -> Result<f64> {
        let batch = self.batch(data, self.step)?;
        let mut g = Graph::new();
        let pb = self.backbone.params().bind(&mut g, false);
        let pe = self.encoder.params().bind(&mut g, true);
        let cond = g.constant(batch.cond.clone().expect("modality batch has a condition"));
        let signals = self.encoder.encode_graph(&mut g, &pe, cond)?;
        let (z, m, x) =
            (g.constant(batch.z_t.clone()), g.constant(batch.mask.clone()), g.constant(batch.masked.clone()));
        let ids = class_ids(&self.backbone, &batch);
        let mut inject = |g: &mut Graph<T>, l: usize, f| g.add(f, signals[l]);
        let (eps_pred, _) = self.backbone.forward_graph(&mut g, &pb, z, m, x, &batch.t, ids, &mut inject)?;
        let target = g.constant(batch.eps.clone());
        let diff = g.sub(eps_pred, target)?;
        let sq = g.square(diff)?;
        let loss_v = g.mean(sq)?;
        let loss = g.value(loss_v).item()?.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite { t: self.step as usize, context: "guidance encoder training loss".into() });
        }
        g.backward(loss_v)?;
        let grads: Vec<_> = pe.vars().iter().map(|&v| g.grad(v)).collect();
        self.opt.update(self.encoder.params_mut(), &grads)?;
        self.step += 1;
        self.last_loss = Some(loss);
        Ok(loss)
    }

    pub fn run(&mut self, data: &TrainData, mut log: impl FnMut(u64, f64)) -> Result<()> {
        while self.step < self.cfg.steps {
            let loss = self.step_once(data)?;
            log(self.step, loss);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = mcu_checkpoint(&self.encoder, &self.backbone, &self.sched);
        save_optimizer(&mut ck, &self.opt);
        ck.set_meta("train.seed", self.cfg.seed);
        ck.set_meta("train.step", self.step);
        if let Some(l) = self.last_loss {
            ck.set_meta("train.final_loss", l);
        }
        ck
    }
}

/// Encoder-only checkpoint tied to its backbone by parameter digest.
pub fn mcu_checkpoint<T: Element>(
    encoder: &GuidanceEncoder<T>,
    backbone: &Denoiser<T>,
    sched: &NoiseSchedule,
) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "mcu");
    ck.set_meta("modality", encoder.config().modality);
    ck.set_meta("backbone_digest", backbone.params().digest());
    put_unet_config(&mut ck, "unet.", backbone.config());
    put_schedule_config(&mut ck, sched.config());
    ck.push_params("param.", encoder.params());
    ck
}

/// Load an encoder checkpoint against `backbone`, verifying the digest.
pub fn load_mcu<T: Element>(backbone: Arc<Denoiser<T>>, ck: &Checkpoint) -> Result<McuNet<T>> {
    if ck.meta_str("kind")? != "mcu" {
        return Err(Error::Checkpoint("not a guidance-encoder checkpoint".into()));
    }
    let digest = backbone.params().digest();
    if ck.meta_str("backbone_digest")? != digest {
        return Err(Error::Checkpoint("encoder was trained against a different backbone".into()));
    }
    let modality = Modality::parse(ck.meta_str("modality")?)?;
    let enc_cfg = GuidanceEncoderConfig::for_backbone(modality, backbone.config())?;
    let mut encoder = GuidanceEncoder::build(enc_cfg, 0)?;
    ck.load_params("param.", encoder.params_mut())?;
    McuNet::new(backbone, encoder)
}
