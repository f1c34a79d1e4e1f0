//! Sampling chains: unguided, single-modality, feature-level addition, and
//! consistent modality blending.
//!
//! Every batch item owns its random streams, derived from its seed, so a
//! sample never depends on which other samples share its batch.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mcu::{additive_injector, McuNet};
use crate::rng::{stream, SampleRng, STREAM_GUIDED, STREAM_LATENT};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::toyworld::Modality;
use crate::unet::{no_injection, Denoiser, DenoiserOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QMode {
    /// Re-run the same step `Q` times from the same state.
    Literal,
    /// Renoise the updated latent back to `t` between inner iterations.
    TimeTravel,
}

impl QMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QMode::Literal => "literal",
            QMode::TimeTravel => "time_travel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(QMode::Literal),
            "time_travel" => Ok(QMode::TimeTravel),
            other => Err(Error::InvalidConfig(format!("unknown q_mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmbConfig {
    /// Number of guided steps, taken from the start of the chain.
    pub p: usize,
    /// Inner iterations per guided step.
    pub q: usize,
    pub gamma: f64,
    /// DDIM eta during guided steps.
    pub eta: f64,
    /// DDIM eta for every unguided step.
    pub plain_eta: f64,
    /// Per-modality weights; modalities without an entry weigh 1.
    pub delta: BTreeMap<Modality, f64>,
    pub q_mode: QMode,
    /// Rescale each sample's gradient to unit L2 norm.
    pub normalize_grad: bool,
}

impl Default for CmbConfig {
    fn default() -> Self {
        CmbConfig {
            p: 30,
            q: 5,
            gamma: 0.01,
            eta: 1.0,
            plain_eta: 0.0,
            delta: BTreeMap::new(),
            q_mode: QMode::TimeTravel,
            normalize_grad: false,
        }
    }
}

impl CmbConfig {
    pub fn delta_of(&self, m: Modality) -> f64 {
        self.delta.get(&m).copied().unwrap_or(1.0)
    }

    pub fn validate(&self, t_sample: usize) -> Result<()> {
        if self.p > t_sample {
            return Err(Error::InvalidConfig(format!("P = {} exceeds {t_sample} sampling steps", self.p)));
        }
        if self.q == 0 {
            return Err(Error::InvalidConfig("Q must be at least 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        if !(self.eta >= 0.0 && self.plain_eta >= 0.0) {
            return Err(Error::InvalidConfig("eta must be >= 0".into()));
        }
        if let Some((m, d)) = self.delta.iter().find(|(_, d)| !(**d >= 0.0 && d.is_finite())) {
            return Err(Error::InvalidConfig(format!("delta for {m} is {d}; weights must be finite and >= 0")));
        }
        Ok(())
    }
}

/// A batch of completion problems. Item `b` uses streams seeded by `seeds[b]`.
#[derive(Clone, Debug)]
pub struct Task<T> {
    /// Known region `x * (1 - mask)`, `[B, C, S, S]`.
    pub masked: Tensor<T>,
    /// `[B, 1, S, S]`, 1 where pixels are missing.
    pub mask: Tensor<T>,
    pub class_ids: Option<Vec<usize>>,
    pub seeds: Vec<u64>,
}

impl<T: Element> Task<T> {
    pub fn batch(&self) -> usize {
        self.seeds.len()
    }

    fn latent_shape(&self) -> Vec<usize> {
        let mut s = self.masked.shape().to_vec();
        s[0] = 1;
        s
    }

    fn check(&self) -> Result<()> {
        let (b, _, h, w) = self.masked.dims4()?;
        if b != self.seeds.len() || self.mask.shape() != [b, 1, h, w] {
            return Err(Error::ShapeMismatch {
                op: "completion task",
                lhs: self.masked.shape().to_vec(),
                rhs: self.mask.shape().to_vec(),
            });
        }
        if let Some(ids) = &self.class_ids {
            if ids.len() != b {
                return Err(Error::invalid("one class id per batch item required"));
            }
        }
        Ok(())
    }
}

/// A trained guidance encoder with its condition maps and their signals.
#[derive(Clone, Debug)]
pub struct Guide<'a, T> {
    pub net: &'a McuNet<T>,
    /// `[B, C_c, S, S]`.
    pub cond: Tensor<T>,
    pub signals: Vec<Tensor<T>>,
}

impl<'a, T: Element> Guide<'a, T> {
    pub fn new(net: &'a McuNet<T>, cond: Tensor<T>) -> Result<Self> {
        let signals = net.encoder.encode(&cond)?;
        Ok(Guide { net, cond, signals })
    }

    pub fn modality(&self) -> Modality {
        self.net.modality()
    }
}

/// Record a flattened encoder feature at a given chain step and scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Capture {
    pub step: usize,
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub guided: bool,
    pub sigma: f64,
    /// Guidance loss at the first inner iteration.
    pub loss_before: Option<f64>,
    /// Guidance loss re-evaluated at the updated latent, same `t`, no renoising.
    pub loss_after: Option<f64>,
    /// Gradient norm of the last inner iteration.
    pub grad_norm: Option<f64>,
    pub inner_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SampleTrace {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Completion<T> {
    /// Composited output `[B, C, S, S]`.
    pub images: Tensor<T>,
    /// Final latent before compositing.
    pub latent: Tensor<T>,
    pub traces: Vec<SampleTrace>,
    /// `[B, D]` when a capture was requested and reached.
    pub captured: Option<Tensor<T>>,
}

fn draw<T: Element>(rngs: &mut [SampleRng], item_shape: &[usize]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = rngs.iter_mut().map(|r| Tensor::randn(item_shape.to_vec(), r)).collect();
    Tensor::stack(&items)
}

fn latent_streams(seeds: &[u64]) -> Vec<SampleRng> {
    seeds.iter().map(|&s| stream(s, STREAM_LATENT)).collect()
}

fn guided_streams(seeds: &[u64], m: Modality) -> Vec<SampleRng> {
    seeds.iter().map(|&s| stream(s, STREAM_GUIDED + m as u64)).collect()
}

/// DDIM step with per-sample noise, drawn only when sigma is positive.
#[allow(clippy::too_many_arguments)]
fn step_batch<T: Element>(
    sched: &NoiseSchedule,
    z: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_prev: usize,
    eta: f64,
    rngs: &mut [SampleRng],
    item_shape: &[usize],
) -> Result<Tensor<T>> {
    let sigma = sched.sigma(t, t_prev, eta)?;
    let noise = if sigma > 0.0 { Some(draw(rngs, item_shape)?) } else { None };
    sched.ddim_step_with_noise(z, eps, t, t_prev, eta, noise.as_ref())
}

fn renoise_batch<T: Element>(
    sched: &NoiseSchedule,
    z: &Tensor<T>,
    t: usize,
    t_prev: usize,
    rngs: &mut [SampleRng],
    item_shape: &[usize],
) -> Result<Tensor<T>> {
    let (a_t, a_p) = (sched.alpha(t), sched.alpha(t_prev));
    let ratio = a_t / a_p;
    if ratio == 1.0 {
        return Ok(z.clone());
    }
    let eps = draw(rngs, item_shape)?;
    let (cz, cn) = (T::from_f64_lossy(ratio.sqrt()), T::from_f64_lossy((1.0 - ratio).sqrt()));
    z.zip_map(&eps, "renoise", |z, e| cz * z + cn * e)
}

/// Known pixels from the input, generated pixels clamped to `[0, 1]`.
pub fn composite<T: Element>(latent: &Tensor<T>, masked: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = latent.dims4()?;
    latent.expect_same_shape(masked, "composite")?;
    if mask.shape() != [b, 1, h, w] {
        return Err(Error::ShapeMismatch { op: "composite", lhs: latent.shape().to_vec(), rhs: mask.shape().to_vec() });
    }
    let hw = h * w;
    let half = T::from_f64_lossy(0.5);
    let out = (0..latent.numel())
        .map(|i| {
            let (bi, p) = (i / (c * hw), i % hw);
            if mask.data()[bi * hw + p] > half {
                latent.data()[i].max(T::zero()).min(T::one())
            } else {
                masked.data()[i]
            }
        })
        .collect();
    Tensor::new(latent.shape().to_vec(), out)
}

fn flatten_batch<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let b = t.shape()[0];
    t.reshape(vec![b, t.numel() / b.max(1)])
}

fn per_sample_sq<T: Element>(a: &Tensor<T>, b: &Tensor<T>, batch: usize) -> Vec<f64> {
    let per = a.numel() / batch.max(1);
    (0..batch)
        .map(|i| {
            a.data()[i * per..(i + 1) * per]
                .iter()
                .zip(&b.data()[i * per..(i + 1) * per])
                .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum()
        })
        .collect()
}

/// `(1 / n_scales) * sum_l sum_c delta_c * ||guided_c^l - base^l||^2`
///
/// `guided` holds one feature list per modality; gradients flow only through
/// `base`.
pub fn guidance_loss_graph<T: Element>(
    g: &mut Graph<T>,
    guided: &[&[Tensor<T>]],
    base: &[Var],
    delta: &[f64],
) -> Result<Var> {
    if guided.len() != delta.len() {
        return Err(Error::invalid("one weight per guided feature list required"));
    }
    let scales = base.len();
    let mut total = g.constant(Tensor::scalar(T::zero()));
    for (feats, &d) in guided.iter().zip(delta) {
        if feats.len() != scales {
            return Err(Error::ShapeMismatch { op: "guidance_loss", lhs: vec![feats.len()], rhs: vec![scales] });
        }
        if d == 0.0 {
            continue;
        }
        for (f, &b) in feats.iter().zip(base) {
            let c = g.constant(f.clone());
            let diff = g.sub(b, c)?;
            let sq = g.square(diff)?;
            let s = g.sum(sq)?;
            let w = g.scale(s, d / scales as f64)?;
            total = g.add(total, w)?;
        }
    }
    Ok(total)
}

/// Value-level guidance loss, accumulated in `f64`.
pub fn guidance_loss<T: Element>(guided: &[&[Tensor<T>]], base: &[Tensor<T>], delta: &[f64]) -> Result<f64> {
    if guided.len() != delta.len() {
        return Err(Error::invalid("one weight per guided feature list required"));
    }
    let scales = base.len();
    let mut total = 0.0;
    for (feats, &d) in guided.iter().zip(delta) {
        if feats.len() != scales {
            return Err(Error::ShapeMismatch { op: "guidance_loss", lhs: vec![feats.len()], rhs: vec![scales] });
        }
        for (f, b) in feats.iter().zip(base) {
            f.expect_same_shape(b, "guidance_loss")?;
            total += d * f.sub(b)?.sq_norm_f64() / scales as f64;
        }
    }
    Ok(total)
}

/// Per-sample guidance losses for a batch.
fn per_sample_loss<T: Element>(guided: &[&[Tensor<T>]], base: &[Tensor<T>], delta: &[f64], batch: usize) -> Vec<f64> {
    let scales = base.len() as f64;
    let mut out = vec![0.0; batch];
    for (feats, &d) in guided.iter().zip(delta) {
        for (f, b) in feats.iter().zip(base) {
            for (o, v) in out.iter_mut().zip(per_sample_sq(f, b, batch)) {
                *o += d * v / scales;
            }
        }
    }
    out
}

/// `z' - sigma * gamma * grad`
pub fn guidance_update<T: Element>(z_prime: &Tensor<T>, grad: &Tensor<T>, sigma: f64, gamma: f64) -> Result<Tensor<T>> {
    z_prime.axpy(T::from_f64_lossy(-sigma * gamma), grad)
}

/// Backbone output at `z_t` together with the guidance loss and its gradient
/// with respect to `z_t`.
#[derive(Clone, Debug)]
pub struct GuidanceGrad<T> {
    pub eps: Tensor<T>,
    pub base_features: Vec<Tensor<T>>,
    /// Per-sample losses.
    pub losses: Vec<f64>,
    pub grad: Tensor<T>,
}

pub fn guidance_gradient<T: Element>(
    backbone: &Denoiser<T>,
    z_t: &Tensor<T>,
    ts: &[usize],
    task: &Task<T>,
    guided: &[&[Tensor<T>]],
    delta: &[f64],
) -> Result<GuidanceGrad<T>> {
    let mut g = Graph::new();
    let p = backbone.params().bind(&mut g, false);
    let zv = g.variable(z_t.clone());
    let (mv, xv) = (g.constant(task.mask.clone()), g.constant(task.masked.clone()));
    let ids = task.class_ids.as_deref();
    let (eps_v, feat_v) = backbone.forward_graph(&mut g, &p, zv, mv, xv, ts, ids, &mut no_injection)?;
    let loss = guidance_loss_graph(&mut g, guided, &feat_v, delta)?;
    g.backward(loss)?;
    let grad = g.grad(zv).unwrap_or_else(|| Tensor::zeros(z_t.shape().to_vec()));
    let base_features: Vec<Tensor<T>> = feat_v.iter().map(|&f| g.value(f).clone()).collect();
    let losses = per_sample_loss(guided, &base_features, delta, ts.len());
    Ok(GuidanceGrad { eps: g.value(eps_v).clone(), base_features, losses, grad })
}

fn init_traces(seeds: &[u64]) -> Vec<SampleTrace> {
    seeds.iter().map(|&seed| SampleTrace { seed, ..SampleTrace::default() }).collect()
}

/// A plain DDIM chain whose noise prediction comes from `predict`.
fn plain_chain<T: Element>(
    sched: &NoiseSchedule,
    task: &Task<T>,
    eta: f64,
    capture: Option<Capture>,
    mut predict: impl FnMut(usize, &Tensor<T>, &[usize]) -> Result<DenoiserOutput<T>>,
) -> Result<Completion<T>> {
    task.check()?;
    let item = task.latent_shape();
    let mut rngs = latent_streams(&task.seeds);
    let mut z = draw::<T>(&mut rngs, &item)?;
    let mut traces = init_traces(&task.seeds);
    let mut captured = None;
    for (i, (t, tp)) in sched.step_pairs().into_iter().enumerate() {
        let ts = vec![t; task.batch()];
        let out = predict(i, &z, &ts)?;
        if let Some(c) = capture.filter(|c| c.step == i) {
            captured = Some(flatten_batch(&out.enc_features[c.scale])?);
        }
        let sigma = sched.sigma(t, tp, eta)?;
        z = step_batch(sched, &z, &out.eps_pred, t, tp, eta, &mut rngs, &item)?;
        for tr in &mut traces {
            tr.steps.push(StepRecord { t, t_prev: tp, sigma, ..StepRecord::default() });
        }
    }
    Ok(Completion { images: composite(&z, &task.masked, &task.mask)?, latent: z, traces, captured })
}

/// Backbone-only sampling.
pub fn unguided_sample<T: Element>(
    backbone: &Denoiser<T>,
    sched: &NoiseSchedule,
    task: &Task<T>,
    eta: f64,
    capture: Option<Capture>,
) -> Result<Completion<T>> {
    let ids = task.class_ids.clone();
    plain_chain(sched, task, eta, capture, |_, z, ts| backbone.denoise(z, ts, &task.mask, &task.masked, ids.as_deref()))
}

/// Direct sampling through one guidance encoder.
pub fn single_modality_sample<T: Element>(
    guide: &Guide<'_, T>,
    sched: &NoiseSchedule,
    task: &Task<T>,
    eta: f64,
    capture: Option<Capture>,
) -> Result<Completion<T>> {
    let ids = task.class_ids.clone();
    plain_chain(sched, task, eta, capture, |_, z, ts| {
        guide.net.denoise_with_signals(z, ts, &task.mask, &task.masked, &guide.signals, ids.as_deref())
    })
}

/// Feature-level addition: every modality's signal summed into the
/// backbone for the first `fla_steps` steps.
pub fn fla_sample<T: Element>(
    backbone: &Denoiser<T>,
    guides: &[Guide<'_, T>],
    fla_steps: usize,
    sched: &NoiseSchedule,
    task: &Task<T>,
    eta: f64,
    capture: Option<Capture>,
) -> Result<Completion<T>> {
    if fla_steps > sched.t_sample() {
        return Err(Error::InvalidConfig(format!("fla_steps {fla_steps} exceeds {} steps", sched.t_sample())));
    }
    let summed: Option<Vec<Tensor<T>>> = match guides.split_first() {
        None => None,
        Some((first, rest)) => {
            let mut acc = first.signals.clone();
            for gd in rest {
                for (a, s) in acc.iter_mut().zip(&gd.signals) {
                    *a = a.add(s)?;
                }
            }
            Some(acc)
        }
    };
    let ids = task.class_ids.clone();
    plain_chain(sched, task, eta, capture, |i, z, ts| match &summed {
        Some(sig) if i < fla_steps => {
            backbone.denoise_with(z, ts, &task.mask, &task.masked, ids.as_deref(), &mut additive_injector(sig))
        }
        _ => backbone.denoise(z, ts, &task.mask, &task.masked, ids.as_deref()),
    })
}

/// Mutable state of a blended chain.
pub struct CmbState<T> {
    pub z: Tensor<T>,
    /// One latent per guide, in guide order.
    pub w: Vec<Tensor<T>>,
    pub z_rngs: Vec<SampleRng>,
    pub w_rngs: Vec<Vec<SampleRng>>,
}

impl<T: Element> CmbState<T> {
    /// Independent standard-normal draws for `z` and every guide latent.
    pub fn init(task: &Task<T>, guides: &[Guide<'_, T>]) -> Result<Self> {
        let item = task.latent_shape();
        let mut z_rngs = latent_streams(&task.seeds);
        let z = draw(&mut z_rngs, &item)?;
        let mut w = Vec::new();
        let mut w_rngs = Vec::new();
        for gd in guides {
            let mut r = guided_streams(&task.seeds, gd.modality());
            w.push(draw(&mut r, &item)?);
            w_rngs.push(r);
        }
        Ok(CmbState { z, w, z_rngs, w_rngs })
    }
}

/// Per-step output besides the state update.
#[derive(Clone, Debug, Default)]
pub struct CmbStepInfo<T> {
    pub records: Vec<StepRecord>,
    pub warnings: Vec<String>,
    /// Backbone features of the last inner iteration.
    pub base_features: Vec<Tensor<T>>,
}

fn is_inert(cfg: &CmbConfig, guides: &[Guide<'_, impl Element>]) -> bool {
    cfg.gamma == 0.0 || guides.iter().all(|g| cfg.delta_of(g.modality()) == 0.0)
}

/// One guided step from `t` to `t_prev`.
///
/// With `gamma = 0` or every weight zero the step is a plain DDIM step at
/// `cfg.eta` and no guide latent is touched.
#[allow(clippy::too_many_arguments)]
pub fn cmb_step<T: Element>(
    state: &mut CmbState<T>,
    t: usize,
    t_prev: usize,
    backbone: &Denoiser<T>,
    guides: &[Guide<'_, T>],
    task: &Task<T>,
    cfg: &CmbConfig,
    sched: &NoiseSchedule,
) -> Result<CmbStepInfo<T>> {
    let batch = task.batch();
    let item = task.latent_shape();
    let ts = vec![t; batch];
    let ids = task.class_ids.as_deref();
    let sigma = sched.sigma(t, t_prev, cfg.eta)?;
    let mut warnings = Vec::new();
    if sigma == 0.0 && cfg.gamma > 0.0 {
        warnings.push(format!("t={t}: sigma is 0, guidance update is inert"));
    }
    if is_inert(cfg, guides) {
        let out = backbone.denoise(&state.z, &ts, &task.mask, &task.masked, ids)?;
        state.z = step_batch(sched, &state.z, &out.eps_pred, t, t_prev, cfg.eta, &mut state.z_rngs, &item)?;
        let rec = StepRecord { t, t_prev, guided: true, sigma, ..StepRecord::default() };
        return Ok(CmbStepInfo { records: vec![rec; batch], warnings, base_features: out.enc_features });
    }

    let active: Vec<usize> = (0..guides.len()).filter(|&i| cfg.delta_of(guides[i].modality()) > 0.0).collect();
    let delta: Vec<f64> = active.iter().map(|&i| cfg.delta_of(guides[i].modality())).collect();
    let advance_guides = |state: &mut CmbState<T>| -> Result<Vec<Vec<Tensor<T>>>> {
        let mut feats = Vec::with_capacity(active.len());
        for &i in &active {
            let gd = &guides[i];
            let out = gd.net.denoise_with_signals(&state.w[i], &ts, &task.mask, &task.masked, &gd.signals, ids)?;
            state.w[i] =
                step_batch(sched, &state.w[i], &out.eps_pred, t, t_prev, cfg.eta, &mut state.w_rngs[i], &item)?;
            feats.push(out.enc_features);
        }
        Ok(feats)
    };

    let z_start = state.z.clone();
    let mut z_t = state.z.clone();
    let mut guided_feats = advance_guides(state)?;
    let mut inner: Vec<Vec<f64>> = vec![Vec::new(); batch];
    let mut grad_norms = vec![0.0; batch];
    let mut base_features = Vec::new();
    let mut probe_from = (z_t.clone(), Tensor::zeros(z_t.shape().to_vec()));
    let mut z_next = z_t.clone();
    for q in 0..cfg.q {
        if q > 0 {
            match cfg.q_mode {
                QMode::TimeTravel => z_t = renoise_batch(sched, &z_next, t, t_prev, &mut state.z_rngs, &item)?,
                QMode::Literal => {
                    z_t = z_start.clone();
                    guided_feats = advance_guides(state)?;
                }
            }
        }
        let refs: Vec<&[Tensor<T>]> = guided_feats.iter().map(Vec::as_slice).collect();
        let gg = guidance_gradient(backbone, &z_t, &ts, task, &refs, &delta)?;
        if !gg.grad.all_finite() {
            return Err(Error::NonFinite { t, context: format!("guidance gradient, inner iteration {q}") });
        }
        for (b, l) in gg.losses.iter().enumerate() {
            inner[b].push(*l);
        }
        let mut grad = gg.grad;
        base_features = gg.base_features;
        let per = grad.numel() / batch;
        for (b, n) in grad_norms.iter_mut().enumerate() {
            *n = grad.data()[b * per..(b + 1) * per].iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        }
        if cfg.normalize_grad {
            let scaled = grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v / T::from_f64_lossy(grad_norms[i / per].max(1e-12)))
                .collect();
            grad = Tensor::new(grad.shape().to_vec(), scaled)?;
        }
        let z_prime = step_batch(sched, &z_t, &gg.eps, t, t_prev, cfg.eta, &mut state.z_rngs, &item)?;
        z_next = guidance_update(&z_prime, &grad, sigma, cfg.gamma)?;
        probe_from = (z_t.clone(), grad);
    }
    state.z = z_next;

    // renoise-free probe: the loss at the corrected latent, same t
    let (z_last, grad_last) = probe_from;
    let z_probe = guidance_update(&z_last, &grad_last, sigma, cfg.gamma)?;
    let probe = backbone.denoise(&z_probe, &ts, &task.mask, &task.masked, ids)?;
    let refs: Vec<&[Tensor<T>]> = guided_feats.iter().map(Vec::as_slice).collect();
    let after = per_sample_loss(&refs, &probe.enc_features, &delta, batch);
    if after.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t, context: "guidance loss after update".into() });
    }
    let records = (0..batch)
        .map(|b| StepRecord {
            t,
            t_prev,
            guided: true,
            sigma,
            loss_before: inner[b].first().copied(),
            loss_after: Some(after[b]),
            grad_norm: Some(grad_norms[b]),
            inner_losses: inner[b].clone(),
        })
        .collect();
    Ok(CmbStepInfo { records, warnings, base_features })
}

/// Blended sampling: guided steps for the first `cfg.p` steps, plain backbone
/// steps afterwards.
///
/// Configurations where guidance cannot act (`P = 0`, `gamma = 0`, every
/// weight zero, or no guides) run the unguided chain, so they reproduce it
/// bit for bit.
pub fn cmb_sample<T: Element>(
    backbone: &Denoiser<T>,
    guides: &[Guide<'_, T>],
    cfg: &CmbConfig,
    sched: &NoiseSchedule,
    task: &Task<T>,
    capture: Option<Capture>,
) -> Result<Completion<T>> {
    cfg.validate(sched.t_sample())?;
    task.check()?;
    for gd in guides {
        if gd.cond.shape()[0] != task.batch() {
            return Err(Error::invalid(format!("{} condition batch does not match the task", gd.modality())));
        }
    }
    if cfg.p == 0 || guides.is_empty() || is_inert(cfg, guides) {
        return unguided_sample(backbone, sched, task, cfg.plain_eta, capture);
    }
    let item = task.latent_shape();
    let mut state = CmbState::init(task, guides)?;
    let mut traces = init_traces(&task.seeds);
    let mut captured = None;
    for (i, (t, tp)) in sched.step_pairs().into_iter().enumerate() {
        if i < cfg.p {
            let info = cmb_step(&mut state, t, tp, backbone, guides, task, cfg, sched)?;
            if let Some(c) = capture.filter(|c| c.step == i) {
                captured = Some(flatten_batch(&info.base_features[c.scale])?);
            }
            for (tr, rec) in traces.iter_mut().zip(info.records) {
                tr.steps.push(rec);
                tr.warnings.extend(info.warnings.iter().cloned());
            }
        } else {
            let ts = vec![t; task.batch()];
            let out = backbone.denoise(&state.z, &ts, &task.mask, &task.masked, task.class_ids.as_deref())?;
            if let Some(c) = capture.filter(|c| c.step == i) {
                captured = Some(flatten_batch(&out.enc_features[c.scale])?);
            }
            let sigma = sched.sigma(t, tp, cfg.plain_eta)?;
            state.z = step_batch(sched, &state.z, &out.eps_pred, t, tp, cfg.plain_eta, &mut state.z_rngs, &item)?;
            for tr in &mut traces {
                tr.steps.push(StepRecord { t, t_prev: tp, sigma, ..StepRecord::default() });
            }
        }
    }
    Ok(Completion { images: composite(&state.z, &task.masked, &task.mask)?, latent: state.z, traces, captured })
}
