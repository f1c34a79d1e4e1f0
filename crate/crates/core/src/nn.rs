//! Parameter storage, layers built on the tape, and the Adam optimizer.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, ResampleDir, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace every tensor, keeping names; shapes must match.
    pub fn set_all(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::invalid(format!("expected {} tensors, got {}", self.tensors.len(), tensors.len())));
        }
        for (old, new) in self.tensors.iter().zip(&tensors) {
            old.expect_same_shape(new, "set_all")?;
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Load tensors by name from `(name, tensor)` pairs; every parameter must
    /// be present with a matching shape.
    pub fn load_named<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<()> {
        let map: std::collections::HashMap<&str, &Tensor<T>> = entries.into_iter().collect();
        let mut loaded = Vec::with_capacity(self.tensors.len());
        for (name, old) in self.names.iter().zip(&self.tensors) {
            let t = map.get(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != old.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    old.shape()
                )));
            }
            loaded.push((*t).clone());
        }
        self.tensors = loaded;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// SHA-256 over names, shapes and value bits, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update([T::DTYPE as u8]);
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits_u64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Record every parameter on `g`, grad-enabled when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect() }
    }
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn,
    Zeros,
}

fn init_tensor<T: Element>(shape: Vec<usize>, fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::FanIn => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_tensor(vec![cout, cin, k, k], cin * k * k, init, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Conv2d { weight, bias, stride, padding: k / 2 }
    }

    /// Stride 2 on even extents is realized as a stride-1 convolution
    /// followed by top-left decimation, which keeps every output integral.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (w, b) = (p.get(self.weight), Some(p.get(self.bias)));
        if self.stride == 2 {
            let full = g.conv2d(x, w, b, 1, self.padding)?;
            return g.resample(full, ResampleDir::Down);
        }
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_tensor(vec![n_out, n_in], n_in, Init::FanIn, rng));
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![n_out])));
        Linear { weight, bias }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.get(self.weight), self.bias.map(|b| p.get(b)))
    }
}

/// Group normalization with per-channel affine.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

/// Largest divisor of `channels` not exceeding 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

impl Norm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![channels], T::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![channels]));
        Norm { gain, bias, groups: norm_groups(channels) }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.normalize_channels(x, p.get(self.gain), p.get(self.bias), self.groups, NORM_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// Adam with bias correction. Moments are kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Element>(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Apply one update. `grads[i]` of `None` means a zero gradient.
    /// Returns the pre-clip global gradient norm.
    pub fn update<T: Element>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<f64> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match parameter count"));
        }
        let norm = grads.iter().flatten().map(Tensor::sq_norm_f64).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { t: 0, context: format!("gradient norm at optimizer step {}", self.step) });
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mut updated = Vec::with_capacity(store.len());
        for (i, t) in store.tensors().iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref();
            let data = t
                .data()
                .iter()
                .enumerate()
                .map(|(j, &p)| {
                    let gj = g.map_or(0.0, |g| g.data()[j].as_f64()) * scale;
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                    let upd = self.cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.eps);
                    T::from_f64_lossy(p.as_f64() - upd)
                })
                .collect();
            updated.push(Tensor::new(t.shape().to_vec(), data)?);
        }
        store.set_all(updated)?;
        Ok(norm)
    }
}
