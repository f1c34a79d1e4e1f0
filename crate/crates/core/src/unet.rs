//! Masked-image-conditioned residual U-Net predicting the diffusion noise.
//!
//! The network sees `concat(z_t, mask, masked_image)` and exposes the output
//! of every encoder scale. Guidance encoders add their signal at exactly those
//! points through the injection hook of [`Denoiser::forward_graph`].

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, Linear, Norm, ParamStore};
use crate::rng::{stream, STREAM_INIT};
use crate::tensor::{Element, Graph, ResampleDir, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub image_size: usize,
    /// Latent channels + 1 mask channel + masked-image channels.
    pub in_channels: usize,
    pub base_channels: usize,
    /// One multiplier per scale; its length is the number of downsamplings plus one.
    pub channel_mults: Vec<usize>,
    pub blocks_per_scale: usize,
    pub time_embed_dim: usize,
    /// Size of the class-label embedding; 0 disables it.
    pub cond_embed_classes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            image_size: 32,
            in_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            blocks_per_scale: 2,
            time_embed_dim: 128,
            cond_embed_classes: 0,
        }
    }
}

impl UNetConfig {
    /// Number of downsamplings.
    pub fn levels(&self) -> usize {
        self.channel_mults.len().saturating_sub(1)
    }

    pub fn scales(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn scale_channels(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn latent_channels(&self) -> usize {
        (self.in_channels - 1) / 2
    }

    /// Spatial extent of encoder scale `l`.
    pub fn scale_size(&self, l: usize) -> usize {
        self.image_size >> l
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be non-empty and positive".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << self.levels()) {
            return bad(format!("image_size {} not divisible by 2^{}", self.image_size, self.levels()));
        }
        if self.in_channels < 3 || self.in_channels.is_multiple_of(2) {
            return bad(format!("in_channels {} must be 2C + 1 with C >= 1", self.in_channels));
        }
        if self.base_channels == 0 || self.blocks_per_scale == 0 {
            return bad("base_channels and blocks_per_scale must be positive".into());
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim {} must be even and >= 2", self.time_embed_dim));
        }
        Ok(())
    }
}

/// `[sin(t f_i), cos(t f_i)]` with geometrically spaced frequencies.
pub fn timestep_embedding<T: Element>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| T::from_f64_lossy(a.sin())));
        data.extend(args.iter().map(|a| T::from_f64_lossy(a.cos())));
    }
    Tensor::new(vec![ts.len(), dim], data).expect("embedding extent")
}

/// Known region of the image: `x * (1 - mask)`.
pub fn masked_image<T: Element>(x: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(mask, "masked_image", |v, m| v * (T::one() - m))
}

/// Norm, SiLU, conv, optional embedding bias, norm, SiLU, conv, residual.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv2d,
    emb: Option<Linear>,
    norm2: Norm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub(crate) fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: Option<usize>,
        rng: &mut impl rand::Rng,
    ) -> Self {
        ResBlock {
            norm1: Norm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, Init::FanIn, rng),
            emb: emb_dim.map(|d| Linear::new(store, &format!("{name}.emb"), d, cout, true, rng)),
            norm2: Norm::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, Init::FanIn, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, Init::FanIn, rng)),
        }
    }

    /// `emb` is the already-activated embedding `[B, E]`.
    pub(crate) fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var, emb: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = g.silu(h)?;
        let mut h = self.conv1.forward(g, p, h)?;
        if let (Some(layer), Some(e)) = (&self.emb, emb) {
            let bias = layer.forward(g, p, e)?;
            h = g.add_channel(h, bias)?;
        }
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        let res = match &self.skip {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        g.add(h, res)
    }
}

#[derive(Clone, Debug)]
struct EncScale {
    down: Option<Conv2d>,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct DecScale {
    blocks: Vec<ResBlock>,
    up: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct Layout {
    time1: Linear,
    time2: Linear,
    class_emb: Option<Linear>,
    conv_in: Conv2d,
    enc: Vec<EncScale>,
    mid: ResBlock,
    /// Deepest scale first.
    dec: Vec<DecScale>,
    out_norm: Norm,
    out_conv: Conv2d,
}

/// Noise prediction plus the encoder features seen by the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput<T> {
    pub eps_pred: Tensor<T>,
    /// One tensor per scale, `image_size / 2^l` wide.
    pub enc_features: Vec<Tensor<T>>,
}

/// Per-scale feature hook: receives `(graph, scale, F_enc)` and returns the
/// feature that flows onward and into the skip connection.
pub type Injector<'a, T> = dyn FnMut(&mut Graph<T>, usize, Var) -> Result<Var> + 'a;

/// Identity injection.
pub fn no_injection<T: Element>(_: &mut Graph<T>, _: usize, f: Var) -> Result<Var> {
    Ok(f)
}

#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    cfg: UNetConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Element> Denoiser<T> {
    /// Seeded initialization: fan-in uniform weights, zero biases.
    pub fn build(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, STREAM_INIT);
        let mut s = ParamStore::new();
        let ch = cfg.scale_channels();
        let e = cfg.time_embed_dim;
        let time1 = Linear::new(&mut s, "time.0", e, e, true, &mut rng);
        let time2 = Linear::new(&mut s, "time.1", e, e, true, &mut rng);
        let class_emb = (cfg.cond_embed_classes > 0)
            .then(|| Linear::new(&mut s, "class", cfg.cond_embed_classes, e, false, &mut rng));
        let conv_in = Conv2d::new(&mut s, "conv_in", cfg.in_channels, ch[0], 3, 1, Init::FanIn, &mut rng);
        let mut enc = Vec::new();
        for l in 0..cfg.scales() {
            let down = (l > 0)
                .then(|| Conv2d::new(&mut s, &format!("enc.{l}.down"), ch[l - 1], ch[l], 3, 2, Init::FanIn, &mut rng));
            let blocks = (0..cfg.blocks_per_scale)
                .map(|b| ResBlock::new(&mut s, &format!("enc.{l}.block.{b}"), ch[l], ch[l], Some(e), &mut rng))
                .collect();
            enc.push(EncScale { down, blocks });
        }
        let deepest = ch[cfg.levels()];
        let mid = ResBlock::new(&mut s, "mid", deepest, deepest, Some(e), &mut rng);
        let mut dec = Vec::new();
        for l in (0..cfg.scales()).rev() {
            let blocks = (0..cfg.blocks_per_scale)
                .map(|b| {
                    let cin = if b == 0 { 2 * ch[l] } else { ch[l] };
                    ResBlock::new(&mut s, &format!("dec.{l}.block.{b}"), cin, ch[l], Some(e), &mut rng)
                })
                .collect();
            let up = (l > 0)
                .then(|| Conv2d::new(&mut s, &format!("dec.{l}.up"), ch[l], ch[l - 1], 3, 1, Init::FanIn, &mut rng));
            dec.push(DecScale { blocks, up });
        }
        let out_norm = Norm::new(&mut s, "out.norm", ch[0]);
        let out_conv = Conv2d::new(&mut s, "out.conv", ch[0], cfg.latent_channels(), 3, 1, Init::FanIn, &mut rng);
        let layout = Layout { time1, time2, class_emb, conv_in, enc, mid, dec, out_norm, out_conv };
        Ok(Denoiser { cfg, params: s, layout })
    }

    /// Rebuild from a configuration and stored parameters.
    pub fn from_params(cfg: UNetConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut net = Self::build(cfg, 0)?;
        net.params.load_named(params.iter())?;
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> Denoiser<U> {
        Denoiser { cfg: self.cfg.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    fn check_inputs(&self, z: &[usize], mask: &[usize], masked: &[usize], batch: usize) -> Result<()> {
        let c = self.cfg.latent_channels();
        let s = self.cfg.image_size;
        let expect = |shape: &[usize], ch: usize, what: &'static str| -> Result<()> {
            if shape != [batch, ch, s, s] {
                return Err(Error::ShapeMismatch { op: what, lhs: shape.to_vec(), rhs: vec![batch, ch, s, s] });
            }
            Ok(())
        };
        expect(z, c, "denoise latent")?;
        expect(mask, 1, "denoise mask")?;
        expect(masked, c, "denoise masked image")
    }

    /// Record the forward pass on `g`.
    ///
    /// `t` and `class_ids` hold one entry per batch item. Class ids are
    /// ignored when the class embedding is disabled.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        mask: Var,
        masked: Var,
        t: &[usize],
        class_ids: Option<&[usize]>,
        inject: &mut Injector<'_, T>,
    ) -> Result<(Var, Vec<Var>)> {
        let batch = t.len();
        self.check_inputs(g.shape(z), g.shape(mask), g.shape(masked), batch)?;
        let l = &self.layout;

        let temb = g.constant(timestep_embedding(t, self.cfg.time_embed_dim));
        let h = l.time1.forward(g, p, temb)?;
        let h = g.silu(h)?;
        let mut emb = l.time2.forward(g, p, h)?;
        if let (Some(layer), Some(ids)) = (&l.class_emb, class_ids) {
            let k = self.cfg.cond_embed_classes;
            if ids.len() != batch {
                return Err(Error::invalid(format!("{} class ids for batch of {batch}", ids.len())));
            }
            let mut onehot = vec![T::zero(); batch * k];
            for (b, &id) in ids.iter().enumerate() {
                if id >= k {
                    return Err(Error::invalid(format!("class id {id} outside 0..{k}")));
                }
                onehot[b * k + id] = T::one();
            }
            let oh = g.constant(Tensor::new(vec![batch, k], onehot)?);
            let ce = layer.forward(g, p, oh)?;
            emb = g.add(emb, ce)?;
        }
        let emb = g.silu(emb)?;

        let x = g.concat_channels(z, mask)?;
        let x = g.concat_channels(x, masked)?;
        let mut h = l.conv_in.forward(g, p, x)?;
        let mut feats = Vec::with_capacity(self.cfg.scales());
        for (scale, enc) in l.enc.iter().enumerate() {
            if let Some(down) = &enc.down {
                h = down.forward(g, p, h)?;
            }
            for block in &enc.blocks {
                h = block.forward(g, p, h, Some(emb))?;
            }
            h = inject(g, scale, h)?;
            feats.push(h);
        }
        h = l.mid.forward(g, p, h, Some(emb))?;
        for (dec, &skip) in l.dec.iter().zip(feats.iter().rev()) {
            h = g.concat_channels(h, skip)?;
            for block in &dec.blocks {
                h = block.forward(g, p, h, Some(emb))?;
            }
            if let Some(up) = &dec.up {
                h = g.resample(h, ResampleDir::Up)?;
                h = up.forward(g, p, h)?;
            }
        }
        let h = l.out_norm.forward(g, p, h)?;
        let h = g.silu(h)?;
        let eps = l.out_conv.forward(g, p, h)?;
        Ok((eps, feats))
    }

    /// Inference forward with no tape kept beyond the call.
    pub fn denoise(
        &self,
        z: &Tensor<T>,
        t: &[usize],
        mask: &Tensor<T>,
        masked: &Tensor<T>,
        class_ids: Option<&[usize]>,
    ) -> Result<DenoiserOutput<T>> {
        self.denoise_with(z, t, mask, masked, class_ids, &mut no_injection)
    }

    /// Inference forward with a feature hook.
    pub fn denoise_with(
        &self,
        z: &Tensor<T>,
        t: &[usize],
        mask: &Tensor<T>,
        masked: &Tensor<T>,
        class_ids: Option<&[usize]>,
        inject: &mut Injector<'_, T>,
    ) -> Result<DenoiserOutput<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (zv, mv, xv) = (g.constant(z.clone()), g.constant(mask.clone()), g.constant(masked.clone()));
        let (eps, feats) = self.forward_graph(&mut g, &p, zv, mv, xv, t, class_ids, inject)?;
        Ok(DenoiserOutput {
            eps_pred: g.value(eps).clone(),
            enc_features: feats.iter().map(|&f| g.value(f).clone()).collect(),
        })
    }
}
