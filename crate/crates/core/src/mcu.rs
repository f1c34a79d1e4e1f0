//! Per-modality guidance encoders whose multi-scale outputs are added to the
//! frozen backbone's encoder features.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, ParamStore};
use crate::rng::{stream, STREAM_INIT};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::toyworld::Modality;
use crate::unet::{Denoiser, DenoiserOutput, ResBlock, UNetConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceEncoderConfig {
    pub modality: Modality,
    pub in_channels: usize,
    /// Output channels per scale; matches the backbone.
    pub block_channels: Vec<usize>,
}

impl GuidanceEncoderConfig {
    /// Encoder shaped to inject into `backbone`.
    pub fn for_backbone(modality: Modality, backbone: &UNetConfig) -> Result<Self> {
        if !modality.is_spatial() {
            return Err(Error::invalid(format!(
                "{modality} has no guidance encoder; it enters through the class embedding"
            )));
        }
        Ok(GuidanceEncoderConfig {
            modality,
            in_channels: modality.channels(),
            block_channels: backbone.scale_channels(),
        })
    }

    pub fn blocks(&self) -> usize {
        self.block_channels.len()
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    conv: Conv2d,
    res: [ResBlock; 2],
    out: Conv2d,
}

/// One conv (stride 2 after the first block), two residual blocks and a
/// zero-initialized 1x1 projection per scale.
#[derive(Clone, Debug)]
pub struct GuidanceEncoder<T> {
    cfg: GuidanceEncoderConfig,
    params: ParamStore<T>,
    blocks: Vec<EncoderBlock>,
}

impl<T: Element> GuidanceEncoder<T> {
    pub fn build(cfg: GuidanceEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.block_channels.is_empty() || cfg.in_channels == 0 {
            return Err(Error::InvalidConfig("guidance encoder needs channels and at least one block".into()));
        }
        let mut rng = stream(seed, STREAM_INIT + 1);
        let mut s = ParamStore::new();
        let mut blocks = Vec::new();
        let mut cin = cfg.in_channels;
        for (l, &c) in cfg.block_channels.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            let conv = Conv2d::new(&mut s, &format!("block.{l}.conv"), cin, c, 3, stride, Init::FanIn, &mut rng);
            let res = [
                ResBlock::new(&mut s, &format!("block.{l}.res.0"), c, c, None, &mut rng),
                ResBlock::new(&mut s, &format!("block.{l}.res.1"), c, c, None, &mut rng),
            ];
            let out = Conv2d::new(&mut s, &format!("block.{l}.out"), c, c, 1, 1, Init::Zeros, &mut rng);
            blocks.push(EncoderBlock { conv, res, out });
            cin = c;
        }
        Ok(GuidanceEncoder { cfg, params: s, blocks })
    }

    pub fn from_params(cfg: GuidanceEncoderConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut enc = Self::build(cfg, 0)?;
        enc.params.load_named(params.iter())?;
        Ok(enc)
    }

    pub fn config(&self) -> &GuidanceEncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> GuidanceEncoder<U> {
        GuidanceEncoder { cfg: self.cfg.clone(), params: self.params.cast(), blocks: self.blocks.clone() }
    }

    /// Zero every projection so all outputs vanish.
    pub fn zero_outputs(&mut self) -> Result<()> {
        let zero_ids: Vec<usize> = self.blocks.iter().flat_map(|b| [b.out.weight.0, b.out.bias.0]).collect();
        let tensors = self
            .params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| if zero_ids.contains(&i) { Tensor::zeros(t.shape().to_vec()) } else { t.clone() })
            .collect();
        self.params.set_all(tensors)
    }

    pub fn encode_graph(&self, g: &mut Graph<T>, p: &Bound, cond: Var) -> Result<Vec<Var>> {
        let shape = g.shape(cond).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "encode_guidance",
                lhs: shape,
                rhs: vec![0, self.cfg.in_channels, 0, 0],
            });
        }
        let mut h = cond;
        let mut feats = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.conv.forward(g, p, h)?;
            for r in &b.res {
                h = r.forward(g, p, h, None)?;
            }
            feats.push(b.out.forward(g, p, h)?);
        }
        Ok(feats)
    }

    /// Guidance signals, one per backbone scale.
    pub fn encode(&self, cond: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c = g.constant(cond.clone());
        let feats = self.encode_graph(&mut g, &p, c)?;
        Ok(feats.iter().map(|&f| g.value(f).clone()).collect())
    }
}

/// Add precomputed per-scale signals to the encoder features.
pub fn additive_injector<'a, T: Element>(
    signals: &'a [Tensor<T>],
) -> impl FnMut(&mut Graph<T>, usize, Var) -> Result<Var> + 'a {
    move |g, l, f| {
        let s = signals.get(l).ok_or_else(|| Error::invalid(format!("no guidance signal for scale {l}")))?;
        if g.shape(f) != s.shape() {
            return Err(Error::ShapeMismatch { op: "inject", lhs: g.shape(f).to_vec(), rhs: s.shape().to_vec() });
        }
        let c = g.constant(s.clone());
        g.add(f, c)
    }
}

/// A frozen backbone paired with one guidance encoder.
#[derive(Clone, Debug)]
pub struct McuNet<T> {
    pub backbone: Arc<Denoiser<T>>,
    pub encoder: GuidanceEncoder<T>,
}

impl<T: Element> McuNet<T> {
    pub fn new(backbone: Arc<Denoiser<T>>, encoder: GuidanceEncoder<T>) -> Result<Self> {
        let want = backbone.config().scale_channels();
        if encoder.config().block_channels != want {
            return Err(Error::InvalidConfig(format!(
                "encoder scales {:?} do not match backbone scales {want:?}",
                encoder.config().block_channels
            )));
        }
        Ok(McuNet { backbone, encoder })
    }

    pub fn modality(&self) -> Modality {
        self.encoder.config().modality
    }

    /// Backbone forward with `F_enc + F_c` at every scale.
    pub fn denoise(
        &self,
        w: &Tensor<T>,
        t: &[usize],
        mask: &Tensor<T>,
        masked: &Tensor<T>,
        cond: &Tensor<T>,
        class_ids: Option<&[usize]>,
    ) -> Result<DenoiserOutput<T>> {
        let signals = self.encoder.encode(cond)?;
        self.denoise_with_signals(w, t, mask, masked, &signals, class_ids)
    }

    pub fn denoise_with_signals(
        &self,
        w: &Tensor<T>,
        t: &[usize],
        mask: &Tensor<T>,
        masked: &Tensor<T>,
        signals: &[Tensor<T>],
        class_ids: Option<&[usize]>,
    ) -> Result<DenoiserOutput<T>> {
        self.backbone.denoise_with(w, t, mask, masked, class_ids, &mut additive_injector(signals))
    }
}
