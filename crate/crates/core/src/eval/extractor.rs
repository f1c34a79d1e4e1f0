//! Small shape-counting classifier whose pooled features back the Fréchet
//! metric.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Conv2d, Init, Linear, ParamStore};
use crate::rng::{stream, STREAM_EVAL, STREAM_INIT};
use crate::tensor::{Graph, Tensor, Var};
use crate::toyworld::{generate_scene, SceneConfig};
use crate::train::mix_seed;

/// Minimum held-out accuracy for features to count as valid.
pub const ACCURACY_GATE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub size: usize,
    /// Channels of the four conv layers; the last is the feature width.
    pub widths: [usize; 4],
    pub min_count: usize,
    pub max_count: usize,
}

impl ExtractorConfig {
    pub fn for_scenes(scene: &SceneConfig) -> Self {
        ExtractorConfig {
            size: scene.size,
            widths: [16, 32, 64, 64],
            min_count: scene.min_shapes,
            max_count: scene.max_shapes,
        }
    }

    pub fn classes(&self) -> usize {
        self.max_count - self.min_count + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[3]
    }

    fn validate(&self) -> Result<()> {
        if self.max_count < self.min_count || !self.size.is_multiple_of(4) || self.widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad extractor config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    cfg: ExtractorConfig,
    params: ParamStore<f32>,
    convs: Vec<Conv2d>,
    head: Linear,
    /// Accuracy on the held-out split, once measured.
    pub test_accuracy: Option<f64>,
}

impl FeatureExtractor {
    pub fn build(cfg: ExtractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, STREAM_INIT + 2);
        let mut s = ParamStore::new();
        let strides = [1, 2, 2, 1];
        let mut cin = 1;
        let mut convs = Vec::new();
        for (i, (&w, &st)) in cfg.widths.iter().zip(&strides).enumerate() {
            convs.push(Conv2d::new(&mut s, &format!("conv.{i}"), cin, w, 3, st, Init::FanIn, &mut rng));
            cin = w;
        }
        let head = Linear::new(&mut s, "head", cin, cfg.classes(), true, &mut rng);
        Ok(FeatureExtractor { cfg, params: s, convs, head, test_accuracy: None })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn gate_passed(&self) -> bool {
        self.test_accuracy.is_some_and(|a| a >= ACCURACY_GATE)
    }

    fn forward(&self, g: &mut Graph<f32>, p: &crate::nn::Bound, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h)?;
            h = g.silu(h)?;
        }
        let feats = g.mean_spatial(h)?;
        let logits = self.head.forward(g, p, feats)?;
        Ok((feats, logits))
    }

    fn label(&self, count: usize) -> Result<usize> {
        if !(self.cfg.min_count..=self.cfg.max_count).contains(&count) {
            return Err(Error::invalid(format!("shape count {count} outside the extractor's range")));
        }
        Ok(count - self.cfg.min_count)
    }

    /// Pooled penultimate features, one row per image of a `[B, 1, S, S]` batch.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let (b, _, _, _) = images.dims4()?;
        let mut rows = Vec::with_capacity(b);
        for start in (0..b).step_by(64) {
            let end = (start + 64).min(b);
            let items: Vec<Tensor<f32>> = (start..end).map(|i| images.batch_item(i)).collect::<Result<_>>()?;
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.constant(Tensor::stack(&items)?);
            let (f, _) = self.forward(&mut g, &p, x)?;
            let d = self.cfg.feature_dim();
            rows.extend(g.value(f).data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<f64>>()));
        }
        Ok(rows)
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let (_, l) = self.forward(&mut g, &p, x)?;
        let k = self.cfg.classes();
        Ok(g.value(l)
            .data()
            .chunks(k)
            .map(|row| {
                let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
                best + self.cfg.min_count
            })
            .collect())
    }

    /// Train on scenes drawn from `seeds`; returns the final batch loss.
    pub fn train(&mut self, seeds: &[u64], scene: &SceneConfig, steps: u64, batch: usize, seed: u64) -> Result<f64> {
        if seeds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut opt = Adam::new(AdamConfig { lr: 2e-3, ..AdamConfig::default() }, &self.params);
        let mut last = f64::NAN;
        for step in 0..steps {
            let mut rng = stream(mix_seed(seed, step), STREAM_EVAL);
            let mut imgs = Vec::with_capacity(batch);
            let mut labels = Vec::with_capacity(batch);
            for _ in 0..batch {
                let sc = generate_scene(seeds[rng.random_range(0..seeds.len())], scene)?;
                labels.push(self.label(sc.class_count_label)?);
                imgs.push(sc.image);
            }
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, true);
            let x = g.constant(Tensor::stack(&imgs)?);
            let (_, logits) = self.forward(&mut g, &p, x)?;
            let loss = g.cross_entropy(logits, &labels)?;
            last = g.value(loss).item()? as f64;
            if !last.is_finite() {
                return Err(Error::NonFinite { t: step as usize, context: "extractor training loss".into() });
            }
            g.backward(loss)?;
            let grads: Vec<_> = p.vars().iter().map(|&v| g.grad(v)).collect();
            opt.update(&mut self.params, &grads)?;
        }
        Ok(last)
    }

    /// Measure and record accuracy on scenes from `seeds`.
    pub fn evaluate(&mut self, seeds: &[u64], scene: &SceneConfig) -> Result<f64> {
        if seeds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut correct = 0usize;
        for chunk in seeds.chunks(64) {
            let scenes: Vec<_> = chunk.iter().map(|&s| generate_scene(s, scene)).collect::<Result<_>>()?;
            let imgs: Vec<Tensor<f32>> = scenes.iter().map(|s| s.image.clone()).collect();
            let pred = self.predict(&Tensor::stack(&imgs)?)?;
            correct += pred.iter().zip(&scenes).filter(|(p, s)| **p == s.class_count_label).count();
        }
        let acc = correct as f64 / seeds.len() as f64;
        self.test_accuracy = Some(acc);
        Ok(acc)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "extractor");
        ck.push_params("param.", &self.params);
        ck.set_meta("extractor.size", self.cfg.size);
        ck.set_meta("extractor.widths", self.cfg.widths.map(|w| w.to_string()).join(","));
        ck.set_meta("extractor.min_count", self.cfg.min_count);
        ck.set_meta("extractor.max_count", self.cfg.max_count);
        if let Some(a) = self.test_accuracy {
            ck.set_meta("extractor.test_accuracy", format!("{:016x}", a.to_bits()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "extractor" {
            return Err(Error::Checkpoint("not an extractor checkpoint".into()));
        }
        let widths: Vec<usize> = ck
            .meta_str("extractor.widths")?
            .split(',')
            .map(|w| w.parse().map_err(|_| Error::Checkpoint(format!("bad width `{w}`"))))
            .collect::<Result<_>>()?;
        let widths: [usize; 4] = widths.try_into().map_err(|_| Error::Checkpoint("expected four widths".into()))?;
        let cfg = ExtractorConfig {
            size: ck.meta_parse("extractor.size")?,
            widths,
            min_count: ck.meta_parse("extractor.min_count")?,
            max_count: ck.meta_parse("extractor.max_count")?,
        };
        let mut ex = Self::build(cfg, 0)?;
        ck.load_params("param.", &mut ex.params)?;
        ex.test_accuracy = match ck.meta_str("extractor.test_accuracy") {
            Ok(h) => Some(f64::from_bits(
                u64::from_str_radix(h, 16).map_err(|_| Error::Checkpoint("bad accuracy bits".into()))?,
            )),
            Err(_) => None,
        };
        Ok(ex)
    }
}
