//! Trained networks, benchmark cases and pipeline runners for the acceptance
//! criteria. Trained weights are cached on disk keyed by their settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use magic_core::checkpoint::Checkpoint;
use magic_core::cmb::{
    cmb_sample, fla_sample, single_modality_sample, unguided_sample, Capture, CmbConfig, Completion, Guide,
    SampleTrace, Task,
};
use magic_core::eval::{ExtractorConfig, FeatureExtractor, GuidanceMaps};
use magic_core::nn::AdamConfig;
use magic_core::parallel::{map_chunks, thread_count};
use magic_core::toyworld::{extract_modality, generate_mask, generate_scene, MaskSpec, Scene, Split};
use magic_core::train::{load_backbone, load_mcu, mix_seed, BackboneTrainer, McuTrainer, TrainConfig, TrainData};
use magic_core::unet::masked_image;
use magic_core::{Denoiser, McuNet, Modality, NoiseSchedule, SceneConfig, ScheduleConfig, Tensor, UNetConfig};

pub const SIZE: usize = 16;
pub const BACKBONE_STEPS: u64 = 4000;
pub const MCU_STEPS: u64 = 2500;
pub const EXTRACTOR_STEPS: u64 = 1500;
pub const LR: f64 = 1e-3;
pub const BATCH: usize = 16;
pub const CHUNK: usize = 10;
pub const GUIDE_MODALITIES: [Modality; 3] = [Modality::Edge, Modality::Segmentation, Modality::Depth];

pub fn net_config() -> UNetConfig {
    UNetConfig {
        image_size: SIZE,
        base_channels: 16,
        channel_mults: vec![1, 2, 2],
        blocks_per_scale: 1,
        time_embed_dim: 32,
        cond_embed_classes: 0,
        ..UNetConfig::default()
    }
}

pub fn scene_config() -> SceneConfig {
    SceneConfig::with_size(SIZE)
}

pub fn schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().expect("default schedule")
}

pub fn train_config(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: BATCH,
        adam: AdamConfig { lr: LR, ..AdamConfig::default() },
        seed,
        fixed_batch: false,
    }
}

pub fn train_data() -> TrainData {
    TrainData::new(Split::Train.seeds().collect(), scene_config()).expect("train split")
}

fn cache_dir() -> PathBuf {
    let dir = std::env::var_os("MAGIC_ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    std::fs::create_dir_all(&dir).expect("cache directory");
    dir
}

fn cached(name: &str, build: impl FnOnce() -> Checkpoint) -> Checkpoint {
    let path = cache_dir().join(name);
    if let Ok(ck) = Checkpoint::load(&path) {
        return ck;
    }
    let ck = build();
    ck.save(&path).expect("write cached checkpoint");
    ck
}

fn progress(what: &str, total: u64) -> impl FnMut(u64, f64) {
    let (what, start, mut acc) = (what.to_string(), Instant::now(), 0.0);
    move |s, l| {
        acc += l;
        let since = s % 500;
        if since == 0 || s == total {
            let n = if since == 0 { 500.0 } else { since as f64 };
            eprintln!("  {what} step {s}/{total} loss {:.4} ({:.0}s)", acc / n, start.elapsed().as_secs_f64());
            acc = 0.0;
        }
    }
}

/// Trained networks shared by the criteria.
pub struct Fixtures {
    pub sched: NoiseSchedule,
    pub backbone: Arc<Denoiser<f32>>,
    pub backbone_ck: Checkpoint,
    pub mcus: BTreeMap<Modality, McuNet<f32>>,
    pub extractor: FeatureExtractor,
}

impl Fixtures {
    pub fn load() -> Fixtures {
        let tag = format!("s{SIZE}-b{}-lr{LR:e}", net_config().base_channels);
        let backbone_ck = cached(&format!("backbone-{tag}-{BACKBONE_STEPS}.ck"), || {
            eprintln!("  training backbone ({BACKBONE_STEPS} steps)");
            let mut tr =
                BackboneTrainer::<f32>::new(net_config(), schedule(), train_config(BACKBONE_STEPS, 0)).unwrap();
            tr.run(&train_data(), progress("backbone", BACKBONE_STEPS)).unwrap();
            tr.checkpoint()
        });
        let (net, sched) = load_backbone::<f32>(&backbone_ck).expect("backbone checkpoint");
        let backbone = Arc::new(net);
        let digest = backbone.params().digest();
        let mut mcus = BTreeMap::new();
        for m in GUIDE_MODALITIES {
            let ck = cached(&format!("mcu-{}-{}-{MCU_STEPS}.ck", m.as_str(), &digest[..12]), || {
                eprintln!("  training {} encoder ({MCU_STEPS} steps)", m.as_str());
                let mut tr =
                    McuTrainer::new(backbone.clone(), sched.clone(), m, train_config(MCU_STEPS, 1 + m as u64)).unwrap();
                tr.run(&train_data(), progress(m.as_str(), MCU_STEPS)).unwrap();
                tr.checkpoint()
            });
            mcus.insert(m, load_mcu(backbone.clone(), &ck).expect("encoder checkpoint"));
        }
        let ext_ck = cached(&format!("extractor-s{SIZE}-{EXTRACTOR_STEPS}.ck"), || {
            eprintln!("  training feature extractor ({EXTRACTOR_STEPS} steps)");
            let cfg = ExtractorConfig::for_scenes(&scene_config());
            let mut ex = FeatureExtractor::build(cfg, 7).unwrap();
            let train: Vec<u64> = Split::Train.seeds().collect();
            ex.train(&train, &scene_config(), EXTRACTOR_STEPS, 32, 7).unwrap();
            let test: Vec<u64> = Split::Test.seeds().collect();
            ex.evaluate(&test, &scene_config()).unwrap();
            ex.checkpoint()
        });
        let extractor = FeatureExtractor::from_checkpoint(&ext_ck).expect("extractor checkpoint");
        Fixtures { sched, backbone, backbone_ck, mcus, extractor }
    }

    pub fn mcu(&self, m: Modality) -> &McuNet<f32> {
        &self.mcus[&m]
    }
}

/// One held-out completion problem.
#[derive(Clone, Debug)]
pub struct Case {
    pub seed: u64,
    pub scene: Scene,
    pub mask: Tensor<f32>,
    pub masked: Tensor<f32>,
}

impl Case {
    pub fn maps(&self) -> GuidanceMaps {
        GuidanceMaps::from_scene(&self.scene).expect("guidance maps")
    }
}

/// Test-split scenes with uniformly distributed mask ratios.
pub fn cases(n: usize) -> Vec<Case> {
    Split::Test
        .seeds()
        .take(n)
        .map(|seed| {
            let scene = generate_scene(seed, &scene_config()).expect("scene");
            let mask = generate_mask(&MaskSpec::random(mix_seed(seed, 1)), SIZE).expect("mask");
            let masked = masked_image(&scene.image, &mask).expect("masked image");
            Case { seed, scene, mask, masked }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub enum Pipeline {
    Unguided,
    Single(Modality),
    Fla(Vec<Modality>, usize),
    Cmb(Vec<Modality>, CmbConfig),
}

impl Pipeline {
    pub fn label(&self) -> String {
        let names = |ms: &[Modality]| ms.iter().map(|m| m.as_str()).collect::<Vec<_>>().join("+");
        match self {
            Pipeline::Unguided => "unguided".into(),
            Pipeline::Single(m) => format!("single {}", m.as_str()),
            Pipeline::Fla(ms, k) => format!("fla-{k} {}", names(ms)),
            Pipeline::Cmb(ms, c) => format!("cmb {} P={} Q={} gamma={}", names(ms), c.p, c.q, c.gamma),
        }
    }
}

/// Result for one case.
#[derive(Clone, Debug)]
pub struct Output {
    pub image: Tensor<f32>,
    pub trace: SampleTrace,
    pub captured: Option<Vec<f64>>,
}

fn task(cases: &[Case]) -> Task<f32> {
    let masked: Vec<Tensor<f32>> = cases.iter().map(|c| c.masked.clone()).collect();
    let mask: Vec<Tensor<f32>> = cases.iter().map(|c| c.mask.clone()).collect();
    Task {
        masked: Tensor::stack(&masked).unwrap(),
        mask: Tensor::stack(&mask).unwrap(),
        class_ids: None,
        seeds: cases.iter().map(|c| c.seed).collect(),
    }
}

fn guides<'a>(fx: &'a Fixtures, ms: &[Modality], cases: &[Case]) -> Vec<Guide<'a, f32>> {
    ms.iter()
        .map(|&m| {
            let maps: Vec<Tensor<f32>> = cases.iter().map(|c| extract_modality(&c.scene, m).unwrap()).collect();
            Guide::new(fx.mcu(m), Tensor::stack(&maps).unwrap()).unwrap()
        })
        .collect()
}

fn complete(
    fx: &Fixtures,
    p: &Pipeline,
    cases: &[Case],
    capture: Option<Capture>,
) -> magic_core::Result<Completion<f32>> {
    let tk = task(cases);
    match p {
        Pipeline::Unguided => unguided_sample(&fx.backbone, &fx.sched, &tk, 0.0, capture),
        Pipeline::Single(m) => {
            let gd = guides(fx, &[*m], cases);
            single_modality_sample(&gd[0], &fx.sched, &tk, 0.0, capture)
        }
        Pipeline::Fla(ms, k) => fla_sample(&fx.backbone, &guides(fx, ms, cases), *k, &fx.sched, &tk, 0.0, capture),
        Pipeline::Cmb(ms, cfg) => cmb_sample(&fx.backbone, &guides(fx, ms, cases), cfg, &fx.sched, &tk, capture),
    }
}

/// Run `p` over `cases` in fixed chunks on `threads` workers.
pub fn run_with(fx: &Fixtures, p: &Pipeline, cases: &[Case], capture: Option<Capture>, threads: usize) -> Vec<Output> {
    let start = Instant::now();
    let out = map_chunks(cases, CHUNK, threads, |chunk| {
        let c = complete(fx, p, chunk, capture)?;
        (0..chunk.len())
            .map(|i| {
                Ok(Output {
                    image: c.images.batch_item(i)?.reshape(c.images.shape()[1..].to_vec())?,
                    trace: c.traces[i].clone(),
                    captured: match &c.captured {
                        Some(t) => Some(t.batch_item(i)?.data().iter().map(|&v| v as f64).collect()),
                        None => None,
                    },
                })
            })
            .collect()
    })
    .unwrap_or_else(|e| panic!("{} failed: {e}", p.label()));
    eprintln!("  ran {} on {} cases ({:.0}s)", p.label(), cases.len(), start.elapsed().as_secs_f64());
    out
}

pub fn run(fx: &Fixtures, p: &Pipeline, cases: &[Case]) -> Vec<Output> {
    run_with(fx, p, cases, None, thread_count())
}
