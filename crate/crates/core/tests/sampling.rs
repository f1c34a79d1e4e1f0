mod support;

use std::collections::BTreeMap;
use std::sync::Arc;

use magic_core::cmb::{
    cmb_sample, cmb_step, fla_sample, guidance_update, single_modality_sample, unguided_sample, CmbConfig, CmbState,
    Completion, Guide, QMode, Task,
};
use magic_core::parallel::map_chunks;
use magic_core::rng::{stream, STREAM_LATENT};
use magic_core::schedule::ScheduleConfig;
use magic_core::toyworld::{extract_modality, generate_scene};
use magic_core::{
    Denoiser, Element, Error, GuidanceEncoder, GuidanceEncoderConfig, McuNet, Modality, NoiseSchedule, SceneConfig,
    Tensor,
};
use support::{micro_config, randomize, scene_batch};

const SEEDS: [u64; 2] = [11_000, 11_001];

fn sched() -> NoiseSchedule {
    ScheduleConfig { t_sample: 10, ..ScheduleConfig::default() }.build().unwrap()
}

fn backbone<T: Element>() -> Arc<Denoiser<T>> {
    let mut net = Denoiser::<f64>::build(micro_config(), 1).unwrap();
    randomize(net.params_mut(), 11, 0.25);
    Arc::new(net.cast())
}

fn mcu<T: Element>(bb: &Arc<Denoiser<T>>, m: Modality, trained: bool) -> McuNet<T> {
    let mut enc =
        GuidanceEncoder::<f64>::build(GuidanceEncoderConfig::for_backbone(m, &micro_config()).unwrap(), 2).unwrap();
    if trained {
        randomize(enc.params_mut(), 20 + m as u64, 0.2);
    }
    McuNet::new(bb.clone(), enc.cast()).unwrap()
}

fn conds<T: Element>(seeds: &[u64], m: Modality) -> Tensor<T> {
    let cfg = SceneConfig::with_size(16);
    let maps: Vec<Tensor<f32>> =
        seeds.iter().map(|&s| extract_modality(&generate_scene(s, &cfg).unwrap(), m).unwrap()).collect();
    Tensor::stack(&maps).unwrap().cast()
}

fn task<T: Element>(seeds: &[u64]) -> (Tensor<T>, Task<T>) {
    let (x, mask, masked) = scene_batch::<T>(seeds, 16);
    (x, Task { masked, mask, class_ids: None, seeds: seeds.to_vec() })
}

fn small_cfg() -> CmbConfig {
    CmbConfig { p: 4, q: 2, gamma: 0.05, ..CmbConfig::default() }
}

fn same(a: &Completion<f32>, b: &Completion<f32>) -> bool {
    a.images.bit_eq(&b.images) && a.latent.bit_eq(&b.latent)
}

#[test]
fn inert_configurations_reproduce_unguided_sampling() {
    let bb = backbone::<f32>();
    let (edge, seg) = (mcu(&bb, Modality::Edge, true), mcu(&bb, Modality::Segmentation, true));
    let (_, tk) = task::<f32>(&SEEDS);
    let guides = [
        Guide::new(&edge, conds(&SEEDS, Modality::Edge)).unwrap(),
        Guide::new(&seg, conds(&SEEDS, Modality::Segmentation)).unwrap(),
    ];
    let s = sched();
    let plain = unguided_sample(&bb, &s, &tk, 0.0, None).unwrap();
    let zero_p = cmb_sample(&bb, &guides, &CmbConfig { p: 0, ..small_cfg() }, &s, &tk, None).unwrap();
    let zero_gamma = cmb_sample(&bb, &guides, &CmbConfig { gamma: 0.0, ..small_cfg() }, &s, &tk, None).unwrap();
    let delta: BTreeMap<Modality, f64> = [(Modality::Edge, 0.0), (Modality::Segmentation, 0.0)].into();
    let zero_delta = cmb_sample(&bb, &guides, &CmbConfig { delta, ..small_cfg() }, &s, &tk, None).unwrap();
    assert!(same(&plain, &zero_p));
    assert!(same(&plain, &zero_gamma));
    assert!(same(&plain, &zero_delta));
    let active = cmb_sample(&bb, &guides, &small_cfg(), &s, &tk, None).unwrap();
    assert!(!same(&plain, &active));
}

#[test]
fn zero_gamma_step_is_a_plain_ddim_step() {
    let bb = backbone::<f32>();
    let edge = mcu(&bb, Modality::Edge, true);
    let (_, tk) = task::<f32>(&SEEDS);
    let guides = [Guide::new(&edge, conds(&SEEDS, Modality::Edge)).unwrap()];
    let s = sched();
    let cfg = CmbConfig { gamma: 0.0, q: 3, ..small_cfg() };
    let mut state = CmbState::init(&tk, &guides).unwrap();
    let z0 = state.z.clone();
    let mut rngs = state.z_rngs.clone();
    let (t, tp) = s.step_pairs()[0];
    cmb_step(&mut state, t, tp, &bb, &guides, &tk, &cfg, &s).unwrap();

    let eps = bb.denoise(&z0, &[t, t], &tk.mask, &tk.masked, None).unwrap().eps_pred;
    let noise: Vec<Tensor<f32>> = rngs.iter_mut().map(|r| Tensor::randn(vec![1, 1, 16, 16], r)).collect();
    let expect = s.ddim_step_with_noise(&z0, &eps, t, tp, cfg.eta, Some(&Tensor::stack(&noise).unwrap())).unwrap();
    assert!(state.z.bit_eq(&expect));
}

#[test]
fn feature_addition_reduces_to_its_parts() {
    let bb = backbone::<f32>();
    let edge = mcu(&bb, Modality::Edge, true);
    let (_, tk) = task::<f32>(&SEEDS);
    let s = sched();
    let guide = Guide::new(&edge, conds(&SEEDS, Modality::Edge)).unwrap();
    let single = single_modality_sample(&guide, &s, &tk, 0.0, None).unwrap();
    let fla = fla_sample(&bb, std::slice::from_ref(&guide), s.t_sample(), &s, &tk, 0.0, None).unwrap();
    assert!(same(&single, &fla));
    let none = fla_sample(&bb, &[], s.t_sample(), &s, &tk, 0.0, None).unwrap();
    assert!(same(&none, &unguided_sample(&bb, &s, &tk, 0.0, None).unwrap()));
    assert!(fla_sample(&bb, &[guide], s.t_sample() + 1, &s, &tk, 0.0, None).is_err());
}

#[test]
fn untrained_encoder_samples_like_the_backbone() {
    let bb = backbone::<f32>();
    let fresh = mcu(&bb, Modality::Depth, false);
    let (_, tk) = task::<f32>(&SEEDS);
    let s = sched();
    let guide = Guide::new(&fresh, conds(&SEEDS, Modality::Depth)).unwrap();
    for eta in [0.0, 1.0] {
        let a = single_modality_sample(&guide, &s, &tk, eta, None).unwrap();
        let b = unguided_sample(&bb, &s, &tk, eta, None).unwrap();
        assert!(same(&a, &b));
    }
    let again = single_modality_sample(&guide, &s, &tk, 0.0, None).unwrap();
    assert!(same(&again, &single_modality_sample(&guide, &s, &tk, 0.0, None).unwrap()));
}

#[test]
fn every_pipeline_preserves_known_pixels() {
    let bb = backbone::<f32>();
    let (edge, sketch) = (mcu(&bb, Modality::Edge, true), mcu(&bb, Modality::Sketch, true));
    let (x, tk) = task::<f32>(&SEEDS);
    let s = sched();
    let guides = [
        Guide::new(&edge, conds(&SEEDS, Modality::Edge)).unwrap(),
        Guide::new(&sketch, conds(&SEEDS, Modality::Sketch)).unwrap(),
    ];
    let outs = [
        unguided_sample(&bb, &s, &tk, 1.0, None).unwrap(),
        single_modality_sample(&guides[0], &s, &tk, 0.0, None).unwrap(),
        fla_sample(&bb, &guides, 5, &s, &tk, 0.0, None).unwrap(),
        cmb_sample(&bb, &guides, &small_cfg(), &s, &tk, None).unwrap(),
    ];
    for out in &outs {
        let hw = 256;
        for (i, (&o, &orig)) in out.images.data().iter().zip(x.data()).enumerate() {
            let b = i / hw;
            if tk.mask.data()[b * hw + i % hw] == 0.0 {
                assert_eq!(o.to_bits(), orig.to_bits());
            } else {
                assert!((0.0..=1.0).contains(&o));
            }
        }
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let err = support::gradients::end_to_end_guidance();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn update_depends_on_sigma_gamma_product() {
    let s = sched();
    let (t, tp) = s.step_pairs()[2];
    let sig1 = s.sigma(t, tp, 0.4).unwrap();
    let sig2 = s.sigma(t, tp, 0.8).unwrap();
    assert!((sig2 - 2.0 * sig1).abs() <= 1e-15 * sig2);
    let mut r = support::rng(3);
    let zp = support::random_tensor(&[1, 1, 4, 4], &mut r);
    let g = support::random_tensor(&[1, 1, 4, 4], &mut r);
    let a = guidance_update(&zp, &g, sig1, 0.6).unwrap();
    let b = guidance_update(&zp, &g, sig2, 0.3).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
    }
}

#[test]
fn traces_cover_every_step() {
    let bb = backbone::<f32>();
    let edge = mcu(&bb, Modality::Edge, true);
    let (_, tk) = task::<f32>(&SEEDS);
    let s = sched();
    let guides = [Guide::new(&edge, conds(&SEEDS, Modality::Edge)).unwrap()];
    let cfg = small_cfg();
    let out = cmb_sample(&bb, &guides, &cfg, &s, &tk, None).unwrap();
    assert_eq!(out.traces.len(), 2);
    for (tr, &seed) in out.traces.iter().zip(&SEEDS) {
        assert_eq!(tr.seed, seed);
        assert_eq!(tr.steps.len(), s.t_sample());
        for (i, st) in tr.steps.iter().enumerate() {
            assert_eq!((st.t, st.t_prev), s.step_pairs()[i]);
            assert_eq!(st.guided, i < cfg.p);
            if st.guided {
                assert!(st.loss_before.unwrap().is_finite() && st.loss_after.unwrap().is_finite());
                assert_eq!(st.inner_losses.len(), cfg.q);
                assert!(st.sigma > 0.0);
            } else {
                assert!(st.loss_before.is_none());
            }
        }
        assert!(tr.warnings.is_empty());
    }
}

/// With one inner iteration the renoise-free probe must not rise for a small
/// enough step; the sweep reports where descent first breaks.
#[test]
fn small_steps_descend_the_guidance_loss() {
    let bb = backbone::<f64>();
    let edge = mcu(&bb, Modality::Edge, true);
    let (_, tk) = task::<f64>(&SEEDS);
    let s = sched();
    let guides = [Guide::new(&edge, conds(&SEEDS, Modality::Edge)).unwrap()];
    let mut stable = Vec::new();
    for gamma in [1e-3, 1e-2, 1e-1, 1.0] {
        let cfg = CmbConfig { p: 10, q: 1, gamma, ..CmbConfig::default() };
        let out = cmb_sample(&bb, &guides, &cfg, &s, &tk, None).unwrap();
        let ok = out
            .traces
            .iter()
            .flat_map(|tr| &tr.steps)
            .filter(|st| st.guided)
            .all(|st| st.loss_after.unwrap() <= st.loss_before.unwrap());
        stable.push((gamma, ok));
    }
    assert!(stable[0].1, "descent sweep {stable:?}");
}

#[test]
fn samples_ignore_batch_composition_and_thread_count() {
    let bb = backbone::<f32>();
    let edge = mcu(&bb, Modality::Edge, true);
    let s = sched();
    let seeds = [11_010u64, 11_011, 11_012];
    let run = |chunk: &[u64]| -> magic_core::Result<Vec<Tensor<f32>>> {
        let (_, tk) = task::<f32>(chunk);
        let guides = [Guide::new(&edge, conds(chunk, Modality::Edge))?];
        let out = cmb_sample(&bb, &guides, &small_cfg(), &s, &tk, None)?;
        (0..chunk.len()).map(|i| out.images.batch_item(i)).collect()
    };
    let one_by_one = map_chunks(&seeds, 1, 1, run).unwrap();
    let batched = map_chunks(&seeds, 3, 1, run).unwrap();
    let threaded = map_chunks(&seeds, 1, 3, run).unwrap();
    for ((a, b), c) in one_by_one.iter().zip(&batched).zip(&threaded) {
        assert!(a.bit_eq(b) && a.bit_eq(c));
    }
}

#[test]
fn literal_and_time_travel_agree_for_one_iteration() {
    let bb = backbone::<f32>();
    let edge = mcu(&bb, Modality::Edge, true);
    let (_, tk) = task::<f32>(&SEEDS);
    let s = sched();
    let guides = [Guide::new(&edge, conds(&SEEDS, Modality::Edge)).unwrap()];
    let tt = cmb_sample(&bb, &guides, &CmbConfig { q: 1, ..small_cfg() }, &s, &tk, None).unwrap();
    let lit =
        cmb_sample(&bb, &guides, &CmbConfig { q: 1, q_mode: QMode::Literal, ..small_cfg() }, &s, &tk, None).unwrap();
    assert!(same(&tt, &lit));
    let lit3 =
        cmb_sample(&bb, &guides, &CmbConfig { q: 3, q_mode: QMode::Literal, ..small_cfg() }, &s, &tk, None).unwrap();
    assert!(lit3.traces[0].steps[0].inner_losses.len() == 3);
}

#[test]
fn error_cases_are_reported() {
    let bb = backbone::<f32>();
    let edge = mcu(&bb, Modality::Edge, true);
    let (_, tk) = task::<f32>(&SEEDS);
    let s = sched();
    let guide = Guide::new(&edge, conds(&SEEDS, Modality::Edge)).unwrap();
    let too_long = CmbConfig { p: s.t_sample() + 1, ..small_cfg() };
    assert!(matches!(
        cmb_sample(&bb, std::slice::from_ref(&guide), &too_long, &s, &tk, None),
        Err(Error::InvalidConfig(_))
    ));

    let wrong_batch = Guide::new(&edge, conds(&SEEDS[..1], Modality::Edge)).unwrap();
    assert!(cmb_sample(&bb, &[wrong_batch], &small_cfg(), &s, &tk, None).is_err());

    let poisoned = Guide {
        net: &edge,
        cond: guide.cond.clone(),
        signals: guide.signals.iter().map(|t| t.map(|_| f32::NAN)).collect(),
    };
    assert!(matches!(cmb_sample(&bb, &[poisoned], &small_cfg(), &s, &tk, None), Err(Error::NonFinite { .. })));

    let inert = CmbConfig { eta: 0.0, ..small_cfg() };
    let out = cmb_sample(&bb, &[guide], &inert, &s, &tk, None).unwrap();
    assert!(!out.traces[0].warnings.is_empty());
}

#[test]
fn latent_draws_follow_the_per_sample_stream() {
    let bb = backbone::<f32>();
    let (_, tk) = task::<f32>(&SEEDS[..1]);
    let s = ScheduleConfig { t_sample: 1, ..ScheduleConfig::default() }.build().unwrap();
    let out = unguided_sample(&bb, &s, &tk, 0.0, None).unwrap();
    let z = Tensor::<f32>::randn(vec![1, 1, 16, 16], &mut stream(SEEDS[0], STREAM_LATENT));
    let (t, tp) = s.step_pairs()[0];
    let eps = bb.denoise(&z, &[t], &tk.mask, &tk.masked, None).unwrap().eps_pred;
    assert!(out.latent.bit_eq(&s.ddim_step(&z, &eps, t, tp, 0.0, &mut stream(0, 0)).unwrap()));
}
