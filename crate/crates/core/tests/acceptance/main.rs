//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria can be selected by number (`cargo test --test acceptance -- 6 7`).
//! Trained networks are cached under the target tmp dir, or under
//! `MAGIC_ACCEPTANCE_CACHE` when set.

#[path = "../support/mod.rs"]
mod support;

mod fixtures;

use std::cell::{OnceCell, RefCell};
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use magic_core::cmb::{
    cmb_sample, cmb_step, fla_sample, single_modality_sample, Capture, CmbConfig, CmbState, Guide, Task,
};
use magic_core::eval::{
    bootstrap, feature_pull_statistic, frechet_distance, guidance_fidelity, paired_bootstrap, win_rate, Fidelity,
    Interval,
};
use magic_core::toyworld::{extract_modality, generate_scene};
use magic_core::train::{BackboneTrainer, McuTrainer, TrainConfig};
use magic_core::{Modality, Tensor};

use fixtures::{cases, run, run_with, Case, Fixtures, Output, Pipeline, GUIDE_MODALITIES};
use support::{diffusion, gradients};

const RESAMPLES: usize = 2000;
const LEVEL: f64 = 0.95;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

/// Pipeline outputs keyed by label and case count.
type RunCache = BTreeMap<(String, usize), Arc<Vec<Output>>>;

/// Lazily built fixtures and pipeline runs shared between criteria.
struct Ctx {
    fx: OnceCell<Fixtures>,
    runs: RefCell<RunCache>,
    preserved: RefCell<(usize, usize)>,
}

impl Ctx {
    fn fx(&self) -> &Fixtures {
        self.fx.get_or_init(Fixtures::load)
    }

    /// Outputs of `p` on the first `n` benchmark cases, memoized. Longer runs
    /// serve shorter requests since every case is sampled independently.
    fn outputs(&self, p: &Pipeline, n: usize) -> Arc<Vec<Output>> {
        let key = p.label();
        if let Some((_, v)) = self.runs.borrow().range((key.clone(), n)..).find(|((k, _), _)| *k == key) {
            return Arc::new(v[..n].to_vec());
        }
        let cs = cases(n);
        let out = run(self.fx(), p, &cs);
        self.check_preserved(&cs, &out);
        let out = Arc::new(out);
        self.runs.borrow_mut().insert((key, n), out.clone());
        out
    }

    fn check_preserved(&self, cs: &[Case], out: &[Output]) {
        let mut p = self.preserved.borrow_mut();
        for (c, o) in cs.iter().zip(out) {
            p.0 += 1;
            if !preserves(c, &o.image) {
                p.1 += 1;
            }
        }
    }
}

fn preserves(c: &Case, image: &Tensor<f32>) -> bool {
    image
        .data()
        .iter()
        .zip(c.masked.data())
        .zip(c.mask.data())
        .all(|((o, k), m)| *m > 0.5 || o.to_bits() == k.to_bits())
}

fn fidelity(cs: &[Case], out: &[Output]) -> Vec<Fidelity> {
    cs.iter().zip(out).map(|(c, o)| guidance_fidelity(&o.image, &c.maps(), &c.mask).expect("fidelity")).collect()
}

/// Pairs of values defined for both runs.
fn paired(a: &[Option<f64>], b: &[Option<f64>]) -> (Vec<f64>, Vec<f64>) {
    a.iter().zip(b).filter_map(|(x, y)| Some(((*x)?, (*y)?))).unzip()
}

fn fmt_ci(i: &Interval) -> String {
    format!("{:+.4} [{:+.4}, {:+.4}]", i.estimate, i.lo, i.hi)
}

fn c1_gradients(_: &Ctx) -> Verdict {
    let ops = gradients::all();
    let worst = ops.iter().cloned().fold(("none".to_string(), 0.0f64), |w, o| if o.1 > w.1 { o } else { w });
    let e2e = gradients::end_to_end_guidance();
    let pass = ops.iter().all(|(_, e)| *e < gradients::TOL) && e2e < 1e-3;
    Verdict::new(pass, format!("{} ops, worst {} {:.2e}; end-to-end {:.2e}", ops.len(), worst.0, worst.1, e2e))
}

fn c2_degeneracies(ctx: &Ctx) -> Verdict {
    let fx = ctx.fx();
    let cs = cases(4);
    let tk = Task {
        masked: Tensor::stack(&cs.iter().map(|c| c.masked.clone()).collect::<Vec<_>>()).unwrap(),
        mask: Tensor::stack(&cs.iter().map(|c| c.mask.clone()).collect::<Vec<_>>()).unwrap(),
        class_ids: None,
        seeds: cs.iter().map(|c| c.seed).collect(),
    };
    let guides: Vec<Guide<'_, f32>> = GUIDE_MODALITIES
        .iter()
        .map(|&m| {
            let maps: Vec<Tensor<f32>> = cs.iter().map(|c| extract_modality(&c.scene, m).unwrap()).collect();
            Guide::new(fx.mcu(m), Tensor::stack(&maps).unwrap()).unwrap()
        })
        .collect();
    let s = &fx.sched;
    let cfg = CmbConfig::default();
    let plain = magic_core::cmb::unguided_sample(&fx.backbone, s, &tk, 0.0, None).unwrap();
    let same = |a: &magic_core::cmb::Completion<f32>| a.images.bit_eq(&plain.images) && a.latent.bit_eq(&plain.latent);
    let mut failed = Vec::new();

    if !same(&cmb_sample(&fx.backbone, &guides, &CmbConfig { p: 0, ..cfg.clone() }, s, &tk, None).unwrap()) {
        failed.push("P=0");
    }
    let zero_delta = CmbConfig { delta: GUIDE_MODALITIES.iter().map(|&m| (m, 0.0)).collect(), ..cfg.clone() };
    if !same(&cmb_sample(&fx.backbone, &guides, &zero_delta, s, &tk, None).unwrap()) {
        failed.push("delta=0");
    }

    let gamma0 = CmbConfig { gamma: 0.0, ..cfg.clone() };
    let mut state = CmbState::init(&tk, &guides).unwrap();
    let mut steps_ok = true;
    for &(t, tp) in s.step_pairs().iter().take(3) {
        let z = state.z.clone();
        let mut rngs = state.z_rngs.clone();
        cmb_step(&mut state, t, tp, &fx.backbone, &guides, &tk, &gamma0, s).unwrap();
        let eps = fx.backbone.denoise(&z, &vec![t; tk.batch()], &tk.mask, &tk.masked, None).unwrap().eps_pred;
        let noise: Vec<Tensor<f32>> =
            rngs.iter_mut().map(|r| Tensor::randn(vec![1, 1, fixtures::SIZE, fixtures::SIZE], r)).collect();
        let expect =
            s.ddim_step_with_noise(&z, &eps, t, tp, gamma0.eta, Some(&Tensor::stack(&noise).unwrap())).unwrap();
        steps_ok &= state.z.bit_eq(&expect);
    }
    if !steps_ok {
        failed.push("gamma=0 step");
    }

    let mut zeroed = fx.mcu(Modality::Edge).clone();
    zeroed.encoder.zero_outputs().unwrap();
    let cond = &guides[0].cond;
    let z = Tensor::<f32>::randn(tk.masked.shape().to_vec(), &mut magic_core::rng::stream(5, 0));
    let ts = vec![700; tk.batch()];
    let a = zeroed.denoise(&z, &ts, &tk.mask, &tk.masked, cond, None).unwrap();
    let b = fx.backbone.denoise(&z, &ts, &tk.mask, &tk.masked, None).unwrap();
    if !(a.eps_pred.bit_eq(&b.eps_pred) && a.enc_features.iter().zip(&b.enc_features).all(|(x, y)| x.bit_eq(y))) {
        failed.push("zeroed encoder");
    }

    let single = single_modality_sample(&guides[0], s, &tk, 0.0, None).unwrap();
    let fla = fla_sample(&fx.backbone, &guides[..1], s.t_sample(), s, &tk, 0.0, None).unwrap();
    if !(single.images.bit_eq(&fla.images) && single.latent.bit_eq(&fla.latent)) {
        failed.push("single-modality FLA");
    }
    let pass = failed.is_empty();
    Verdict::new(pass, if pass { "5 equivalences bit-exact".into() } else { format!("broken: {}", failed.join(", ")) })
}

fn c3_diffusion(_: &Ctx) -> Verdict {
    let results = diffusion::all();
    let failed: Vec<String> =
        results.iter().filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    Verdict::new(
        failed.is_empty(),
        if failed.is_empty() { format!("{} checks", results.len()) } else { failed.join("; ") },
    )
}

fn c4_frozen_backbone(ctx: &Ctx) -> Verdict {
    let fx = ctx.fx();
    let before = fx.backbone.params().digest();
    let cfg = fixtures::train_config(200, 99);
    let mut tr = McuTrainer::new(fx.backbone.clone(), fx.sched.clone(), Modality::Edge, cfg).unwrap();
    let enc_before = tr.encoder.params().digest();
    tr.run(&fixtures::train_data(), |_, _| {}).unwrap();
    let after = fx.backbone.params().digest();
    let ck_digest = tr.checkpoint().meta_str("backbone_digest").unwrap().to_string();
    let stored = fx.backbone_ck.meta_str("param_digest").unwrap().to_string();
    let pass = before == after && after == ck_digest && after == stored && tr.encoder.params().digest() != enc_before;
    Verdict::new(pass, format!("backbone digest {} after 200 encoder steps", &after[..16]))
}

/// Steps until the fixed-batch loss drops below a tenth of its initial value.
fn overfit(mut step: impl FnMut() -> f64) -> (f64, f64, Option<u64>) {
    let first = step();
    let mut last = first;
    for s in 1..2000u64 {
        last = step();
        if last < 0.1 * first {
            return (first, last, Some(s + 1));
        }
    }
    (first, last, None)
}

fn c5_trainability(ctx: &Ctx) -> Verdict {
    let fx = ctx.fx();
    let data = fixtures::train_data();
    let cfg = TrainConfig { fixed_batch: true, batch_size: 8, ..fixtures::train_config(2000, 5) };
    let mut report = Vec::new();
    let mut pass = true;
    let mut bb = BackboneTrainer::<f32>::new(fixtures::net_config(), fx.sched.clone(), cfg.clone()).unwrap();
    let mut results = vec![("backbone".to_string(), overfit(|| bb.step_once(&data).unwrap()))];
    for m in [Modality::Edge, Modality::Sketch, Modality::Segmentation, Modality::Depth] {
        let mut tr = McuTrainer::new(fx.backbone.clone(), fx.sched.clone(), m, cfg.clone()).unwrap();
        results.push((m.as_str().to_string(), overfit(|| tr.step_once(&data).unwrap())));
    }
    for (name, (first, last, steps)) in results {
        pass &= steps.is_some();
        let at = steps.map_or("not within 2000".to_string(), |s| format!("step {s}"));
        report.push(format!("{name} {first:.4}->{last:.4} ({at})"));
    }
    Verdict::new(pass, report.join("; "))
}

fn c6_edge_guidance(ctx: &Ctx) -> Verdict {
    let n = 200;
    let cs = cases(n);
    let single = fidelity(&cs, &ctx.outputs(&Pipeline::Single(Modality::Edge), n));
    let plain = fidelity(&cs, &ctx.outputs(&Pipeline::Unguided, n));
    let (a, b) = paired(
        &single.iter().map(|f| f.edge_f1).collect::<Vec<_>>(),
        &plain.iter().map(|f| f.edge_f1).collect::<Vec<_>>(),
    );
    let wins = win_rate(&a, &b);
    let ci = paired_bootstrap(&a, &b, RESAMPLES, LEVEL, 6).unwrap();
    let pass = wins >= 0.7 && ci.lo > 0.0;
    Verdict::new(pass, format!("{} defined pairs, win rate {:.3}, mean edge-F1 gain {}", a.len(), wins, fmt_ci(&ci)))
}

fn blend_modalities() -> Vec<Modality> {
    GUIDE_MODALITIES.to_vec()
}

fn cmb_pipeline(cfg: CmbConfig) -> Pipeline {
    Pipeline::Cmb(blend_modalities(), cfg)
}

fn features(ctx: &Ctx, images: impl Iterator<Item = Tensor<f32>>) -> Vec<Vec<f64>> {
    let imgs: Vec<Tensor<f32>> = images.collect();
    ctx.fx().extractor.features(&Tensor::stack(&imgs).unwrap()).unwrap()
}

fn scores(f: &[Fidelity]) -> Vec<Option<f64>> {
    f.iter().map(Fidelity::guidance_score).collect()
}

fn c7_cmb_vs_fla(ctx: &Ctx) -> Verdict {
    let n = 500;
    let cs = cases(n);
    let cmb = ctx.outputs(&cmb_pipeline(CmbConfig::default()), n);
    let fla = ctx.outputs(&Pipeline::Fla(blend_modalities(), 50), n);
    let reference = features(ctx, cs.iter().map(|c| c.scene.image.clone()));
    let fc = features(ctx, cmb.iter().map(|o| o.image.clone()));
    let ff = features(ctx, fla.iter().map(|o| o.image.clone()));
    let pick = |rows: &[Vec<f64>], idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
    let fid_diff = bootstrap(n, RESAMPLES, LEVEL, 7, |idx| {
        let r = pick(&reference, idx);
        frechet_distance(&pick(&fc, idx), &r).unwrap() - frechet_distance(&pick(&ff, idx), &r).unwrap()
    })
    .unwrap();
    let (fid_c, fid_f) = (frechet_distance(&fc, &reference).unwrap(), frechet_distance(&ff, &reference).unwrap());
    let (a, b) = paired(&scores(&fidelity(&cs, &cmb)), &scores(&fidelity(&cs, &fla)));
    let fid_gain = paired_bootstrap(&a, &b, RESAMPLES, LEVEL, 8).unwrap();
    let gate = ctx.fx().extractor.gate_passed();
    let pass = gate && fid_diff.hi <= 0.0 && fid_gain.lo >= 0.0;
    Verdict::new(
        pass,
        format!(
            "toy-FID cmb {fid_c:.4} vs fla {fid_f:.4}, diff {}; fidelity gain {} over {} pairs; extractor accuracy {:.3}",
            fmt_ci(&fid_diff),
            fmt_ci(&fid_gain),
            a.len(),
            ctx.fx().extractor.test_accuracy.unwrap_or(f64::NAN)
        ),
    )
}

fn c8_sweep(ctx: &Ctx) -> Verdict {
    let n = 100;
    let cs = cases(n);
    let score_of = |cfg: CmbConfig| scores(&fidelity(&cs, &ctx.outputs(&cmb_pipeline(cfg), n)));
    let mut by_p = Vec::new();
    for p in [0, 10, 30, 50] {
        let s = if p == 0 {
            scores(&fidelity(&cs, &ctx.outputs(&Pipeline::Unguided, n)))
        } else {
            score_of(CmbConfig { p, ..CmbConfig::default() })
        };
        by_p.push((p, s));
    }
    let defined: Vec<usize> = (0..n).filter(|&i| by_p.iter().all(|(_, s)| s[i].is_some())).collect();
    let means: Vec<(usize, f64)> = by_p
        .iter()
        .map(|(p, s)| (*p, defined.iter().map(|&i| s[i].unwrap()).sum::<f64>() / defined.len() as f64))
        .collect();
    let q1 = score_of(CmbConfig { q: 1, ..CmbConfig::default() });
    let (a, b) = paired(&by_p[2].1, &q1);
    let q_ci = paired_bootstrap(&a, &b, RESAMPLES, LEVEL, 9).unwrap();
    let pass = means[0].1 <= means[1].1 && means[1].1 <= means[2].1;
    let table: Vec<String> = means.iter().map(|(p, m)| format!("P={p}: {m:.4}")).collect();
    Verdict::new(pass, format!("{}; Q5-Q1 at P=30 {}", table.join(", "), fmt_ci(&q_ci)))
}

fn c9_descent(ctx: &Ctx) -> Verdict {
    let cmb = ctx.outputs(&cmb_pipeline(CmbConfig::default()), 50);
    let mut d: Vec<f64> = cmb
        .iter()
        .flat_map(|o| &o.trace.steps)
        .filter(|s| s.guided)
        .map(|s| s.loss_after.unwrap() - s.loss_before.unwrap())
        .collect();
    d.sort_by(f64::total_cmp);
    let median = if d.len() % 2 == 1 { d[d.len() / 2] } else { 0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2]) };
    let falling = d.iter().filter(|x| **x < 0.0).count() as f64 / d.len() as f64;
    Verdict::new(
        median <= 0.0,
        format!("{} guided steps, median change {median:.4e}, {:.1}% decreasing", d.len(), 100.0 * falling),
    )
}

fn c10_feature_pull(ctx: &Ctx) -> Verdict {
    let fx = ctx.fx();
    let cs = cases(32);
    let cfg = CmbConfig::default();
    let capture = Some(Capture { step: cfg.p - 1, scale: 1 });
    let captured = |p: &Pipeline| -> Vec<Vec<f64>> {
        let out = run_with(fx, p, &cs, capture, magic_core::parallel::thread_count());
        ctx.check_preserved(&cs, &out);
        out.into_iter().map(|o| o.captured.expect("capture reached")).collect()
    };
    let single: Vec<Vec<Vec<f64>>> = blend_modalities().into_iter().map(|m| captured(&Pipeline::Single(m))).collect();
    let cmb = feature_pull_statistic(&single, &captured(&cmb_pipeline(cfg.clone()))).unwrap();
    let fla = feature_pull_statistic(&single, &captured(&Pipeline::Fla(blend_modalities(), 50))).unwrap();
    Verdict::new(cmb <= fla, format!("normalized centroid distance cmb {cmb:.4} vs fla {fla:.4}"))
}

fn c11_reproducibility(ctx: &Ctx) -> Verdict {
    let fx = ctx.fx();
    let cs = cases(6);
    let mut broken = Vec::new();
    let pipelines = [
        Pipeline::Unguided,
        Pipeline::Single(Modality::Depth),
        Pipeline::Fla(blend_modalities(), 50),
        cmb_pipeline(CmbConfig { p: 10, q: 2, ..CmbConfig::default() }),
    ];
    for p in &pipelines {
        let one = run_with(fx, p, &cs, None, 1);
        let three = run_with(fx, p, &cs, None, 3);
        let again = run_with(fx, p, &cs, None, 1);
        ctx.check_preserved(&cs, &one);
        let eq =
            |a: &[Output], b: &[Output]| a.iter().zip(b).all(|(x, y)| x.image.bit_eq(&y.image) && x.trace == y.trace);
        if !(eq(&one, &three) && eq(&one, &again)) {
            broken.push(p.label());
        }
    }
    let scene_ok =
        cs.iter().all(|c| generate_scene(c.seed, &fixtures::scene_config()).unwrap().image.bit_eq(&c.scene.image));
    if !scene_ok {
        broken.push("scene generation".into());
    }
    let train = || {
        let mut tr =
            BackboneTrainer::<f32>::new(fixtures::net_config(), fx.sched.clone(), fixtures::train_config(3, 8))
                .unwrap();
        tr.run(&fixtures::train_data(), |_, _| {}).unwrap();
        tr.checkpoint().to_bytes()
    };
    if train() != train() {
        broken.push("training".into());
    }
    let imgs = || features(ctx, cs.iter().map(|c| c.scene.image.clone()));
    if imgs() != imgs() {
        broken.push("feature extraction".into());
    }
    let (checked, violations) = *ctx.preserved.borrow();
    let pass = broken.is_empty() && violations == 0 && checked > 0;
    Verdict::new(
        pass,
        format!(
            "{checked} outputs checked, {violations} preservation violations; thread/rerun mismatches: {}",
            if broken.is_empty() { "none".into() } else { broken.join(", ") }
        ),
    )
}

type Criterion = fn(&Ctx) -> Verdict;

fn main() {
    let criteria: [(&str, Criterion); 11] = [
        ("gradient oracle", c1_gradients),
        ("degeneracy equivalences", c2_degeneracies),
        ("diffusion correctness", c3_diffusion),
        ("frozen backbone", c4_frozen_backbone),
        ("trainability", c5_trainability),
        ("edge guidance efficacy", c6_edge_guidance),
        ("cmb beats fla", c7_cmb_vs_fla),
        ("P/Q sweep shape", c8_sweep),
        ("guidance-loss descent", c9_descent),
        ("feature pull", c10_feature_pull),
        ("preservation and reproducibility", c11_reproducibility),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Ctx { fx: OnceCell::new(), runs: RefCell::new(BTreeMap::new()), preserved: RefCell::new((0, 0)) };
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let v = check(&ctx);
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {number:>2} {name}: {status} ({:.0}s) {}", start.elapsed().as_secs_f64(), v.detail);
        failures += usize::from(!v.pass);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
