//! Analytic vs central-difference gradients for every differentiable op.

use magic_core::{ElementwiseOp, ResampleDir, Tensor};
use rand::Rng;

use super::{check_op, random_tensor, rng};

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-4;

type OpFn = Box<super::GraphOp>;

/// Worst relative error over [`INSTANCES`] random instances.
fn run(name: &str, make: impl Fn(u64) -> (Vec<Tensor<f64>>, OpFn)) -> (String, f64) {
    let worst = (0..INSTANCES)
        .map(|seed| {
            let (inputs, op) = make(seed);
            check_op(&inputs, seed, op.as_ref())
        })
        .fold(0.0, f64::max);
    (name.to_string(), worst)
}

pub fn elementwise() -> Vec<(String, f64)> {
    let kinds = [
        ElementwiseOp::Add,
        ElementwiseOp::Sub,
        ElementwiseOp::Mul,
        ElementwiseOp::Scale(-1.7),
        ElementwiseOp::Silu,
        ElementwiseOp::Relu,
        ElementwiseOp::Square,
    ];
    let mut out: Vec<(String, f64)> = kinds
        .into_iter()
        .map(|kind| {
            run(&format!("{kind:?}"), |seed| {
                let mut r = rng(seed);
                let shape = [r.random_range(1..3), r.random_range(1..4), 3, 2];
                let a = random_tensor(&shape, &mut r);
                let b = random_tensor(&shape, &mut r);
                let binary = matches!(kind, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul);
                let op: OpFn = Box::new(move |g, v| g.elementwise(kind, v[0], binary.then(|| v[1])));
                (if binary { vec![a, b] } else { vec![a] }, op)
            })
        })
        .collect();
    out.push(run("mul-scalar", |seed| {
        let mut r = rng(seed);
        let a = random_tensor(&[2, 3], &mut r);
        let s = Tensor::scalar(r.random_range(0.5..2.0));
        (vec![a, s], Box::new(|g, v| g.mul(v[0], v[1])))
    }));
    out
}

pub fn layers() -> Vec<(String, f64)> {
    vec![
        run("add_channel", |seed| {
            let mut r = rng(seed);
            let (b, c) = (r.random_range(1..3), r.random_range(1..4));
            let x = random_tensor(&[b, c, 3, 3], &mut r);
            let per_sample = seed % 2 == 0;
            let bias = if per_sample { random_tensor(&[b, c], &mut r) } else { random_tensor(&[c], &mut r) };
            (vec![x, bias], Box::new(|g, v| g.add_channel(v[0], v[1])))
        }),
        run("conv2d", |seed| {
            let mut r = rng(seed);
            let k = [1, 3][r.random_range(0..2)];
            let stride = r.random_range(1..3);
            let pad = if k == 3 { 1 } else { 0 };
            let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
            let size = if stride == 2 { 5 } else { 4 };
            let x = random_tensor(&[r.random_range(1..3), cin, size, size], &mut r);
            let w = random_tensor(&[cout, cin, k, k], &mut r);
            let b = random_tensor(&[cout], &mut r);
            (vec![x, w, b], Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)))
        }),
        run("linear", |seed| {
            let mut r = rng(seed);
            let (b, n, m) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
            let x = random_tensor(&[b, n], &mut r);
            let w = random_tensor(&[m, n], &mut r);
            let bias = random_tensor(&[m], &mut r);
            (vec![x, w, bias], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))))
        }),
        run("normalize_channels", |seed| {
            let mut r = rng(seed);
            let groups = r.random_range(1..3);
            let c = groups * r.random_range(1..3);
            let x = random_tensor(&[r.random_range(1..3), c, 3, 3], &mut r);
            let gain = random_tensor(&[c], &mut r);
            let bias = random_tensor(&[c], &mut r);
            (vec![x, gain, bias], Box::new(move |g, v| g.normalize_channels(v[0], v[1], v[2], groups, 1e-5)))
        }),
    ]
}

pub fn reshaping() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = [ResampleDir::Down, ResampleDir::Up]
        .into_iter()
        .map(|dir| {
            run(&format!("resample {dir:?}"), |seed| {
                let mut r = rng(seed);
                let x = random_tensor(&[1, r.random_range(1..3), 4, 4], &mut r);
                (vec![x], Box::new(move |g, v| g.resample(v[0], dir)))
            })
        })
        .collect();
    out.push(run("concat", |seed| {
        let mut r = rng(seed);
        let a = random_tensor(&[2, 1, 2, 2], &mut r);
        let b = random_tensor(&[2, 2, 2, 2], &mut r);
        (vec![a, b], Box::new(|g, v| g.concat_channels(v[0], v[1])))
    }));
    out
}

pub fn reductions() -> Vec<(String, f64)> {
    vec![
        run("mean_spatial", |seed| {
            let mut r = rng(seed);
            let x = random_tensor(&[2, 3, 2, 3], &mut r);
            (vec![x], Box::new(|g, v| g.mean_spatial(v[0])))
        }),
        run("mean", |seed| {
            let mut r = rng(seed);
            let x = random_tensor(&[2, 3], &mut r);
            (vec![x], Box::new(|g, v| g.mean(v[0])))
        }),
        run("sum", |seed| {
            let mut r = rng(seed);
            let x = random_tensor(&[3, 2], &mut r);
            (vec![x], Box::new(|g, v| g.sum(v[0])))
        }),
        run("cross_entropy", |seed| {
            let mut r = rng(seed);
            let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
            let x = random_tensor(&[3, 4], &mut r);
            (vec![x], Box::new(move |g, v| g.cross_entropy(v[0], &labels)))
        }),
    ]
}

pub fn all() -> Vec<(String, f64)> {
    [elementwise(), layers(), reshaping(), reductions()].concat()
}

/// Relative error of the tape gradient of the blended guidance loss w.r.t.
/// the backbone latent, against central differences, on a two-scale net with
/// two randomized guidance encoders.
pub fn end_to_end_guidance() -> f64 {
    use magic_core::cmb::{guidance_gradient, guidance_loss, Guide, Task};
    use magic_core::toyworld::{extract_modality, generate_scene};
    use magic_core::{Denoiser, GuidanceEncoder, GuidanceEncoderConfig, McuNet, Modality, SceneConfig};
    use std::sync::Arc;

    use super::{micro_config, numeric_grad, random_tensor, randomize, rel_err, scene_batch};

    let mut net = Denoiser::<f64>::build(micro_config(), 1).unwrap();
    randomize(net.params_mut(), 11, 0.25);
    let bb = Arc::new(net);
    let seeds = [11_005];
    let scene = generate_scene(seeds[0], &SceneConfig::with_size(16)).unwrap();
    let (_, mask, masked) = scene_batch::<f64>(&seeds, 16);
    let tk = Task { masked, mask, class_ids: None, seeds: seeds.to_vec() };
    let t = 400;
    let mut r = rng(9);
    let w = random_tensor(&[1, 1, 16, 16], &mut r);
    let z = random_tensor(&[1, 1, 16, 16], &mut r);
    let guided: Vec<Vec<Tensor<f64>>> = [Modality::Edge, Modality::Segmentation]
        .into_iter()
        .map(|m| {
            let mut enc =
                GuidanceEncoder::<f64>::build(GuidanceEncoderConfig::for_backbone(m, &micro_config()).unwrap(), 2)
                    .unwrap();
            randomize(enc.params_mut(), 20 + m as u64, 0.2);
            let net = McuNet::new(bb.clone(), enc).unwrap();
            let cond = Tensor::stack(&[extract_modality(&scene, m).unwrap().cast()]).unwrap();
            let g = Guide::new(&net, cond).unwrap();
            net.denoise_with_signals(&w, &[t], &tk.mask, &tk.masked, &g.signals, None).unwrap().enc_features
        })
        .collect();
    let refs: Vec<&[Tensor<f64>]> = guided.iter().map(Vec::as_slice).collect();
    let delta = [1.0, 0.5];
    let gg = guidance_gradient(&bb, &z, &[t], &tk, &refs, &delta).unwrap();
    let loss_of = |zs: &[f64]| {
        let zt = Tensor::new(vec![1, 1, 16, 16], zs.to_vec()).unwrap();
        let feats = bb.denoise(&zt, &[t], &tk.mask, &tk.masked, None).unwrap().enc_features;
        guidance_loss(&refs, &feats, &delta).unwrap()
    };
    let direct = loss_of(z.data());
    if (direct - gg.losses[0]).abs() > 1e-9 * direct.max(1.0) || gg.grad.sq_norm_f64() == 0.0 {
        return f64::INFINITY;
    }
    rel_err(gg.grad.data(), &numeric_grad(z.data(), loss_of))
}
