#![allow(dead_code)]

//! Independent oracles shared by the integration and acceptance tests.

pub mod diffusion;
pub mod gradients;

use magic_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||, 1e-12)`
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central finite differences of a scalar function of one flat input.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]` kept at least `1e-3` away from zero so
/// kinks (relu) are never straddled by the finite-difference step.
pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v.abs() < 1e-3 {
            0.5
        } else {
            v
        }
    })
}

/// Graph-building function under test.
pub type GraphOp = dyn Fn(&mut Graph<f64>, &[Var]) -> magic_core::Result<Var>;

/// Gradient check of `op` w.r.t. each of `inputs`.
///
/// The scalar objective is `sum(op(inputs) * weights)` with fixed random
/// weights, so every output element contributes a distinct coefficient.
/// Returns the worst relative error across inputs.
pub fn check_op(inputs: &[Tensor<f64>], seed: u64, op: &GraphOp) -> f64 {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = op(&mut g, &vars).expect("forward");
        g.shape(y).to_vec()
    };
    let mut r = rng(seed ^ 0x5eed);
    let weights = random_tensor(&out_shape, &mut r);

    let objective = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let y = op(&mut g, &vars).expect("forward");
        g.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = op(&mut g, &vars).expect("forward");
    let w = g.constant(weights.clone());
    let yw = g.mul(y, w).unwrap();
    let loss = g.sum(yw).unwrap();
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let numeric = numeric_grad(inputs[i].data(), |flat| {
            let mut ins = inputs.to_vec();
            ins[i] = Tensor::new(inputs[i].shape().to_vec(), flat.to_vec()).unwrap();
            objective(&ins)
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Two-scale network small enough for exhaustive checks.
pub fn micro_config() -> magic_core::UNetConfig {
    magic_core::UNetConfig {
        image_size: 16,
        in_channels: 3,
        base_channels: 4,
        channel_mults: vec![1, 2],
        blocks_per_scale: 1,
        time_embed_dim: 8,
        cond_embed_classes: 0,
    }
}

/// Replace every parameter by uniform noise in `[-scale, scale]`.
pub fn randomize<T: magic_core::Element>(store: &mut magic_core::ParamStore<T>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let tensors = store
        .tensors()
        .iter()
        .map(|t| Tensor::from_fn(t.shape().to_vec(), |_| T::from_f64_lossy(r.random_range(-scale..scale))))
        .collect();
    store.set_all(tensors).expect("same shapes");
}

/// Images, masks and masked images for `seeds` at size `s`, as `[B, 1, S, S]`.
pub fn scene_batch<T: magic_core::Element>(seeds: &[u64], s: usize) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    use magic_core::toyworld::{generate_mask, generate_scene, MaskMode, MaskSpec};
    let cfg = magic_core::SceneConfig::with_size(s);
    let mut xs = Vec::new();
    let mut ms = Vec::new();
    for &seed in seeds {
        xs.push(generate_scene(seed, &cfg).expect("scene").image.cast::<T>());
        let spec = MaskSpec::new(MaskMode::Rect, 0.4, seed);
        ms.push(generate_mask(&spec, s).expect("mask").cast::<T>());
    }
    let x = Tensor::stack(&xs).unwrap();
    let m = Tensor::stack(&ms).unwrap();
    let masked = magic_core::unet::masked_image(&x, &m).unwrap();
    (x, m, masked)
}
