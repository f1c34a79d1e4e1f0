//! Fixtures shared by the benchmarks.

use magic_core::cmb::Task;
use magic_core::toyworld::{extract_modality, generate_mask, generate_scene, MaskSpec, SceneConfig};
use magic_core::unet::masked_image;
use magic_core::{Modality, Tensor, UNetConfig};

/// Deterministic values in `[-1, 1)` without an RNG dependency.
pub fn pattern(shape: &[usize], salt: u64) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |i| {
        let h = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
        (h as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    })
}

/// The network size the acceptance runs use.
pub fn bench_net() -> UNetConfig {
    UNetConfig {
        image_size: 16,
        in_channels: 3,
        base_channels: 16,
        channel_mults: vec![1, 2, 2],
        blocks_per_scale: 1,
        time_embed_dim: 32,
        cond_embed_classes: 0,
    }
}

pub fn scene_config() -> SceneConfig {
    SceneConfig { size: 16, ..SceneConfig::default() }
}

/// Completion task for scene seeds `0..batch` plus one condition map per
/// modality.
pub fn task(batch: usize, modalities: &[Modality]) -> (Task<f32>, Vec<Tensor<f32>>) {
    let sc = scene_config();
    let scenes: Vec<_> = (0..batch as u64).map(|s| generate_scene(s, &sc).unwrap()).collect();
    let masks: Vec<Tensor<f32>> =
        (0..batch as u64).map(|s| generate_mask(&MaskSpec::random(s), sc.size).unwrap()).collect();
    let masked: Vec<Tensor<f32>> = scenes.iter().zip(&masks).map(|(s, m)| masked_image(&s.image, m).unwrap()).collect();
    let conds = modalities
        .iter()
        .map(|&m| Tensor::stack(&scenes.iter().map(|s| extract_modality(s, m).unwrap()).collect::<Vec<_>>()).unwrap())
        .collect();
    let task = Task {
        masked: Tensor::stack(&masked).unwrap(),
        mask: Tensor::stack(&masks).unwrap(),
        class_ids: None,
        seeds: (0..batch as u64).collect(),
    };
    (task, conds)
}
