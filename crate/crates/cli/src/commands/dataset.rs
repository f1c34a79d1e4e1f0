//! Scene, modality-map and mask export.

use anyhow::Result;
use magic_core::toyworld::{extract_modality, generate_scene, manifest, Split};
use magic_core::Modality;

use super::{mask_for, write_gray, write_seg, Common};
use crate::rundir::RunDir;

const DIRS: [&str; 6] = ["images", "masks", "edge", "sketch", "segmentation", "depth"];

/// Returns the number of exported scenes.
pub fn run(c: &Common) -> Result<usize> {
    let cfg = &c.config;
    let dir = RunDir::create(&c.out_dir()?, c.force, cfg, &DIRS)?;
    let scene_cfg = cfg.scene();
    let mut entries = Vec::new();
    for seed in cfg.data.seeds.clone() {
        let Some(split) = Split::of_seed(seed).filter(|s| cfg.data.splits.contains(s)) else { continue };
        let scene = generate_scene(seed, &scene_cfg)?;
        let name = format!("{seed}.pgm");
        write_gray(&dir.path("images").join(&name), &scene.image)?;
        write_gray(&dir.path("masks").join(&name), &mask_for(cfg, seed)?)?;
        write_gray(&dir.path("edge").join(&name), &extract_modality(&scene, Modality::Edge)?)?;
        write_gray(&dir.path("sketch").join(&name), &extract_modality(&scene, Modality::Sketch)?)?;
        write_gray(&dir.path("depth").join(&name), &extract_modality(&scene, Modality::Depth)?)?;
        write_seg(&dir.path("segmentation").join(format!("{seed}.ppm")), &scene.seg, cfg.data.size)?;
        entries.push((seed, split));
    }
    dir.write("manifest.txt", manifest(&entries))?;
    Ok(entries.len())
}
