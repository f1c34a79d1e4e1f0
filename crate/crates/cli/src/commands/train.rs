//! Backbone and guidance-encoder training runs.

use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Result};
use magic_core::toyworld::Split;
use magic_core::train::{BackboneTrainer, McuTrainer, TrainData};

use super::{load_checkpoint, Common};
use crate::config::RunConfig;
use crate::rundir::{RunDir, CHECKPOINTS};

fn train_data(cfg: &RunConfig) -> Result<TrainData> {
    let seeds: Vec<u64> = cfg.data.seeds.clone().filter(|&s| Split::of_seed(s) == Some(Split::Train)).collect();
    if seeds.is_empty() {
        bail!("[data] seeds {:?} contain no training-split scene", cfg.data.seeds);
    }
    Ok(TrainData::new(seeds, cfg.scene())?)
}

/// Per-step loss rows plus periodic progress on stderr.
struct LossLog {
    csv: String,
    what: String,
    total: u64,
    start: Instant,
}

impl LossLog {
    fn new(what: &str, total: u64) -> Self {
        LossLog { csv: "step,loss\n".into(), what: what.into(), total, start: Instant::now() }
    }

    fn record(&mut self, step: u64, loss: f64) {
        self.csv.push_str(&format!("{step},{loss:e}\n"));
        if step.is_multiple_of(100) || step == self.total {
            eprintln!(
                "{} step {step}/{} loss {loss:.5} ({:.0}s)",
                self.what,
                self.total,
                self.start.elapsed().as_secs_f64()
            );
        }
    }
}

pub fn backbone(c: &Common) -> Result<()> {
    let cfg = &c.config;
    let data = train_data(cfg)?;
    let tcfg = cfg.train_config(&cfg.backbone.train, 0);
    let mut tr = match &cfg.backbone.train.resume {
        Some(p) => BackboneTrainer::<f32>::resume(&load_checkpoint(p)?, tcfg)?,
        None => BackboneTrainer::<f32>::new(cfg.net(), cfg.schedule.build()?, tcfg)?,
    };
    let dir = RunDir::create(&c.out_dir()?, c.force, cfg, &[CHECKPOINTS])?;
    let mut log = LossLog::new("backbone", cfg.backbone.train.steps);
    tr.run(&data, |s, l| log.record(s, l))?;
    tr.checkpoint().save(&dir.path(CHECKPOINTS).join("backbone.ck"))?;
    dir.write("loss.csv", log.csv)?;
    Ok(())
}

pub fn mcu(c: &Common) -> Result<()> {
    let cfg = &c.config;
    let path = cfg.run.backbone.as_ref().ok_or_else(|| anyhow!("train-mcu needs [run] backbone = <checkpoint>"))?;
    if !path.exists() {
        bail!("backbone checkpoint {} does not exist", path.display());
    }
    if cfg.mcu.is_empty() {
        bail!("no [mcu.<modality>] section to train");
    }
    let (net, sched) = magic_core::train::load_backbone::<f32>(&load_checkpoint(path)?)?;
    let backbone = Arc::new(net);
    let data = train_data(cfg)?;
    let dir = RunDir::create(&c.out_dir()?, c.force, cfg, &[CHECKPOINTS])?;
    for (&m, sec) in &cfg.mcu {
        let tcfg = cfg.train_config(&sec.train, 1 + m as u64);
        let mut tr = match &sec.train.resume {
            Some(p) => McuTrainer::resume(backbone.clone(), &load_checkpoint(p)?, tcfg)?,
            None => McuTrainer::new(backbone.clone(), sched.clone(), m, tcfg)?,
        };
        if tr.modality() != m {
            bail!("[mcu.{m}] resumes a {} encoder", tr.modality());
        }
        let mut log = LossLog::new(m.as_str(), sec.train.steps);
        tr.run(&data, |s, l| log.record(s, l))?;
        tr.checkpoint().save(&dir.path(CHECKPOINTS).join(format!("mcu-{m}.ck")))?;
        dir.write(format!("loss-{m}.csv"), log.csv)?;
    }
    Ok(())
}
