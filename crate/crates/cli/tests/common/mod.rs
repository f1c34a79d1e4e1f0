#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

pub const TINY: &str = "\
[data]
size = 16
seeds = 0..40
[schedule]
t_sample = 5
[backbone]
base_channels = 4
channel_mults = 1,2
time_embed_dim = 8
steps = 3
batch_size = 4
lr = 1e-3
[cmb]
p = 3
q = 2
[complete]
seeds = 11000..11002
";

pub fn magic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magic")).args(args).output().expect("spawn magic")
}

pub fn ok(args: &[&str]) -> Output {
    let out = magic(args);
    assert!(out.status.success(), "magic {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn fails(args: &[&str]) -> String {
    let out = magic(args);
    assert!(!out.status.success(), "magic {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Temporary workspace with a trained tiny backbone and encoders.
pub struct Env {
    pub dir: TempDir,
}

impl Env {
    pub fn empty() -> Self {
        Env { dir: tempfile::tempdir().unwrap() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    pub fn raw(&self, name: &str, text: &str) -> String {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p.display().to_string()
    }

    /// Write `TINY` followed by `extra` as `name`.
    pub fn config(&self, name: &str, extra: &str) -> String {
        self.raw(name, &format!("{TINY}{extra}"))
    }

    /// Backbone plus edge, segmentation and depth encoders.
    pub fn trained() -> Self {
        let env = Env::empty();
        let bb = env.config("bb.ini", "");
        ok(&["train-backbone", "--config", &bb, "--out", &env.s("bb")]);
        let mcu = env.config(
            "mcu.ini",
            &format!(
                "[run]\nbackbone = {}\n[mcu.edge]\nsteps = 2\nbatch_size = 4\n[mcu.segmentation]\nsteps = 2\nbatch_size = 4\n[mcu.depth]\nsteps = 2\nbatch_size = 4\n",
                env.s("bb/checkpoints/backbone.ck")
            ),
        );
        ok(&["train-mcu", "--config", &mcu, "--out", &env.s("mcu")]);
        env
    }

    /// Sections naming the trained checkpoints, for `complete` and `sweep`.
    pub fn nets(&self) -> String {
        let mut s = format!("[run]\nbackbone = {}\n", self.s("bb/checkpoints/backbone.ck"));
        for m in ["edge", "segmentation", "depth"] {
            s.push_str(&format!("[mcu.{m}]\ncheckpoint = {}\n", self.s(&format!("mcu/checkpoints/mcu-{m}.ck"))));
        }
        s
    }
}

pub fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
