//! Output directories: never reused unless forced, always carrying the
//! resolved config.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::config::RunConfig;

pub const ECHO: &str = "config.echo";
pub const CHECKPOINTS: &str = "checkpoints";
pub const SAMPLES: &str = "samples";
pub const TRACES: &str = "traces";
pub const METRICS: &str = "metrics.csv";

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create `root` with `subdirs` and the config echo. An existing
    /// non-empty directory is replaced only when `force` is set.
    pub fn create(root: &Path, force: bool, cfg: &RunConfig, subdirs: &[&str]) -> Result<Self> {
        if root.exists() {
            let non_empty =
                std::fs::read_dir(root).with_context(|| format!("reading {}", root.display()))?.next().is_some();
            if non_empty {
                if !force {
                    bail!("output directory {} is not empty (use --force to replace it)", root.display());
                }
                std::fs::remove_dir_all(root).with_context(|| format!("clearing {}", root.display()))?;
            }
        }
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        for d in subdirs {
            std::fs::create_dir_all(root.join(d))?;
        }
        let dir = RunDir { root: root.to_path_buf() };
        dir.write(ECHO, cfg.echo())?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }
}
