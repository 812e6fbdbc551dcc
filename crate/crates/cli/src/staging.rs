//! Verb outputs are written to a private staging directory and moved into
//! the output directory only when the verb succeeds. On failure the staging
//! directory is moved under `quarantine/` with the error message.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};

pub struct Staging {
    out: PathBuf,
    dir: PathBuf,
    verb: &'static str,
}

impl Staging {
    pub fn new(out: &Path, verb: &'static str) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let dir = out.join(format!(".staging-{verb}-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            dir,
            verb,
        })
    }

    /// Where a file named `name` is written while the verb runs.
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Moves every staged file into the output directory.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut names: Vec<_> = fs::read_dir(&self.dir)?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        let mut moved = Vec::with_capacity(names.len());
        for name in names {
            let target = self.out.join(&name);
            fs::rename(self.dir.join(&name), &target).with_context(|| format!("moving {}", target.display()))?;
            moved.push(target);
        }
        fs::remove_dir(&self.dir)?;
        Ok(moved)
    }

    /// Keeps whatever was written, next to the error, away from the outputs.
    /// Returns `None` when the verb failed before writing anything.
    pub fn quarantine(self, error: &anyhow::Error) -> Result<Option<PathBuf>> {
        if fs::read_dir(&self.dir)?.next().is_none() {
            fs::remove_dir(&self.dir)?;
            return Ok(None);
        }
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let root = self.out.join("quarantine");
        fs::create_dir_all(&root)?;
        let target = root.join(format!("{}-{stamp}-{}", self.verb, std::process::id()));
        fs::write(self.dir.join("error.txt"), format!("{error:#}\n"))?;
        fs::rename(&self.dir, &target)?;
        Ok(Some(target))
    }
}
