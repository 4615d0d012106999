//! Output directory that removes what it wrote unless the command succeeds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub struct OutputDir {
    root: PathBuf,
    created_root: bool,
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        let created_root = !root.exists();
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            created_root,
            written: Vec::new(),
            committed: false,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path of `name` under the root, registered for cleanup.
    pub fn path(&mut self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        self.written.push(p.clone());
        p
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.created_root {
            let _ = fs::remove_dir_all(&self.root);
        } else {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}
