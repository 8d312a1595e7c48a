//! Run-directory bookkeeping: every run records its resolved configuration,
//! seed, and a content hash of its inputs, so results can be reproduced.

use std::fs;
use std::path::{Path, PathBuf};

use slotseg_core::config::RunConfig;
use slotseg_core::{Error, Result};

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<RunDir> {
        fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        self.write_text("config.json", &cfg.to_json_pretty())
    }

    /// Records the content hash of every named input (files or directories).
    pub fn write_input_hash(&self, inputs: &[&Path]) -> Result<()> {
        let mut entries = Vec::new();
        for input in inputs {
            entries.push(format!("{} {:016x}", input.display(), hash_path(input)?));
        }
        self.write_text("inputs.hash", &(entries.join("\n") + "\n"))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p.display().to_string(), e))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

/// FNV-1a content hash over a file, or over a directory's sorted file paths
/// and bytes.
pub fn hash_path(path: &Path) -> Result<u64> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let feed = |bytes: &[u8], h: &mut u64| {
        for &b in bytes {
            *h ^= b as u64;
            *h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    for f in files {
        feed(f.display().to_string().as_bytes(), &mut h);
        let bytes = fs::read(&f).map_err(|e| Error::io(f.display().to_string(), e))?;
        feed(&bytes, &mut h);
    }
    Ok(h)
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(|e| Error::io(path.display().to_string(), e))? {
            let entry = entry.map_err(|e| Error::io(path.display().to_string(), e))?;
            collect_files(&entry.path(), out)?;
        }
    }
    Ok(())
}
