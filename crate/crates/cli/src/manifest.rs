//! Run manifests: every command records its resolved configuration,
//! inputs, outputs, seed and duration, written atomically at run end.

use fusedet_core::config::Config;
use fusedet_core::error::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct RunManifest {
    command: String,
    started: Instant,
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn start(command: &str, config: &Config, seed: u64) -> RunManifest {
        let mut m = RunManifest {
            command: command.to_string(),
            started: Instant::now(),
            entries: Vec::new(),
        };
        m.put("seed", seed.to_string());
        for line in config.dump().lines() {
            if let Some((k, v)) = line.split_once('=') {
                m.put(&format!("config.{k}"), v.to_string());
            }
        }
        m
    }

    pub fn put(&mut self, key: &str, value: String) {
        self.entries.push((key.to_string(), value));
    }

    /// Writes `manifest.txt`-style content to `path` via temp-and-rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "command={}", self.command);
        let _ = writeln!(text, "version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(
            text,
            "duration_ms={}",
            self.started.elapsed().as_millis()
        );
        for (k, v) in &self.entries {
            let _ = writeln!(text, "{k}={v}");
        }
        write_atomic(path, text.as_bytes())
    }
}

/// Writes a file via a temporary sibling plus rename, so failed runs leave
/// no partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sibling_tmp(path)?;
    std::fs::write(&tmp, bytes).map_err(Error::io(format!("writing {}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(Error::io(format!("renaming to {}", path.display())))
}

fn sibling_tmp(path: &Path) -> Result<PathBuf> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("bad output path {}", path.display())))?;
    Ok(parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id())))
}

/// Runs `build` against a temporary directory, then renames it into place.
/// The destination must not already exist.
pub fn build_dir_atomic(
    dest: &Path,
    build: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    if dest.exists() {
        return Err(Error::Input(format!(
            "output {} already exists; refusing to overwrite",
            dest.display()
        )));
    }
    if let Some(parent) = dest.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(Error::io("creating output parent"))?;
        }
    }
    let tmp = sibling_tmp(dest)?;
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(Error::io("clearing stale partial dir"))?;
    }
    std::fs::create_dir_all(&tmp).map_err(Error::io("creating partial dir"))?;
    match build(&tmp) {
        Ok(()) => std::fs::rename(&tmp, dest)
            .map_err(Error::io(format!("renaming into {}", dest.display()))),
        Err(e) => {
            let _ = std::fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}
