//! Output plumbing: atomic writes, run manifests, loss-curve CSVs.

use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use viewfuse_core::fusion::LossBreakdown;

/// Write via a temp file in the same directory, then rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "out".into())
    ));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Run provenance. The wall time makes this file inherently run-varying, so
/// determinism comparisons must skip it (everything else is byte-stable).
#[derive(Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_s: f64,
    pub config: &'a C,
}

pub struct RunTimer {
    start: Instant,
}

impl RunTimer {
    pub fn start() -> Self {
        RunTimer {
            start: Instant::now(),
        }
    }

    pub fn write_manifest<C: Serialize>(
        &self,
        dir: &Path,
        command: &str,
        seed: u64,
        threads: usize,
        config: &C,
    ) -> Result<()> {
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            threads,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            config,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }
}

pub fn write_loss_curves(path: &Path, curves: &[(usize, LossBreakdown)]) -> Result<()> {
    let mut text = String::from("iteration,total,color,normal,mask,eikonal,sparse,smooth\n");
    for (it, b) in curves {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            it, b.total, b.color, b.normal, b.mask, b.eikonal, b.sparse, b.smooth
        ));
    }
    atomic_write(path, text.as_bytes())
}
