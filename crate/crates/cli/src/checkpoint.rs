//! Binary checkpoint: the full parameter set, optimizer moments, iteration
//! counter, and the configuration that shaped the model. Loading against a
//! different configuration is an error.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use viewfuse_core::fusion::{FusionConfig, FusionModel, Snapshot, TrainState};

use crate::report::atomic_write;

const MAGIC: &[u8; 8] = b"VFCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    fusion: FusionConfig,
    n_views: usize,
    n_params: usize,
}

// FusionConfig carries f64 fields; compare through serde_json so float
// formatting is canonical on both sides.
impl CheckpointHeader {
    fn matches(&self, other: &CheckpointHeader) -> bool {
        serde_json::to_string(self).ok() == serde_json::to_string(other).ok()
    }
}

fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(cur: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        cur.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &FusionConfig,
    n_views: usize,
    model: &FusionModel,
    state: &TrainState,
) -> Result<()> {
    let snap = state.snapshot(model);
    let header = CheckpointHeader {
        fusion: cfg.clone(),
        n_views,
        n_params: snap.params.len(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(snap.params.len() * 24 + header_json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.extend_from_slice(&header_json);
    out.write_all(&(snap.params.len() as u64).to_le_bytes())?;
    write_f64s(&mut out, &snap.params);
    write_f64s(&mut out, &snap.adam_m);
    write_f64s(&mut out, &snap.adam_v);
    out.write_all(&snap.adam_t.to_le_bytes())?;
    out.write_all(&(snap.iteration as u64).to_le_bytes())?;
    out.write_all(&(snap.skipped_steps as u64).to_le_bytes())?;
    atomic_write(path, &out)
}

/// Restore a snapshot; the stored configuration must match `cfg` exactly.
pub fn load_checkpoint(path: &Path, cfg: &FusionConfig, n_views: usize) -> Result<Snapshot> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        bail!("{} is not a checkpoint file", path.display());
    }
    let mut cur = Cursor::new(&bytes[..]);
    cur.set_position(MAGIC.len() as u64);
    let mut len8 = [0u8; 8];
    cur.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let start = cur.position() as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[start..start + header_len])
        .context("parsing checkpoint header")?;
    cur.set_position((start + header_len) as u64);

    let expected = CheckpointHeader {
        fusion: cfg.clone(),
        n_views,
        n_params: header.n_params,
    };
    if !header.matches(&expected) {
        bail!(
            "checkpoint {} was written with a different configuration",
            path.display()
        );
    }

    cur.read_exact(&mut len8)?;
    let n_params = u64::from_le_bytes(len8) as usize;
    if n_params != header.n_params {
        bail!("checkpoint parameter count mismatch");
    }
    let params = read_f64s(&mut cur, n_params)?;
    let adam_m = read_f64s(&mut cur, n_params)?;
    let adam_v = read_f64s(&mut cur, n_params)?;
    cur.read_exact(&mut len8)?;
    let adam_t = u64::from_le_bytes(len8);
    cur.read_exact(&mut len8)?;
    let iteration = u64::from_le_bytes(len8) as usize;
    cur.read_exact(&mut len8)?;
    let skipped_steps = u64::from_le_bytes(len8) as usize;

    Ok(Snapshot {
        params,
        adam_m,
        adam_v,
        adam_t,
        iteration,
        skipped_steps,
    })
}
