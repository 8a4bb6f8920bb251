//! Demonstration dataset files and the audited in-memory store.
//!
//! ```text
//! magic "CLDS" | version u32 | task u64 | discarded u64 | episodes u32
//! | proprio u32 | context u32 | instruction u32
//! per episode:
//!   len u32 | branch u8 | final_distance f64
//!   initial: pos 2×f64 | vel 2×f64 | n u32 | landmarks n×2×f64
//!            | graspable i64 (-1 for none) | attached u8 | step u32
//!   observations len × (proprio + context + instruction) f64
//!   actions len × 2 f64
//! ```
//!
//! Little-endian throughout; values are stored as `f64` so a round trip is
//! exact.

use crate::blob::{BlobError, Reader};
use crate::error::{CliError, CliResult};
use clare_core::policy::{ObsSpec, Observation};
use clare_core::tasks::{Branch, Dataset, EnvState, Episode};
use std::cell::Cell;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CLDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Bytes(#[from] BlobError),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ds: &Dataset, obs: &ObsSpec) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.task as u64).to_le_bytes());
    out.extend_from_slice(&(ds.discarded as u64).to_le_bytes());
    put_u32(&mut out, ds.episodes.len());
    put_u32(&mut out, obs.proprio_dim);
    put_u32(&mut out, obs.context_dim);
    put_u32(&mut out, obs.instruction_dim);
    for e in &ds.episodes {
        put_u32(&mut out, e.len());
        out.push(match e.branch {
            Branch::Left => 0,
            Branch::Right => 1,
        });
        put_f64s(&mut out, &[e.final_distance]);
        let s = &e.initial;
        put_f64s(&mut out, &s.pos);
        put_f64s(&mut out, &s.vel);
        put_u32(&mut out, s.landmarks.len());
        for l in &s.landmarks {
            put_f64s(&mut out, l);
        }
        out.extend_from_slice(&s.graspable.map_or(-1i64, |g| g as i64).to_le_bytes());
        out.push(s.attached as u8);
        put_u32(&mut out, s.step);
        for o in &e.observations {
            put_f64s(&mut out, &o.flat());
        }
        for a in &e.actions {
            put_f64s(&mut out, a);
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Dataset, ObsSpec), DatasetError> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| DatasetError::BadMagic)? != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DatasetError::Version(version));
    }
    let task = r.u64()? as usize;
    let discarded = r.u64()? as usize;
    let count = r.u32()? as usize;
    let obs = ObsSpec {
        proprio_dim: r.u32()? as usize,
        context_dim: r.u32()? as usize,
        instruction_dim: r.u32()? as usize,
    };
    let f64s = |r: &mut Reader, n: usize| -> Result<Vec<f64>, DatasetError> {
        if n.saturating_mul(8) > r.remaining() {
            return Err(BlobError::Truncated(r.pos).into());
        }
        (0..n).map(|_| r.f64().map_err(DatasetError::from)).collect()
    };
    let mut episodes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let branch = match r.u8()? {
            0 => Branch::Left,
            1 => Branch::Right,
            b => return Err(DatasetError::Malformed(format!("branch tag {b}"))),
        };
        let final_distance = r.f64()?;
        let pos = [r.f64()?, r.f64()?];
        let vel = [r.f64()?, r.f64()?];
        let n = r.u32()? as usize;
        let flat = f64s(&mut r, 2 * n)?;
        let landmarks = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let graspable = match r.u64()? as i64 {
            -1 => None,
            g if g >= 0 => Some(g as usize),
            g => return Err(DatasetError::Malformed(format!("graspable index {g}"))),
        };
        let attached = r.u8()? != 0;
        let step = r.u32()? as usize;
        let width = obs.total();
        let flat = f64s(&mut r, len.saturating_mul(width))?;
        let observations = flat
            .chunks_exact(width.max(1))
            .map(|row| Observation {
                proprio: row[..obs.proprio_dim].to_vec(),
                context: row[obs.proprio_dim..obs.proprio_dim + obs.context_dim].to_vec(),
                instruction: row[obs.proprio_dim + obs.context_dim..].to_vec(),
            })
            .collect();
        let flat = f64s(&mut r, 2 * len)?;
        let actions = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        episodes.push(Episode {
            task,
            initial: EnvState {
                pos,
                vel,
                landmarks,
                graspable,
                attached,
                step,
            },
            branch,
            observations,
            actions,
            final_distance,
        });
    }
    if r.remaining() != 0 {
        return Err(BlobError::Trailing(r.remaining()).into());
    }
    Ok((
        Dataset {
            task,
            episodes,
            discarded,
        },
        obs,
    ))
}

pub fn write(path: &Path, ds: &Dataset, obs: &ObsSpec) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    crate::checkpoint::write_atomic(path, &encode(ds, obs))
}

pub fn read(path: &Path) -> CliResult<(Dataset, ObsSpec)> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    decode(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Stream datasets with a per-task access counter, so a run can prove which
/// tasks' data each stage touched.
#[derive(Debug)]
pub struct DemoStore {
    datasets: Vec<Dataset>,
    reads: Vec<Cell<u64>>,
}

impl DemoStore {
    pub fn new(datasets: Vec<Dataset>) -> Self {
        let reads = datasets.iter().map(|_| Cell::new(0)).collect();
        DemoStore { datasets, reads }
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    /// Dataset of stream task `n` (0-based); counts as one access.
    pub fn get(&self, n: usize) -> &Dataset {
        self.reads[n].set(self.reads[n].get() + 1);
        &self.datasets[n]
    }

    pub fn reads(&self) -> Vec<u64> {
        self.reads.iter().map(Cell::get).collect()
    }
}
