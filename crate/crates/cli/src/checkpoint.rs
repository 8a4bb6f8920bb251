//! Model checkpoints: a JSON manifest with the architecture, normalizers and
//! bank topology next to a tensor blob holding every parameter as `f32`.
//!
//! Loading rebuilds the model by replaying adapter and discriminator creation
//! in stage order, then fills every parameter by name from the blob.

use crate::blob::{self, Dtype};
use crate::error::{CliError, CliResult};
use clare_core::clare::{Adapter, Discriminator, ErrorStats};
use clare_core::policy::{ActionNormalizer, BackboneSpec, LayerSite, ObsNormalizer, PolicyModel};
use clare_core::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub rank: usize,
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscMember {
    pub rank: usize,
    pub stage: usize,
    pub stats: Option<ErrorStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankTopology {
    pub site: LayerSite,
    pub adapters: Vec<Member>,
    pub discriminators: Vec<DiscMember>,
    pub links: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRef {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: usize,
    pub spec: BackboneSpec,
    pub action_normalizer: ActionNormalizer,
    pub obs_normalizer: ObsNormalizer,
    pub euler_steps: usize,
    pub banks: Vec<BankTopology>,
    pub params: Vec<TensorRef>,
    pub base_params: usize,
    pub bank_params: usize,
    pub blob: BlobRef,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

pub fn manifest_of(model: &PolicyModel, blob: BlobRef) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        stage: model.stage,
        spec: model.spec.clone(),
        action_normalizer: model.normalizer.clone(),
        obs_normalizer: model.obs_normalizer.clone(),
        euler_steps: model.euler_steps,
        banks: model
            .banks
            .iter()
            .map(|b| BankTopology {
                site: b.site,
                adapters: b
                    .adapters
                    .iter()
                    .map(|a| Member {
                        rank: a.rank,
                        stage: a.stage,
                    })
                    .collect(),
                discriminators: b
                    .discriminators
                    .iter()
                    .map(|d| DiscMember {
                        rank: d.rank,
                        stage: d.stage,
                        stats: d.stats,
                    })
                    .collect(),
                links: b.links.clone(),
            })
            .collect(),
        params: model
            .store
            .entries()
            .iter()
            .map(|e| TensorRef {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
            })
            .collect(),
        base_params: model.base_param_count(),
        bank_params: model.bank_param_count(),
        blob,
    }
}

/// Paths of the manifest and blob for `stem` inside `dir`.
pub fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

/// Writes `{stem}.json` and `{stem}.bin`, then rounds the in-memory model to
/// the stored precision so it equals what a later load produces.
pub fn save(model: &mut PolicyModel, dir: &Path, stem: &str) -> CliResult<Manifest> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let (json_path, bin_path) = paths(dir, stem);
    let bytes = blob::encode(
        model.store.entries().iter().map(|e| (e.name.as_str(), &e.tensor)),
        Dtype::F32,
    );
    let blob_ref = BlobRef {
        file: format!("{stem}.bin"),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    write_atomic(&bin_path, &bytes)?;
    let manifest = manifest_of(model, blob_ref);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&json_path, text.as_bytes())?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        model.store.get_mut(id).round_to_f32();
    }
    Ok(manifest)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(CliError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(CliError::io(path))
}

pub fn read_manifest(json_path: &Path) -> CliResult<Manifest> {
    let text = std::fs::read_to_string(json_path).map_err(CliError::io(json_path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", json_path.display())))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(bad(format!(
            "{}: format version {version:?}, expected {FORMAT_VERSION}",
            json_path.display()
        )));
    }
    serde_json::from_value(value).map_err(|e| bad(format!("{}: {e}", json_path.display())))
}

/// Loads the checkpoint whose manifest is at `json_path`.
pub fn load(json_path: &Path) -> CliResult<PolicyModel> {
    let manifest = read_manifest(json_path)?;
    let dir = json_path.parent().unwrap_or(Path::new("."));
    let bin_path = dir.join(&manifest.blob.file);
    let bytes = std::fs::read(&bin_path).map_err(CliError::io(&bin_path))?;
    if bytes.len() as u64 != manifest.blob.bytes || hex::encode(Sha256::digest(&bytes)) != manifest.blob.sha256 {
        return Err(bad(format!("{}: contents do not match manifest", bin_path.display())));
    }
    let tensors = blob::decode(&bytes).map_err(|e| bad(format!("{}: {e}", bin_path.display())))?;
    rebuild(&manifest, tensors)
}

/// Reconstructs a model from its manifest and decoded tensors.
pub fn rebuild(manifest: &Manifest, tensors: Vec<(String, clare_core::Tensor)>) -> CliResult<PolicyModel> {
    let spec = manifest.spec.clone();
    spec.validate().map_err(|e| bad(e.to_string()))?;
    if manifest.banks.len() != spec.expandable.len() {
        return Err(bad("bank count differs from expandable layers"));
    }
    let mut rng = Rng::seed_from_u64(0);
    let mut model = PolicyModel::new(spec, manifest.action_normalizer.clone(), &mut rng)?;
    model.obs_normalizer = manifest.obs_normalizer.clone();
    model.euler_steps = manifest.euler_steps;

    for stage in 1..=manifest.stage {
        for (l, topo) in manifest.banks.iter().enumerate() {
            if topo.site != model.banks[l].site {
                return Err(bad(format!("bank {l}: site mismatch")));
            }
            let bank = &mut model.banks[l];
            for a in topo.adapters.iter().filter(|a| a.stage == stage) {
                let idx = bank.adapters.len();
                let adapter = Adapter::create(&mut model.store, l, idx, bank.dim, a.rank, stage, 0.0, &mut rng);
                bank.adapters.push(adapter);
            }
            for d in topo.discriminators.iter().filter(|d| d.stage == stage) {
                let idx = bank.discriminators.len();
                let mut disc = Discriminator::create(&mut model.store, l, idx, bank.dim, d.rank, stage, &mut rng);
                disc.stats = d.stats;
                bank.discriminators.push(disc);
            }
        }
    }
    for (l, topo) in manifest.banks.iter().enumerate() {
        let bank = &mut model.banks[l];
        if bank.adapters.len() != topo.adapters.len() || bank.discriminators.len() != topo.discriminators.len() {
            return Err(bad(format!("bank {l}: member created after stage {}", manifest.stage)));
        }
        bank.links = topo.links.clone();
    }
    model.stage = manifest.stage;
    if !model.banks_empty() || model.stage > 0 {
        for b in &model.banks {
            // Baseline checkpoints advance the stage without touching banks.
            if !b.is_empty() {
                b.check_invariants(model.stage).map_err(|e| bad(e.to_string()))?;
            }
        }
    }

    let listed: Vec<TensorRef> = model
        .store
        .entries()
        .iter()
        .map(|e| TensorRef {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
        })
        .collect();
    if listed != manifest.params {
        return Err(bad("parameter list does not match the rebuilt architecture"));
    }
    let mut by_name: HashMap<String, clare_core::Tensor> = tensors.into_iter().collect();
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let t = by_name
            .remove(&name)
            .ok_or_else(|| bad(format!("blob lacks tensor {name}")))?;
        if t.shape() != model.store.get(id).shape() {
            return Err(bad(format!("tensor {name}: shape {:?} in blob", t.shape())));
        }
        if !t.is_finite() {
            return Err(bad(format!("tensor {name} holds non-finite values")));
        }
        *model.store.get_mut(id) = t;
    }
    if let Some(name) = by_name.keys().min() {
        return Err(bad(format!("blob holds unknown tensor {name}")));
    }
    Ok(model)
}

/// Stage number encoded in a `stage_NNN` stem.
pub fn stage_stem(stage: usize) -> String {
    format!("stage_{stage:03}")
}

/// Highest-numbered `stage_NNN.json` in `dir`.
pub fn latest(dir: &Path) -> CliResult<Option<(usize, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(CliError::io(dir))? {
        let path = entry.map_err(CliError::io(dir))?.path();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        if let Some(n) = stem.strip_prefix("stage_").and_then(|n| n.parse::<usize>().ok()) {
            if best.as_ref().map_or(true, |(b, _)| n > *b) {
                best = Some((n, path));
            }
        }
    }
    Ok(best)
}
