//! Binary checkpoints for supernets and supernet trees.
//!
//! Layout of a .fsns file:
//!
//! ```text
//! magic   4 bytes  "FSNS"
//! version u32 LE   1
//! length  u64 LE   manifest byte count
//! ...     UTF-8 JSON manifest
//! ...     payload: concatenated little-endian f32 tensors
//! ```
//!
//! The manifest is self-describing: it carries the space, the region, the
//! tensor index (name, shape, byte offset, element count), the training
//! counters, mixture parameters when present, and the rng stream labels
//! the trainer draws from. A loader validates every structural invariant
//! before touching the payload, so a truncated or doctored file fails
//! cleanly instead of producing a half-built supernet.
//!
//! Weight tensors are indexed as `w/<name>`, momentum buffers as
//! `m/<name>`. Trees are directories: one `tree-manifest.json` plus one
//! .fsns file per supernet.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use fsnas_core::space::{OpDesc, OpVocab, Region, SearchSpace};
use fsnas_core::supernet::MixtureParams;
use fsnas_core::{IoDims, OptState, Supernet, SupernetTree, Tensor, TrainMode, WeightStore};
use serde::{Deserialize, Serialize};

use crate::config::op_kind_by_name;

const MAGIC: &[u8; 4] = b"FSNS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

/// Hard ceiling on manifest size; real manifests are a few KB.
const MAX_MANIFEST: u64 = 64 << 20;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    space: SpaceInfo,
    input_dim: usize,
    classes: usize,
    /// Allowed op ids per edge (the region).
    allowed: Vec<Vec<usize>>,
    mode: TrainMode,
    master_seed: u64,
    trained_epochs: usize,
    val_loss: Option<f64>,
    mixture: Option<MixtureParams>,
    /// Streams the trainer consumes, for reference when resuming.
    rng_labels: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpaceInfo {
    nodes: usize,
    hidden: usize,
    ops: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
    /// Element count (payload bytes = count * 4).
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TreeManifest {
    seed: u64,
    split_history: Vec<usize>,
    spent_epochs: usize,
    /// Checkpoint file names per level, in child order.
    levels: Vec<Vec<String>>,
}

const TREE_MANIFEST: &str = "tree-manifest.json";

pub fn save_supernet(s: &Supernet, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let push = |name: String, t: &Tensor, payload: &mut Vec<u8>, out: &mut Vec<TensorEntry>| {
        out.push(TensorEntry {
            name,
            shape: t.shape.clone(),
            offset: payload.len() as u64,
            count: t.elem_count() as u64,
        });
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in s.weights().iter() {
        push(format!("w/{name}"), t, &mut payload, &mut tensors);
    }
    for (name, t) in s.opt_state().buffers() {
        push(format!("m/{name}"), t, &mut payload, &mut tensors);
    }

    let space = s.region().space();
    let manifest = Manifest {
        space: SpaceInfo {
            nodes: space.nodes(),
            hidden: space.hidden(),
            ops: space.vocab().ops().iter().map(|o| o.name.clone()).collect(),
        },
        input_dim: s.dims().input,
        classes: s.dims().classes,
        allowed: s.region().allowed_all().to_vec(),
        mode: s.mode(),
        master_seed: s.master_seed(),
        trained_epochs: s.trained_epochs(),
        val_loss: s.val_loss(),
        mixture: s.mixture().cloned(),
        rng_labels: rng_labels(s.mode()),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut file = Vec::with_capacity(HEADER_LEN + manifest_bytes.len() + payload.len());
    file.extend_from_slice(MAGIC);
    file.extend_from_slice(&VERSION.to_le_bytes());
    file.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    file.extend_from_slice(&manifest_bytes);
    file.extend_from_slice(&payload);
    std::fs::write(path, file).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn load_supernet(path: &Path) -> Result<Supernet> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_supernet(&bytes).with_context(|| format!("corrupt checkpoint {}", path.display()))
}

fn parse_supernet(bytes: &[u8]) -> Result<Supernet> {
    if bytes.len() < HEADER_LEN {
        bail!("file shorter than the {HEADER_LEN}-byte header");
    }
    if &bytes[..4] != MAGIC {
        bail!("bad magic (not an FSNS checkpoint)");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        bail!("unsupported version {version} (expected {VERSION})");
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if manifest_len > MAX_MANIFEST {
        bail!("manifest length {manifest_len} is implausible");
    }
    let manifest_len = manifest_len as usize;
    let Some(rest) = bytes.get(HEADER_LEN..) else {
        bail!("manifest extends past end of file");
    };
    if rest.len() < manifest_len {
        bail!(
            "manifest length {} exceeds the {} bytes present",
            manifest_len,
            rest.len()
        );
    }
    let manifest: Manifest =
        serde_json::from_slice(&rest[..manifest_len]).context("manifest is not valid JSON")?;
    let payload = &rest[manifest_len..];

    // Structural invariants: entries in offset order, no overlap, counts
    // matching shapes, payload exactly covered.
    let mut expected_end = 0u64;
    for entry in &manifest.tensors {
        let elems: usize = entry.shape.iter().product();
        if elems as u64 != entry.count {
            bail!(
                "tensor {} declares {} elements but shape {:?} holds {}",
                entry.name,
                entry.count,
                entry.shape,
                elems
            );
        }
        if entry.offset < expected_end {
            bail!(
                "tensor {} at offset {} overlaps the previous tensor ending at {}",
                entry.name,
                entry.offset,
                expected_end
            );
        }
        if entry.offset != expected_end {
            bail!(
                "tensor {} at offset {} leaves a gap after {}",
                entry.name,
                entry.offset,
                expected_end
            );
        }
        expected_end = entry
            .offset
            .checked_add(entry.count * 4)
            .context("tensor extent overflows")?;
    }
    if payload.len() as u64 != expected_end {
        bail!(
            "payload holds {} bytes, tensor index requires {}",
            payload.len(),
            expected_end
        );
    }

    let space = build_space(&manifest.space)?;
    let region = Region::new(Arc::clone(&space), manifest.allowed.clone())?;
    let dims = IoDims {
        input: manifest.input_dim,
        classes: manifest.classes,
    };

    let mut weights = WeightStore::new();
    let mut opt = OptState::new();
    for entry in &manifest.tensors {
        let start = entry.offset as usize;
        let raw = &payload[start..start + entry.count as usize * 4];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor {
            shape: entry.shape.clone(),
            data,
        };
        if let Some(name) = entry.name.strip_prefix("w/") {
            weights.insert(name.to_string(), tensor);
        } else if let Some(name) = entry.name.strip_prefix("m/") {
            opt.insert(name.to_string(), tensor);
        } else {
            bail!(
                "tensor {} has neither the w/ nor the m/ namespace",
                entry.name
            );
        }
    }

    match (manifest.mode, &manifest.mixture) {
        (TrainMode::Mixture, None) => bail!("mixture-mode checkpoint is missing alpha"),
        (TrainMode::SinglePath, Some(_)) => {
            bail!("single-path checkpoint carries mixture parameters")
        }
        _ => {}
    }

    Ok(Supernet::from_parts(
        region,
        dims,
        manifest.master_seed,
        weights,
        opt,
        manifest.mixture,
        manifest.trained_epochs,
        manifest.val_loss,
    )?)
}

fn build_space(info: &SpaceInfo) -> Result<Arc<SearchSpace>> {
    let ops = info
        .ops
        .iter()
        .enumerate()
        .map(|(id, name)| {
            let kind = op_kind_by_name(name)
                .with_context(|| format!("unknown op {name:?} in checkpoint space"))?;
            Ok(OpDesc {
                id,
                name: name.clone(),
                kind,
                param_shape: kind.param_shape(info.hidden),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Arc::new(SearchSpace::new(
        info.nodes,
        info.hidden,
        OpVocab::new(ops)?,
    )?))
}

fn rng_labels(mode: TrainMode) -> Vec<String> {
    let mut labels = vec!["init/<tensor>".to_string(), "shuffle/e<epoch>".to_string()];
    match mode {
        TrainMode::SinglePath => {
            labels.push("path/e<epoch>".to_string());
            labels.push("valpaths".to_string());
        }
        TrainMode::Mixture => labels.push("alpha-shuffle/e<epoch>".to_string()),
    }
    labels
}

pub fn supernet_file_name(level: usize, index: usize) -> String {
    format!("supernet_L{level}_{index}.fsns")
}

pub fn save_tree(tree: &SupernetTree, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))?;
    let mut levels = Vec::new();
    for (l, level) in tree.levels().iter().enumerate() {
        let mut names = Vec::new();
        for (i, s) in level.iter().enumerate() {
            let name = supernet_file_name(l, i);
            save_supernet(s, &dir.join(&name))?;
            names.push(name);
        }
        levels.push(names);
    }
    let manifest = TreeManifest {
        seed: tree.seed(),
        split_history: tree.split_history().to_vec(),
        spent_epochs: tree.spent_epochs(),
        levels,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(TREE_MANIFEST), text)
        .with_context(|| format!("cannot write {}", dir.join(TREE_MANIFEST).display()))?;
    Ok(())
}

pub fn load_tree(dir: &Path) -> Result<SupernetTree> {
    let manifest_path = dir.join(TREE_MANIFEST);
    let text = std::fs::read_to_string(&manifest_path)
        .with_context(|| format!("cannot read {}", manifest_path.display()))?;
    let manifest: TreeManifest = serde_json::from_str(&text)
        .with_context(|| format!("corrupt tree manifest {}", manifest_path.display()))?;
    let mut levels = Vec::new();
    for names in &manifest.levels {
        let mut level = Vec::new();
        for name in names {
            level.push(load_supernet(&dir.join(name))?);
        }
        levels.push(level);
    }
    Ok(SupernetTree::from_parts(
        levels,
        manifest.split_history,
        manifest.spent_epochs,
        manifest.seed,
    )?)
}
