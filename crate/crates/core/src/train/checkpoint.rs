//! Binary checkpoints: `MMMCKPT1`, a little-endian u64 manifest length, a
//! JSON manifest, then raw little-endian f64 blocks in manifest order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use mmm_autodiff::{OptimizerState, ParamId, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocabulary;
use crate::error::{MmmError, Result};
use crate::man::ClassifierKind;
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"MMMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BlockKind {
    Param,
    AdamFirst,
    AdamSecond,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    kind: BlockKind,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    precision: String,
    /// CRC-32 of the block bytes.
    checksum: u32,
    model: ModelConfig,
    vocab: Vocabulary,
    choice_head: Option<ClassifierKind>,
    pair_head: bool,
    /// Whether the choice head precedes the pair head in the store.
    choice_first: bool,
    store_version: u64,
    optimizer_step: Option<u64>,
    blocks: Vec<BlockEntry>,
    #[serde(default)]
    state: Option<serde_json::Value>,
}

/// A restored model with optional optimizer moments and caller state.
#[derive(Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub state: Option<serde_json::Value>,
}

fn ckpt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(MmmError::Checkpoint(msg.into()))
}

fn first_slot(ids: &[ParamId]) -> usize {
    ids.iter().map(|id| id.0).min().unwrap_or(usize::MAX)
}

/// Writes atomically through a temporary file in the same directory.
pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    model: &Model<T>,
    optimizer: Option<&OptimizerState<T>>,
    state: Option<&serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    let mut blocks = Vec::new();
    let mut bytes = Vec::new();
    let mut push = |name: &str, kind, shape: &[usize], data: &mut dyn Iterator<Item = f64>| {
        blocks.push(BlockEntry {
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
        });
        for x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    };
    for (_, p) in model.store.iter() {
        push(
            &p.name,
            BlockKind::Param,
            p.value.shape(),
            &mut p.value.data().iter().map(|x| x.as_f64()),
        );
    }
    if let Some(opt) = optimizer {
        for (id, p) in model.store.iter() {
            let (Some(Some(m)), Some(Some(v))) = (opt.first.get(id.0), opt.second.get(id.0)) else {
                return ckpt_err(format!("optimizer state missing for {}", p.name));
            };
            push(
                &p.name,
                BlockKind::AdamFirst,
                p.value.shape(),
                &mut m.iter().map(|x| x.as_f64()),
            );
            push(
                &p.name,
                BlockKind::AdamSecond,
                p.value.shape(),
                &mut v.iter().map(|x| x.as_f64()),
            );
        }
    }
    let choice_first = match (&model.choice, &model.pair) {
        (Some(c), Some(p)) => first_slot(&c.ids()) < first_slot(&p.ids()),
        _ => true,
    };
    let manifest = Manifest {
        version: FORMAT_VERSION,
        precision: T::NAME.to_string(),
        checksum: crc32fast::hash(&bytes),
        model: model.config.clone(),
        vocab: model.vocab.clone(),
        choice_head: model.choice.as_ref().map(|c| c.kind()),
        pair_head: model.pair.is_some(),
        choice_first,
        store_version: model.store.version(),
        optimizer_step: optimizer.map(|o| o.step),
        blocks,
        state: state.cloned(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_manifest(raw: &[u8]) -> Result<(Manifest, &[u8])> {
    if raw.len() < 16 || &raw[..8] != MAGIC {
        return ckpt_err("not a checkpoint file (bad magic)");
    }
    let len = u64::from_le_bytes(raw[8..16].try_into().expect("8 bytes")) as usize;
    let Some(json) = raw.get(16..16usize.saturating_add(len)) else {
        return ckpt_err("truncated manifest");
    };
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| MmmError::Checkpoint(format!("unreadable manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return ckpt_err(format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            manifest.version
        ));
    }
    Ok((manifest, &raw[16 + len..]))
}

/// Precision name (`f32`/`f64`) recorded in a checkpoint.
pub fn checkpoint_precision(path: impl AsRef<Path>) -> Result<String> {
    let raw = fs::read(path)?;
    Ok(read_manifest(&raw)?.0.precision)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let raw = fs::read(path.as_ref())?;
    let (manifest, bytes) = read_manifest(&raw)?;
    if manifest.precision != T::NAME {
        return ckpt_err(format!(
            "checkpoint holds {} parameters, requested {}",
            manifest.precision,
            T::NAME
        ));
    }
    let expected: usize = manifest
        .blocks
        .iter()
        .map(|b| b.shape.iter().product::<usize>() * 8)
        .sum();
    if bytes.len() != expected {
        return ckpt_err(format!(
            "parameter data is {} bytes, manifest expects {expected}",
            bytes.len()
        ));
    }
    if crc32fast::hash(bytes) != manifest.checksum {
        return ckpt_err("checksum mismatch");
    }

    let mut tensors: HashMap<(BlockKind, &str), Tensor<T>> = HashMap::new();
    let mut offset = 0;
    for b in &manifest.blocks {
        let n: usize = b.shape.iter().product();
        let data = bytes[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        offset += n * 8;
        tensors.insert((b.kind, b.name.as_str()), Tensor::new(b.shape.clone(), data)?);
    }

    let mut model = Model::<T>::new(manifest.model.clone(), manifest.vocab.clone())?;
    let add_choice = |m: &mut Model<T>| {
        if let Some(kind) = manifest.choice_head {
            m.reset_choice_head(kind, 0);
        }
    };
    let add_pair = |m: &mut Model<T>| {
        if manifest.pair_head {
            m.reset_pair_head(0);
        }
    };
    if manifest.choice_first {
        add_choice(&mut model);
        add_pair(&mut model);
    } else {
        add_pair(&mut model);
        add_choice(&mut model);
    }
    model.config = manifest.model.clone();

    let n_params = manifest.blocks.iter().filter(|b| b.kind == BlockKind::Param).count();
    if n_params != model.store.len() {
        return ckpt_err(format!(
            "checkpoint has {n_params} parameters, model layout has {}",
            model.store.len()
        ));
    }
    let ids: Vec<(ParamId, String)> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in &ids {
        let Some(t) = tensors.remove(&(BlockKind::Param, name.as_str())) else {
            return ckpt_err(format!("parameter {name} missing"));
        };
        if t.shape() != model.store.get(*id).shape() {
            return ckpt_err(format!("parameter {name} has shape {:?}", t.shape()));
        }
        *model.store.get_mut(*id) = t;
    }
    model.store.set_version(manifest.store_version);

    let optimizer = match manifest.optimizer_step {
        None => None,
        Some(step) => {
            let mut opt = OptimizerState::new(&model.store);
            opt.step = step;
            for (id, name) in &ids {
                let (Some(m), Some(v)) = (
                    tensors.remove(&(BlockKind::AdamFirst, name.as_str())),
                    tensors.remove(&(BlockKind::AdamSecond, name.as_str())),
                ) else {
                    return ckpt_err(format!("optimizer moments for {name} missing"));
                };
                opt.first[id.0] = Some(m.into_data());
                opt.second[id.0] = Some(v.into_data());
            }
            Some(opt)
        }
    };
    Ok(Checkpoint {
        model,
        optimizer,
        state: manifest.state,
    })
}
