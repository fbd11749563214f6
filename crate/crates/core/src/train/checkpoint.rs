//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `PEFTLAB1`, a little-endian u64 header length, a JSON
//! header (format version, model/train configs, init seed, quantization spec,
//! adapter metadata, base-weight hash, tensor index), then raw little-endian
//! tensor blobs packed back-to-back in index order. Offsets are relative to
//! the body start, ascending and contiguous, and every declared length is
//! checked against the tensor's dtype and shape on load.
//!
//! An `adapters_only` checkpoint stores just the adapter tensors plus a
//! SHA-256 hash of the base weights for pairing; its base is either supplied
//! by the caller or rebuilt deterministically from the recorded init seed and
//! quantization spec, and is hash-verified in both cases.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::TrainConfig;
use crate::lora::LoraAdapter;
use crate::model::{
    layer_weight_name, ModelConfig, ModelError, ModelHandle, WeightEntry, WeightStorage,
    LAYER_COMPONENTS,
};
use crate::quant::{
    build_nf4_codebook, AbsmaxStore, QuantError, QuantSpec, QuantizedTensor,
};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PEFTLAB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a PEFTLAB1 checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("base weight hash mismatch: checkpoint does not pair with this base")]
    HashMismatch,
    #[error("corrupt tensor index: {0}")]
    CorruptIndex(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Element format of one stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    F32,
    F16,
    Q4,
}

/// Quantization metadata for a `Q4` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct TensorQuantMeta {
    block_size: usize,
    double_quantized: bool,
    /// Blocks per second-level group; meaningful only when double-quantized.
    dq_group_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    quant: Option<TensorQuantMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterMeta {
    name: String,
    rank: usize,
    alpha: f32,
    dropout_p: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    init_seed: u64,
    quant: Option<QuantSpec>,
    adapters: Vec<AdapterMeta>,
    adapters_only: bool,
    /// Hex SHA-256 over `(name bytes ‖ blob bytes)` of every base weight in
    /// name order, present in both full and adapters-only checkpoints.
    base_hash: String,
    tensors: Vec<TensorMeta>,
}

/// A loaded checkpoint: the reconstructed model plus the training
/// configuration it was saved with, if any.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: ModelHandle,
    pub train: Option<TrainConfig>,
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Encodes one weight storage as `(kind, shape, blob, quant meta)`.
fn encode_storage(storage: &WeightStorage) -> (Kind, Vec<usize>, Vec<u8>, Option<TensorQuantMeta>) {
    match storage {
        WeightStorage::Dense(t) => {
            let kind = match t.dtype() {
                DType::F32 => Kind::F32,
                DType::F16 => Kind::F16,
            };
            (kind, t.shape().to_vec(), t.to_le_bytes(), None)
        }
        WeightStorage::Quantized(q) => {
            let mut blob = q.codes.clone();
            let meta = match &q.absmax {
                AbsmaxStore::Plain(absmax) => {
                    push_f32s(&mut blob, absmax);
                    TensorQuantMeta {
                        block_size: q.block_size,
                        double_quantized: false,
                        dq_group_size: 0,
                    }
                }
                AbsmaxStore::DoubleQuantized {
                    codes,
                    scales,
                    offsets,
                    group_size,
                } => {
                    blob.extend(codes.iter().map(|&c| c as u8));
                    push_f32s(&mut blob, scales);
                    push_f32s(&mut blob, offsets);
                    TensorQuantMeta {
                        block_size: q.block_size,
                        double_quantized: true,
                        dq_group_size: *group_size,
                    }
                }
            };
            (Kind::Q4, q.shape.clone(), blob, Some(meta))
        }
    }
}

/// The byte length a tensor of this kind/shape/meta must occupy.
fn expected_length(kind: Kind, shape: &[usize], quant: Option<&TensorQuantMeta>) -> Result<u64, CheckpointError> {
    let n: usize = shape.iter().product();
    match kind {
        Kind::F32 => Ok(4 * n as u64),
        Kind::F16 => Ok(2 * n as u64),
        Kind::Q4 => {
            let meta = quant.ok_or_else(|| {
                CheckpointError::CorruptIndex("Q4 tensor without quant metadata".into())
            })?;
            if meta.block_size == 0 {
                return Err(CheckpointError::CorruptIndex("zero block_size".into()));
            }
            let n_blocks = n.div_ceil(meta.block_size);
            let packed = n.div_ceil(2);
            let absmax = if meta.double_quantized {
                if meta.dq_group_size == 0 {
                    return Err(CheckpointError::CorruptIndex("zero dq_group_size".into()));
                }
                let n_groups = n_blocks.div_ceil(meta.dq_group_size);
                n_blocks + 8 * n_groups
            } else {
                4 * n_blocks
            };
            Ok((packed + absmax) as u64)
        }
    }
}

fn decode_storage(meta: &TensorMeta, blob: &[u8]) -> Result<WeightStorage, CheckpointError> {
    let n: usize = meta.shape.iter().product();
    match meta.kind {
        Kind::F32 | Kind::F16 => {
            let dtype = if meta.kind == Kind::F32 { DType::F32 } else { DType::F16 };
            let t = Tensor::from_le_bytes(&meta.shape, dtype, blob).ok_or_else(|| {
                CheckpointError::CorruptIndex(format!("bad blob length for tensor '{}'", meta.name))
            })?;
            Ok(WeightStorage::Dense(t))
        }
        Kind::Q4 => {
            let qmeta = meta.quant.as_ref().ok_or_else(|| {
                CheckpointError::CorruptIndex("Q4 tensor without quant metadata".into())
            })?;
            let packed = n.div_ceil(2);
            let n_blocks = n.div_ceil(qmeta.block_size);
            let codes = blob[..packed].to_vec();
            let rest = &blob[packed..];
            let absmax = if qmeta.double_quantized {
                let dq_codes: Vec<i8> = rest[..n_blocks].iter().map(|&b| b as i8).collect();
                let n_groups = n_blocks.div_ceil(qmeta.dq_group_size);
                let scales = read_f32s(&rest[n_blocks..n_blocks + 4 * n_groups]);
                let offsets = read_f32s(&rest[n_blocks + 4 * n_groups..]);
                AbsmaxStore::DoubleQuantized {
                    codes: dq_codes,
                    scales,
                    offsets,
                    group_size: qmeta.dq_group_size,
                }
            } else {
                AbsmaxStore::Plain(read_f32s(rest))
            };
            Ok(WeightStorage::Quantized(QuantizedTensor {
                shape: meta.shape.clone(),
                codes,
                block_size: qmeta.block_size,
                absmax,
                codebook: build_nf4_codebook(),
                double_quantized: qmeta.double_quantized,
            }))
        }
    }
}

/// SHA-256 over `(name ‖ blob)` of every base weight in name order.
fn hash_base(blobs: &[(String, Vec<u8>)]) -> String {
    let mut hasher = Sha256::new();
    for (name, blob) in blobs {
        hasher.update(name.as_bytes());
        hasher.update(blob);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Base-weight blobs in name (BTreeMap) order.
fn base_blobs(model: &ModelHandle) -> Vec<(String, Vec<u8>)> {
    model
        .weight_names()
        .into_iter()
        .map(|name| {
            let (_, _, blob, _) = encode_storage(&model.weight(&name).storage);
            (name, blob)
        })
        .collect()
}

fn expected_weight_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for layer in 0..config.n_layers {
        for component in LAYER_COMPONENTS {
            names.push(layer_weight_name(layer, component));
        }
    }
    if !config.tie_embeddings {
        names.push("lm_head".to_string());
    }
    names.sort();
    names
}

/// Writes the model (and optionally its training config) to `path`.
///
/// With `adapters_only` set, only adapter tensors are stored alongside the
/// base hash; otherwise every base weight blob is included too. Adapter
/// tensors follow the base tensors in the index, `lora_a` before `lora_b`,
/// in adapter name order.
pub fn save_checkpoint(
    model: &ModelHandle,
    train: Option<&TrainConfig>,
    path: &Path,
    adapters_only: bool,
) -> Result<(), CheckpointError> {
    let base = base_blobs(model);
    let base_hash = hash_base(&base);

    let mut tensors: Vec<TensorMeta> = Vec::new();
    let mut body: Vec<u8> = Vec::new();
    let push_blob = |name: String, kind: Kind, shape: Vec<usize>, blob: Vec<u8>,
                         quant: Option<TensorQuantMeta>,
                         body: &mut Vec<u8>,
                         tensors: &mut Vec<TensorMeta>| {
        tensors.push(TensorMeta {
            name,
            kind,
            shape,
            offset: body.len() as u64,
            length: blob.len() as u64,
            quant,
        });
        body.extend_from_slice(&blob);
    };

    if !adapters_only {
        for name in model.weight_names() {
            let (kind, shape, blob, quant) = encode_storage(&model.weight(&name).storage);
            push_blob(name, kind, shape, blob, quant, &mut body, &mut tensors);
        }
    }

    let mut adapters = Vec::new();
    for name in model.adapter_names() {
        let adapter = model.weight(&name).adapter.as_ref().expect("adapter present");
        adapters.push(AdapterMeta {
            name: name.clone(),
            rank: adapter.rank,
            alpha: adapter.alpha,
            dropout_p: adapter.dropout_p,
        });
        for (suffix, t) in [("lora_a", &adapter.a), ("lora_b", &adapter.b)] {
            push_blob(
                format!("{name}.{suffix}"),
                Kind::F32,
                t.shape().to_vec(),
                t.to_le_bytes(),
                None,
                &mut body,
                &mut tensors,
            );
        }
    }

    let header = Header {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        train: train.cloned(),
        init_seed: model.init_seed,
        quant: model.quant,
        adapters,
        adapters_only,
        base_hash,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::CorruptIndex(e.to_string()))?;

    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    file.write_all(&CHECKPOINT_MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&body)?;
    file.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a model.
///
/// For a full checkpoint `base` is ignored. For an adapters-only checkpoint
/// the base comes from `base` when given, otherwise it is rebuilt from the
/// recorded init seed and quantization spec; either way the base must match
/// the stored hash or loading fails with [`CheckpointError::HashMismatch`].
pub fn load_checkpoint(
    path: &Path,
    base: Option<&ModelHandle>,
) -> Result<LoadedCheckpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(CheckpointError::BadMagic);
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| CheckpointError::CorruptIndex("header length out of bounds".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| CheckpointError::CorruptIndex(format!("bad header JSON: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    header.model.validate()?;

    // Index sanity: ascending contiguous offsets, lengths matching shape/kind,
    // total matching the body size.
    let body = &bytes[body_start..];
    let mut cursor = 0u64;
    for meta in &header.tensors {
        if meta.offset != cursor {
            return Err(CheckpointError::CorruptIndex(format!(
                "tensor '{}' at offset {} (expected {cursor})",
                meta.name, meta.offset
            )));
        }
        let want = expected_length(meta.kind, &meta.shape, meta.quant.as_ref())?;
        if meta.length != want {
            return Err(CheckpointError::CorruptIndex(format!(
                "tensor '{}' length {} does not match its shape (expected {want})",
                meta.name, meta.length
            )));
        }
        cursor = cursor
            .checked_add(meta.length)
            .ok_or_else(|| CheckpointError::CorruptIndex("offset overflow".into()))?;
    }
    if cursor != body.len() as u64 {
        return Err(CheckpointError::CorruptIndex(format!(
            "body is {} bytes but the index declares {cursor}",
            body.len()
        )));
    }

    let blob_of = |meta: &TensorMeta| -> &[u8] {
        &body[meta.offset as usize..(meta.offset + meta.length) as usize]
    };
    let adapter_tensor_names: std::collections::BTreeSet<String> = header
        .adapters
        .iter()
        .flat_map(|a| [format!("{}.lora_a", a.name), format!("{}.lora_b", a.name)])
        .collect();

    let mut model = if header.adapters_only {
        let mut model = match base {
            Some(existing) => {
                let mut m = existing.clone();
                // Any adapters already attached are replaced by the file's.
                for name in m.adapter_names() {
                    m.weight_mut(&name).adapter = None;
                }
                m
            }
            None => {
                let mut m = crate::model::init_weights(&header.model, header.init_seed)?;
                if let Some(spec) = header.quant {
                    m.quantize_base(spec)?;
                }
                m
            }
        };
        model.freeze_base();
        if hash_base(&base_blobs(&model)) != header.base_hash {
            return Err(CheckpointError::HashMismatch);
        }
        model
    } else {
        let mut weights = BTreeMap::new();
        let mut hashed: Vec<(String, Vec<u8>)> = Vec::new();
        for meta in &header.tensors {
            if adapter_tensor_names.contains(&meta.name) {
                continue;
            }
            let storage = decode_storage(meta, blob_of(meta))?;
            hashed.push((meta.name.clone(), blob_of(meta).to_vec()));
            weights.insert(
                meta.name.clone(),
                WeightEntry {
                    storage,
                    trainable: false,
                    adapter: None,
                },
            );
        }
        for name in expected_weight_names(&header.model) {
            if !weights.contains_key(&name) {
                return Err(CheckpointError::CorruptIndex(format!(
                    "missing base tensor '{name}'"
                )));
            }
        }
        if hash_base(&hashed) != header.base_hash {
            return Err(CheckpointError::HashMismatch);
        }
        let mut m = ModelHandle::from_weights(header.model.clone(), header.init_seed, weights);
        m.quant = header.quant;
        m
    };

    // Attach adapters.
    let tensor_index: BTreeMap<&str, &TensorMeta> = header
        .tensors
        .iter()
        .map(|meta| (meta.name.as_str(), meta))
        .collect();
    for ameta in &header.adapters {
        let part = |suffix: &str| -> Result<Tensor, CheckpointError> {
            let full = format!("{}.{suffix}", ameta.name);
            let meta = tensor_index.get(full.as_str()).ok_or_else(|| {
                CheckpointError::CorruptIndex(format!("missing adapter tensor '{full}'"))
            })?;
            match decode_storage(meta, blob_of(meta))? {
                WeightStorage::Dense(t) => Ok(Tensor::param(t.shape(), t.to_f32_vec())),
                WeightStorage::Quantized(_) => Err(CheckpointError::CorruptIndex(format!(
                    "adapter tensor '{full}' must be dense"
                ))),
            }
        };
        let a = part("lora_a")?;
        let b = part("lora_b")?;
        if a.shape()[0] != ameta.rank || b.shape()[1] != ameta.rank {
            return Err(CheckpointError::CorruptIndex(format!(
                "adapter '{}' tensors disagree with rank {}",
                ameta.name, ameta.rank
            )));
        }
        if model.try_weight(&ameta.name).is_none() {
            return Err(CheckpointError::CorruptIndex(format!(
                "adapter targets unknown weight '{}'",
                ameta.name
            )));
        }
        let entry = model.weight_mut(&ameta.name);
        entry.trainable = false;
        entry.adapter = Some(LoraAdapter::from_parts(
            &ameta.name,
            a,
            b,
            ameta.alpha,
            ameta.dropout_p,
        ));
    }

    Ok(LoadedCheckpoint {
        model,
        train: header.train,
    })
}
