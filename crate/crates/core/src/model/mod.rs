//! A toy Falcon-style decoder-only transformer.
//!
//! Rotary position encoding, multi-query attention (grouped KV heads),
//! parallel attention+MLP residual fed by one shared pre-norm per block, and
//! a tied embedding head. Weights live in a named map so they can be
//! individually frozen, quantized, or paired with low-rank adapters.

mod forward;
mod init;
mod kv;

pub use forward::{forward, lm_loss, lm_loss_parts};
pub use init::init_weights;
pub use kv::KVCache;

use crate::lora::LoraAdapter;
use crate::quant::{QuantError, QuantSpec, QuantizedTensor};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters. `head_dim` is derived:
/// `d_model / n_query_heads`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 260,
            d_model: 128,
            n_layers: 4,
            n_query_heads: 4,
            n_kv_heads: 1,
            d_ff: 512,
            max_seq_len: 512,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_query_heads
    }

    /// Width of the shared key/value projections.
    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return fail("all dimensions must be positive".into());
        }
        if self.n_query_heads == 0 || self.d_model % self.n_query_heads != 0 {
            return fail(format!(
                "d_model {} must be divisible by n_query_heads {}",
                self.d_model, self.n_query_heads
            ));
        }
        if self.n_kv_heads == 0 || self.n_query_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_query_heads {} must be divisible by n_kv_heads {}",
                self.n_query_heads, self.n_kv_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail("head_dim must be even for rotary encoding".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        Ok(())
    }
}

/// A base weight: dense tensor or 4-bit quantized.
#[derive(Debug, Clone)]
pub enum WeightStorage {
    Dense(Tensor),
    Quantized(QuantizedTensor),
}

impl WeightStorage {
    pub fn shape(&self) -> &[usize] {
        match self {
            WeightStorage::Dense(t) => t.shape(),
            WeightStorage::Quantized(q) => &q.shape,
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape().len() == 2
    }

    /// `(out_features, in_features)` for matrix weights.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match *self.shape() {
            [out, inp] => Some((out, inp)),
            _ => None,
        }
    }

    pub fn as_dense(&self) -> Option<&Tensor> {
        match self {
            WeightStorage::Dense(t) => Some(t),
            WeightStorage::Quantized(_) => None,
        }
    }
}

/// One named weight with its training status and optional adapter.
#[derive(Debug, Clone)]
pub struct WeightEntry {
    pub storage: WeightStorage,
    pub trainable: bool,
    pub adapter: Option<LoraAdapter>,
}

/// A model instance: config plus the named weight map.
///
/// Names follow the checkpoint contract: `embedding`, then
/// `layer.{i}.{attn_q|attn_k|attn_v|attn_o|mlp_up|mlp_down|norm_gain|norm_bias}`,
/// plus `lm_head` when embeddings are untied.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub config: ModelConfig,
    /// Seed `init_weights` was called with; recorded in checkpoints so
    /// adapters-only files can rebuild their base.
    pub init_seed: u64,
    /// Quantization applied to the base, if any.
    pub quant: Option<QuantSpec>,
    weights: BTreeMap<String, WeightEntry>,
}

/// Per-layer weight component names, in checkpoint order.
pub const LAYER_COMPONENTS: [&str; 8] = [
    "attn_q", "attn_k", "attn_v", "attn_o", "mlp_up", "mlp_down", "norm_gain", "norm_bias",
];

pub fn layer_weight_name(layer: usize, component: &str) -> String {
    format!("layer.{layer}.{component}")
}

impl ModelHandle {
    pub(crate) fn from_weights(
        config: ModelConfig,
        init_seed: u64,
        weights: BTreeMap<String, WeightEntry>,
    ) -> Self {
        Self {
            config,
            init_seed,
            quant: None,
            weights,
        }
    }

    /// All weight names in lexicographic (map) order.
    pub fn weight_names(&self) -> Vec<String> {
        self.weights.keys().cloned().collect()
    }

    pub fn weight(&self, name: &str) -> &WeightEntry {
        self.weights
            .get(name)
            .unwrap_or_else(|| panic!("unknown weight name {name:?}"))
    }

    pub fn weight_mut(&mut self, name: &str) -> &mut WeightEntry {
        self.weights
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown weight name {name:?}"))
    }

    pub fn try_weight(&self, name: &str) -> Option<&WeightEntry> {
        self.weights.get(name)
    }

    /// Marks every base weight frozen and strips gradient tracking from the
    /// dense tensors. Adapters (if any) stay trainable.
    pub fn freeze_base(&mut self) {
        for entry in self.weights.values_mut() {
            entry.trainable = false;
            if let WeightStorage::Dense(t) = &entry.storage {
                if t.requires_grad() {
                    entry.storage = WeightStorage::Dense(t.detached());
                }
            }
        }
    }

    /// Quantizes every per-layer matrix weight to 4-bit NF4 storage and
    /// freezes the base. The embedding (and untied head) stays dense f32:
    /// it doubles as the output head, where 4-bit noise would dominate the
    /// logits at this scale.
    pub fn quantize_base(&mut self, spec: QuantSpec) -> Result<(), QuantError> {
        for (name, entry) in self.weights.iter_mut() {
            let is_layer_matrix = name.starts_with("layer.") && entry.storage.is_matrix();
            if is_layer_matrix {
                let dense = entry
                    .storage
                    .as_dense()
                    .expect("quantize_base may only run once");
                let q = crate::quant::quantize(
                    dense,
                    spec.block_size,
                    spec.double_quant,
                    spec.dq_group_size,
                )?;
                entry.storage = WeightStorage::Quantized(q);
            }
        }
        self.freeze_base();
        self.quant = Some(spec);
        Ok(())
    }

    /// Names of weights carrying adapters, in map order.
    pub fn adapter_names(&self) -> Vec<String> {
        self.weights
            .iter()
            .filter(|(_, e)| e.adapter.is_some())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn has_adapters(&self) -> bool {
        self.weights.values().any(|e| e.adapter.is_some())
    }

    /// Total logical parameter count of the base weights.
    pub fn base_parameter_count(&self) -> usize {
        self.weights.values().map(|e| e.storage.element_count()).sum()
    }
}
