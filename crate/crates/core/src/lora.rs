//! Low-rank adapters over frozen base weights.
//!
//! Each adapted weight keeps its (possibly quantized) base matrix frozen and
//! adds a trainable rank-`r` bypass: `y = base(x) + (α/r)·(dropout(x)·Aᵀ)·Bᵀ`.
//! `B` starts at zero, so injection never changes model output; training
//! moves only `A` and `B`.

use crate::model::{ModelHandle, WeightStorage};
use crate::quant::QuantizedTensor;
use crate::tensor::{ops, Compute, DType, Graph, Tensor, TensorError};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Default adapter rank at toy scale.
pub const DEFAULT_RANK: usize = 2;
/// Default scaling numerator α.
pub const DEFAULT_ALPHA: f32 = 16.0;
/// Default adapter-branch dropout probability.
pub const DEFAULT_DROPOUT: f32 = 0.0;
/// Default target patterns: attention query and value projections.
pub const DEFAULT_TARGETS: [&str; 2] = ["attn_q", "attn_v"];

#[derive(Debug, Error)]
pub enum LoraError {
    /// A target pattern matched no base weight.
    #[error("target pattern {0:?} matched no base weight")]
    NoTargetMatched(String),
    /// The requested rank exceeds what a matched weight can host.
    #[error("rank {rank} too large for target {target:?} (limit {limit})")]
    RankTooLarge {
        target: String,
        rank: usize,
        limit: usize,
    },
}

/// A trainable low-rank bypass attached to one frozen base weight.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// Name of the base weight this adapter rides on.
    pub name: String,
    /// Down-projection, `[r, in_features]`, uniform-initialized.
    pub a: Tensor,
    /// Up-projection, `[out_features, r]`, zero-initialized.
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
    pub dropout_p: f32,
}

impl LoraAdapter {
    /// Creates an adapter for a `[out_features, in_features]` weight. `A` is
    /// drawn from `U(−1/√in, 1/√in)` using `rng` (row-major order); `B` is
    /// zero so the adapter starts as a no-op.
    pub fn new(
        name: &str,
        out_features: usize,
        in_features: usize,
        rank: usize,
        alpha: f32,
        dropout_p: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, LoraError> {
        let limit = in_features.min(out_features);
        if rank == 0 || rank > limit {
            return Err(LoraError::RankTooLarge {
                target: name.to_string(),
                rank,
                limit,
            });
        }
        assert!(alpha > 0.0, "alpha must be positive");
        assert!((0.0..1.0).contains(&dropout_p), "dropout_p must be in [0,1)");
        let bound = 1.0 / (in_features as f32).sqrt();
        let dist = Uniform::new(-bound, bound);
        let a: Vec<f32> = (0..rank * in_features).map(|_| dist.sample(rng)).collect();
        Ok(Self {
            name: name.to_string(),
            a: Tensor::param(&[rank, in_features], a),
            b: Tensor::param(&[out_features, rank], vec![0.0; out_features * rank]),
            rank,
            alpha,
            dropout_p,
        })
    }

    /// Rebuilds an adapter from stored tensors (checkpoint load path).
    pub fn from_parts(name: &str, a: Tensor, b: Tensor, alpha: f32, dropout_p: f32) -> Self {
        let rank = a.shape()[0];
        assert_eq!(b.shape()[1], rank, "A and B disagree on rank");
        Self {
            name: name.to_string(),
            a,
            b,
            rank,
            alpha,
            dropout_p,
        }
    }

    /// Trainable parameters in this adapter: `r · (in + out)`.
    pub fn trainable_parameters(&self) -> usize {
        self.a.element_count() + self.b.element_count()
    }

    /// `α / r`.
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

/// A borrowed base weight: dense or quantized.
#[derive(Clone, Copy)]
pub enum BaseRef<'a> {
    Dense(&'a Tensor),
    Quantized(&'a QuantizedTensor),
}

impl<'a> From<&'a WeightStorage> for BaseRef<'a> {
    fn from(w: &'a WeightStorage) -> Self {
        match w {
            WeightStorage::Dense(t) => BaseRef::Dense(t),
            WeightStorage::Quantized(q) => BaseRef::Quantized(q),
        }
    }
}

/// `y = base(x) + (α/r)·(dropout(x)·Aᵀ)·Bᵀ`.
///
/// The base path uses the quantized 16-bit kernel when the base is
/// quantized. Dropout applies to the adapter input branch only, and only in
/// training mode (`rng` must then be provided if `dropout_p > 0`); it uses
/// inverted scaling so evaluation needs no rescale.
pub fn adapter_forward(
    g: &Graph,
    x: &Tensor,
    base: BaseRef<'_>,
    adapter: &LoraAdapter,
    training: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor, TensorError> {
    let base_y = match base {
        BaseRef::Dense(w) => {
            let compute = match w.dtype() {
                DType::F16 => Compute::F16,
                DType::F32 => Compute::F32,
            };
            ops::linear(g, x, w, compute)?
        }
        BaseRef::Quantized(q) => crate::quant::qmatmul(g, x, q)?,
    };
    let branch_in = if training && adapter.dropout_p > 0.0 {
        let rng = rng
            .as_deref_mut()
            .expect("dropout in training mode requires an RNG");
        let keep = 1.0 - adapter.dropout_p;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..x.element_count())
            .map(|_| if rng.gen::<f32>() < keep { scale } else { 0.0 })
            .collect();
        ops::mul(g, x, &Tensor::from_vec(x.shape(), mask))?
    } else {
        x.clone()
    };
    let down = ops::linear(g, &branch_in, &adapter.a, Compute::F32)?; // [T, r]
    let up = ops::linear(g, &down, &adapter.b, Compute::F32)?; // [T, out]
    let scaled = ops::mul_scalar(g, &up, adapter.scaling());
    ops::add(g, &base_y, &scaled)
}

/// Folds an adapter into a dense weight: `W' = W + (α/r)·B·A`.
pub fn merge(base_w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor, TensorError> {
    let g = Graph::inference();
    let delta = ops::matmul(&g, &adapter.b, &adapter.a, Compute::F32)?;
    let scaled = ops::mul_scalar(&g, &delta, adapter.scaling());
    ops::add(&g, base_w, &scaled)
}

/// Exact trainable-parameter accounting for a model.
#[derive(Debug, Clone, PartialEq)]
pub struct PeftReport {
    pub total_parameters: usize,
    pub trainable_parameters: usize,
    /// Exact ratio `trainable / total` (f64 of the exact rational).
    pub trainable_fraction: f64,
    /// Trainable count per adapted target weight.
    pub per_target: BTreeMap<String, usize>,
}

impl PeftReport {
    /// The trainable fraction as a percentage with two-decimal display
    /// rounding (3,066,368 / 700,000,000 → `"0.44%"`).
    pub fn fraction_display(&self) -> String {
        format!("{:.2}%", self.trainable_fraction * 100.0)
    }
}

/// Formats an arbitrary trainable/total pair the same way [`PeftReport`]
/// does, using exact integer arithmetic before the final division.
pub fn fraction_percent(trainable: u64, total: u64) -> String {
    format!("{:.2}%", (trainable as f64 / total as f64) * 100.0)
}

/// Attaches fresh adapters to every base weight matched by `targets`
/// (substring patterns), freezing the matched base weights. Matched weights
/// are processed in model (lexicographic) order so adapter initialization is
/// deterministic in `seed`. Model output is unchanged by injection because
/// every `B` starts at zero.
pub fn inject(
    mut model: ModelHandle,
    targets: &[String],
    rank: usize,
    alpha: f32,
    dropout_p: f32,
    seed: u64,
) -> Result<ModelHandle, LoraError> {
    let names = model.weight_names();
    let mut matched: Vec<String> = Vec::new();
    for pattern in targets {
        let mut hit = false;
        for name in &names {
            if name.contains(pattern.as_str()) && model.weight(name).storage.is_matrix() {
                hit = true;
                if !matched.contains(name) {
                    matched.push(name.clone());
                }
            }
        }
        if !hit {
            return Err(LoraError::NoTargetMatched(pattern.clone()));
        }
    }
    matched.sort();

    let mut rng = crate::train::seeded_rng(seed, crate::train::RngStream::AdapterInit);
    for name in matched {
        let entry = model.weight(&name);
        let (out_f, in_f) = entry.storage.matrix_dims().expect("matched weights are matrices");
        let adapter = LoraAdapter::new(&name, out_f, in_f, rank, alpha, dropout_p, &mut rng)?;
        let entry = model.weight_mut(&name);
        entry.trainable = false;
        entry.adapter = Some(adapter);
    }
    Ok(model)
}

/// Counts every parameter exactly once: base weights at their logical
/// element counts (quantized or not), adapters as trainable.
pub fn report(model: &ModelHandle) -> PeftReport {
    let mut total = 0usize;
    let mut trainable = 0usize;
    let mut per_target = BTreeMap::new();
    for name in model.weight_names() {
        let entry = model.weight(&name);
        let n = entry.storage.element_count();
        total += n;
        if entry.trainable {
            trainable += n;
        }
        if let Some(adapter) = &entry.adapter {
            let t = adapter.trainable_parameters();
            total += t;
            trainable += t;
            per_target.insert(name.clone(), t);
        }
    }
    PeftReport {
        total_parameters: total,
        trainable_parameters: trainable,
        trainable_fraction: trainable as f64 / total as f64,
        per_target,
    }
}
