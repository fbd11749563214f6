//! Incremental decoding with a key/value cache.
//!
//! [`KVCache::push`] advances the model by one token using exactly the same
//! row-level kernels (`dot_f32`/`dot_f16`, `softmax_row`, `layer_norm_row`,
//! `rotary_row`, `gelu_scalar`) as the full-sequence forward pass, so the
//! logits it produces are bitwise identical to running [`super::forward`]
//! over the whole prefix. That equality is what makes cached generation
//! trustworthy; it is asserted in tests rather than assumed.

use super::{layer_weight_name, ModelError, ModelHandle, WeightEntry, WeightStorage};
use crate::tensor::kernels as k;
use crate::tensor::DType;
use half::f16;

enum PreparedKernel {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

struct PreparedAdapter {
    a: Vec<f32>, // [rank, in]
    b: Vec<f32>, // [out, rank]
    rank: usize,
    scaling: f32,
}

/// One weight matrix readied for row-at-a-time application.
struct PreparedWeight {
    kernel: PreparedKernel,
    out_features: usize,
    in_features: usize,
    adapter: Option<PreparedAdapter>,
}

impl PreparedWeight {
    fn from_entry(entry: &WeightEntry) -> Self {
        let (out_features, in_features) = entry
            .storage
            .matrix_dims()
            .expect("prepared weights are matrices");
        let kernel = match &entry.storage {
            WeightStorage::Dense(t) => match t.dtype() {
                DType::F32 => PreparedKernel::F32(t.data_f32().to_vec()),
                DType::F16 => PreparedKernel::F16(t.data_f16().to_vec()),
            },
            WeightStorage::Quantized(q) => {
                // The same f16 materialization the qmatmul path uses.
                let w16 = crate::quant::dequantize(q, DType::F16);
                PreparedKernel::F16(w16.data_f16().to_vec())
            }
        };
        let adapter = entry.adapter.as_ref().map(|ad| PreparedAdapter {
            a: ad.a.data_f32().to_vec(),
            b: ad.b.data_f32().to_vec(),
            rank: ad.rank,
            scaling: ad.scaling(),
        });
        Self {
            kernel,
            out_features,
            in_features,
            adapter,
        }
    }

    /// `y = W·x (+ adapter)` for a single activation row.
    fn apply(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.in_features);
        let mut y = vec![0.0f32; self.out_features];
        match &self.kernel {
            PreparedKernel::F32(w) => {
                for (o, slot) in y.iter_mut().enumerate() {
                    *slot = k::dot_f32(x, &w[o * self.in_features..(o + 1) * self.in_features]);
                }
            }
            PreparedKernel::F16(w) => {
                let x16: Vec<f16> = x.iter().map(|&v| f16::from_f32(v)).collect();
                for (o, slot) in y.iter_mut().enumerate() {
                    *slot = k::dot_f16(&x16, &w[o * self.in_features..(o + 1) * self.in_features]);
                }
            }
        }
        if let Some(ad) = &self.adapter {
            let mut h = vec![0.0f32; ad.rank];
            for (r, slot) in h.iter_mut().enumerate() {
                *slot = k::dot_f32(x, &ad.a[r * self.in_features..(r + 1) * self.in_features]);
            }
            for (o, slot) in y.iter_mut().enumerate() {
                let up = k::dot_f32(&h, &ad.b[o * ad.rank..(o + 1) * ad.rank]);
                *slot += up * ad.scaling;
            }
        }
        y
    }
}

struct PreparedLayer {
    attn_q: PreparedWeight,
    attn_k: PreparedWeight,
    attn_v: PreparedWeight,
    attn_o: PreparedWeight,
    mlp_up: PreparedWeight,
    mlp_down: PreparedWeight,
    norm_gain: Vec<f32>,
    norm_bias: Vec<f32>,
}

/// Incremental decoding state over a fixed model snapshot.
pub struct KVCache {
    cfg: super::ModelConfig,
    embedding: Vec<f32>,
    /// Untied head weight; `None` means the embedding is reused.
    lm_head: Option<Vec<f32>>,
    layers: Vec<PreparedLayer>,
    inv_freq: Vec<f32>,
    /// Per layer: rotated key rows, `pos × kv_width`.
    k_cache: Vec<Vec<f32>>,
    /// Per layer: value rows, `pos × kv_width`.
    v_cache: Vec<Vec<f32>>,
    pos: usize,
}

impl KVCache {
    /// Snapshots the model's weights (dequantizing 4-bit storage to the same
    /// f16 the fused kernel uses) and starts an empty cache.
    pub fn new(model: &ModelHandle) -> Result<Self, ModelError> {
        let cfg = model.config.clone();
        cfg.validate()?;
        let embedding = model
            .weight("embedding")
            .storage
            .as_dense()
            .expect("embedding stays dense")
            .data_f32()
            .to_vec();
        let lm_head = if cfg.tie_embeddings {
            None
        } else {
            Some(
                model
                    .weight("lm_head")
                    .storage
                    .as_dense()
                    .expect("untied head stays dense")
                    .data_f32()
                    .to_vec(),
            )
        };
        let layers = (0..cfg.n_layers)
            .map(|i| PreparedLayer {
                attn_q: PreparedWeight::from_entry(model.weight(&layer_weight_name(i, "attn_q"))),
                attn_k: PreparedWeight::from_entry(model.weight(&layer_weight_name(i, "attn_k"))),
                attn_v: PreparedWeight::from_entry(model.weight(&layer_weight_name(i, "attn_v"))),
                attn_o: PreparedWeight::from_entry(model.weight(&layer_weight_name(i, "attn_o"))),
                mlp_up: PreparedWeight::from_entry(model.weight(&layer_weight_name(i, "mlp_up"))),
                mlp_down: PreparedWeight::from_entry(model.weight(&layer_weight_name(i, "mlp_down"))),
                norm_gain: model
                    .weight(&layer_weight_name(i, "norm_gain"))
                    .storage
                    .as_dense()
                    .expect("norms stay dense")
                    .data_f32()
                    .to_vec(),
                norm_bias: model
                    .weight(&layer_weight_name(i, "norm_bias"))
                    .storage
                    .as_dense()
                    .expect("norms stay dense")
                    .data_f32()
                    .to_vec(),
            })
            .collect();
        Ok(Self {
            inv_freq: k::rotary_inv_freq(cfg.head_dim(), 10_000.0),
            embedding,
            lm_head,
            layers,
            k_cache: vec![Vec::new(); cfg.n_layers],
            v_cache: vec![Vec::new(); cfg.n_layers],
            pos: 0,
            cfg,
        })
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    /// Feeds one token and returns the logits row for the next position.
    pub fn push(&mut self, token: u32) -> Result<Vec<f32>, ModelError> {
        let cfg = &self.cfg;
        if self.pos >= cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: self.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        if (token as usize) >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        let d = cfg.d_model;
        let head_dim = cfg.head_dim();
        let kv_width = cfg.kv_width();
        let group = cfg.n_query_heads / cfg.n_kv_heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let pos = self.pos;

        let mut x = self.embedding[token as usize * d..(token as usize + 1) * d].to_vec();
        let mut ln = vec![0.0f32; d];
        for (li, layer) in self.layers.iter().enumerate() {
            k::layer_norm_row(&mut ln, &x, &layer.norm_gain, &layer.norm_bias, super::LN_EPS);

            let mut q = layer.attn_q.apply(&ln);
            let mut key = layer.attn_k.apply(&ln);
            let val = layer.attn_v.apply(&ln);
            for h in 0..cfg.n_query_heads {
                k::rotary_row(&mut q[h * head_dim..(h + 1) * head_dim], pos, &self.inv_freq);
            }
            for h in 0..cfg.n_kv_heads {
                k::rotary_row(&mut key[h * head_dim..(h + 1) * head_dim], pos, &self.inv_freq);
            }
            self.k_cache[li].extend_from_slice(&key);
            self.v_cache[li].extend_from_slice(&val);
            let keys = &self.k_cache[li];
            let vals = &self.v_cache[li];

            let mut ctx = vec![0.0f32; d];
            let mut scores = vec![0.0f32; pos + 1];
            for h in 0..cfg.n_query_heads {
                let kh = (h / group) * head_dim;
                let qr = &q[h * head_dim..(h + 1) * head_dim];
                for (j, slot) in scores.iter_mut().enumerate() {
                    *slot = k::dot_f32(qr, &keys[j * kv_width + kh..j * kv_width + kh + head_dim])
                        * scale;
                }
                k::softmax_row(&mut scores);
                let ctx_h = &mut ctx[h * head_dim..(h + 1) * head_dim];
                for (j, &p) in scores.iter().enumerate() {
                    k::axpy(ctx_h, p, &vals[j * kv_width + kh..j * kv_width + kh + head_dim]);
                }
            }
            let attn_out = layer.attn_o.apply(&ctx);

            let mut act = layer.mlp_up.apply(&ln);
            for v in act.iter_mut() {
                *v = k::gelu_scalar(*v);
            }
            let mlp_out = layer.mlp_down.apply(&act);

            for i in 0..d {
                x[i] = (x[i] + attn_out[i]) + mlp_out[i];
            }
        }

        let head = self.lm_head.as_deref().unwrap_or(&self.embedding);
        let mut logits = vec![0.0f32; cfg.vocab_size];
        for (o, slot) in logits.iter_mut().enumerate() {
            *slot = k::dot_f32(&x, &head[o * d..(o + 1) * d]);
        }
        self.pos += 1;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_weights, ModelConfig};
    use crate::tensor::Graph;

    fn assert_cache_matches_full_forward(model: &ModelHandle, tokens: &[u32]) {
        let g = Graph::inference();
        let full = forward(&g, model, tokens, false, None).unwrap();
        let v = model.config.vocab_size;
        let mut cache = KVCache::new(model).unwrap();
        for (t, &tok) in tokens.iter().enumerate() {
            let row = cache.push(tok).unwrap();
            assert_eq!(
                row,
                full.data_f32()[t * v..(t + 1) * v],
                "cached logits row {t} must be bitwise identical to the full pass"
            );
        }
        assert_eq!(cache.len(), tokens.len());
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_query_heads: 2,
            n_kv_heads: 1,
            d_ff: 64,
            max_seq_len: 48,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn dense_model_cache_is_bitwise_exact() {
        let model = init_weights(&small_config(), 3).unwrap();
        let tokens: Vec<u32> = vec![1, 80, 101, 55, 9, 200, 31, 2];
        assert_cache_matches_full_forward(&model, &tokens);
    }

    #[test]
    fn quantized_model_cache_is_bitwise_exact() {
        let mut model = init_weights(&small_config(), 5).unwrap();
        model.quantize_base(crate::quant::QuantSpec::default()).unwrap();
        let tokens: Vec<u32> = vec![1, 10, 20, 30, 40, 50, 2];
        assert_cache_matches_full_forward(&model, &tokens);
    }

    #[test]
    fn grouped_kv_heads_cache_is_bitwise_exact() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_query_heads: 4,
            n_kv_heads: 2,
            d_ff: 64,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        let model = init_weights(&cfg, 9).unwrap();
        assert_cache_matches_full_forward(&model, &[1, 4, 9, 16, 25, 36, 2]);
    }

    #[test]
    fn push_beyond_max_seq_len_is_rejected() {
        let cfg = ModelConfig {
            max_seq_len: 3,
            ..small_config()
        };
        let model = init_weights(&cfg, 0).unwrap();
        let mut cache = KVCache::new(&model).unwrap();
        for t in 0..3 {
            cache.push(t).unwrap();
        }
        assert!(matches!(
            cache.push(0),
            Err(ModelError::SequenceTooLong { len: 4, max: 3 })
        ));
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let model = init_weights(&small_config(), 0).unwrap();
        let mut cache = KVCache::new(&model).unwrap();
        assert!(matches!(
            cache.push(9999),
            Err(ModelError::TokenOutOfRange { id: 9999, .. })
        ));
    }
}
