//! Full-sequence forward pass and the language-model loss.

use super::{layer_weight_name, ModelError, ModelHandle, WeightEntry, WeightStorage};
use crate::lora;
use crate::quant;
use crate::tensor::{ops, Compute, DType, Graph, Tensor};
use rand_chacha::ChaCha8Rng;

fn compute_for(w: &Tensor) -> Compute {
    match w.dtype() {
        DType::F32 => Compute::F32,
        DType::F16 => Compute::F16,
    }
}

/// Routes `x` through one named weight: adapter-paired weights use the
/// adapter path, quantized weights the 16-bit quantized kernel, dense
/// weights a plain linear.
fn weight_forward(
    g: &Graph,
    entry: &WeightEntry,
    x: &Tensor,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor, ModelError> {
    let y = match &entry.adapter {
        Some(adapter) => {
            lora::adapter_forward(g, x, (&entry.storage).into(), adapter, training, rng)?
        }
        None => match &entry.storage {
            WeightStorage::Dense(w) => ops::linear(g, x, w, compute_for(w))?,
            WeightStorage::Quantized(q) => quant::qmatmul(g, x, q)?,
        },
    };
    Ok(y)
}

/// Runs the decoder over `tokens` and returns `[seq, vocab]` logits.
///
/// Each block computes one shared pre-norm, feeds it to the attention and
/// MLP branches in parallel, and adds both results to the residual stream:
/// `x = x + attn(ln(x)) + mlp(ln(x))`. Logits come from the tied embedding
/// (or the untied head).
pub fn forward(
    g: &Graph,
    model: &ModelHandle,
    tokens: &[u32],
    training: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor, ModelError> {
    let cfg = &model.config;
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    for &id in tokens {
        if (id as usize) >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }

    let emb = model
        .weight("embedding")
        .storage
        .as_dense()
        .expect("embedding stays dense");
    let mut x = ops::embedding(g, emb, tokens);

    for i in 0..cfg.n_layers {
        let gain = model.weight(&layer_weight_name(i, "norm_gain"));
        let bias = model.weight(&layer_weight_name(i, "norm_bias"));
        let ln = ops::layer_norm(
            g,
            &x,
            gain.storage.as_dense().expect("norms stay dense"),
            bias.storage.as_dense().expect("norms stay dense"),
            super::LN_EPS,
        )?;

        let q = weight_forward(
            g,
            model.weight(&layer_weight_name(i, "attn_q")),
            &ln,
            training,
            dropout_rng.as_deref_mut(),
        )?;
        let k = weight_forward(
            g,
            model.weight(&layer_weight_name(i, "attn_k")),
            &ln,
            training,
            dropout_rng.as_deref_mut(),
        )?;
        let v = weight_forward(
            g,
            model.weight(&layer_weight_name(i, "attn_v")),
            &ln,
            training,
            dropout_rng.as_deref_mut(),
        )?;
        let q = ops::rotary(g, &q, cfg.n_query_heads, 0);
        let k = ops::rotary(g, &k, cfg.n_kv_heads, 0);
        let attn = ops::causal_attention(g, &q, &k, &v, cfg.n_query_heads, cfg.n_kv_heads)?;
        let attn_out = weight_forward(
            g,
            model.weight(&layer_weight_name(i, "attn_o")),
            &attn,
            training,
            dropout_rng.as_deref_mut(),
        )?;

        let up = weight_forward(
            g,
            model.weight(&layer_weight_name(i, "mlp_up")),
            &ln,
            training,
            dropout_rng.as_deref_mut(),
        )?;
        let act = ops::gelu(g, &up);
        let mlp_out = weight_forward(
            g,
            model.weight(&layer_weight_name(i, "mlp_down")),
            &act,
            training,
            dropout_rng.as_deref_mut(),
        )?;

        x = ops::add(g, &ops::add(g, &x, &attn_out)?, &mlp_out)?;
    }

    let head = if cfg.tie_embeddings {
        emb
    } else {
        model
            .weight("lm_head")
            .storage
            .as_dense()
            .expect("untied head stays dense")
    };
    let logits = ops::linear(g, &x, head, Compute::F32)?;
    Ok(logits)
}

/// Next-token cross-entropy as `(summed loss, contributing positions)`.
///
/// `logits[t]` scores `tokens[t+1]` wherever `mask[t+1]` is set; masked
/// positions contribute exactly zero loss and zero gradient.
pub fn lm_loss_parts(
    g: &Graph,
    logits: &Tensor,
    tokens: &[u32],
    loss_mask: &[bool],
) -> Result<(Tensor, usize), ModelError> {
    let t_len = tokens.len();
    assert_eq!(loss_mask.len(), t_len, "mask length must equal sequence length");
    assert_eq!(logits.shape()[0], t_len, "logits rows must equal sequence length");
    if t_len < 2 {
        return Err(ModelError::EmptyMask);
    }
    let targets: Vec<u32> = tokens[1..].to_vec();
    let shifted_mask: Vec<bool> = loss_mask[1..].to_vec();
    let scored = ops::slice(g, logits, 0, 0, t_len - 1)?;
    ops::cross_entropy_parts(g, &scored, &targets, &shifted_mask).ok_or(ModelError::EmptyMask)
}

/// Mean next-token cross-entropy over unmasked positions.
pub fn lm_loss(
    g: &Graph,
    logits: &Tensor,
    tokens: &[u32],
    loss_mask: &[bool],
) -> Result<Tensor, ModelError> {
    let (sum, count) = lm_loss_parts(g, logits, tokens, loss_mask)?;
    Ok(ops::mul_scalar(g, &sum, 1.0 / count as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelConfig};
    use crate::tensor::kernels;

    fn small_model() -> ModelHandle {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_query_heads: 2,
            n_kv_heads: 1,
            d_ff: 64,
            max_seq_len: 64,
            ..ModelConfig::default()
        };
        init_weights(&cfg, 42).unwrap()
    }

    #[test]
    fn output_shape_is_seq_by_vocab() {
        let model = small_model();
        let g = Graph::inference();
        let logits = forward(&g, &model, &[1, 10, 20, 2], false, None).unwrap();
        assert_eq!(logits.shape(), &[4, 260]);
    }

    #[test]
    fn causality_holds_bitwise() {
        let model = small_model();
        let g = Graph::inference();
        let a = forward(&g, &model, &[1, 10, 20, 30, 2], false, None).unwrap();
        let b = forward(&g, &model, &[1, 10, 20, 99, 2], false, None).unwrap();
        let v = model.config.vocab_size;
        assert_eq!(
            a.data_f32()[..3 * v],
            b.data_f32()[..3 * v],
            "rows before the changed position must be bitwise identical"
        );
        assert_ne!(a.data_f32()[3 * v..4 * v], b.data_f32()[3 * v..4 * v]);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = small_model();
        let g = Graph::inference();
        let a = forward(&g, &model, &[1, 5, 6, 7, 2], false, None).unwrap();
        let b = forward(&g, &model, &[1, 5, 6, 7, 2], false, None).unwrap();
        assert_eq!(a.data_f32(), b.data_f32());
    }

    #[test]
    fn softmax_of_logit_rows_normalizes() {
        let model = small_model();
        let g = Graph::inference();
        let logits = forward(&g, &model, &[1, 40, 50, 2], false, None).unwrap();
        let probs = ops::softmax(&g, &logits);
        for r in 0..4 {
            let s: f32 = probs.data_f32()[r * 260..(r + 1) * 260].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
        }
    }

    #[test]
    fn sequence_too_long_is_rejected() {
        let model = small_model();
        let g = Graph::inference();
        let long = vec![1u32; model.config.max_seq_len + 1];
        assert!(matches!(
            forward(&g, &model, &long, false, None),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let model = small_model();
        let g = Graph::inference();
        assert!(matches!(
            forward(&g, &model, &[1, 260, 2], false, None),
            Err(ModelError::TokenOutOfRange { id: 260, .. })
        ));
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let g = Graph::inference();
        let logits = Tensor::from_vec(&[3, 260], vec![0.0; 3 * 260]);
        let loss = lm_loss(&g, &logits, &[1, 50, 2], &[false, true, true]).unwrap();
        assert!((loss.item() - 260f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn single_unmasked_position_equals_its_row_cross_entropy() {
        let g = Graph::inference();
        let mut data = vec![0.0f32; 2 * 260];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i as f32) * 0.013).sin();
        }
        let logits = Tensor::from_vec(&[2, 260], data.clone());
        // Only position 1 is scored: logits[0] vs tokens[1].
        let loss = lm_loss(&g, &logits, &[1, 37], &[false, true]).unwrap();
        let row = &data[0..260];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum_exp: f64 = row.iter().map(|&x| f64::from((x - max).exp())).sum();
        let want = (sum_exp.ln() + f64::from(max) - f64::from(row[37])) as f32;
        assert!((loss.item() - want).abs() < 1e-5, "{} vs {want}", loss.item());
    }

    #[test]
    fn masked_positions_get_zero_gradient() {
        let g = Graph::new();
        let logits = Tensor::param(&[3, 260], vec![0.01; 3 * 260]);
        let loss = lm_loss(&g, &logits, &[1, 7, 9], &[false, false, true]).unwrap();
        g.backward(&loss).unwrap();
        let grad = logits.grad().unwrap();
        assert!(grad[0..260].iter().all(|&v| v == 0.0), "masked row 0");
        assert!(grad[260..520].iter().any(|&v| v != 0.0), "scored row 1");
        assert!(grad[520..780].iter().all(|&v| v == 0.0), "final row is never scored");
    }

    #[test]
    fn empty_mask_is_an_error() {
        let g = Graph::inference();
        let logits = Tensor::from_vec(&[2, 260], vec![0.0; 2 * 260]);
        assert!(matches!(
            lm_loss(&g, &logits, &[1, 2], &[true, false]),
            Err(ModelError::EmptyMask)
        ));
    }

    #[test]
    fn rotary_scores_depend_only_on_relative_position() {
        // Two-token probe: fixed q/k content at positions (p, p+Δ) must give
        // the same attention score for any p.
        let head_dim = 32;
        let inv_freq = kernels::rotary_inv_freq(head_dim, 10_000.0);
        let q_content: Vec<f32> = (0..head_dim).map(|i| ((i * 7 + 3) as f32 * 0.1).sin()).collect();
        let k_content: Vec<f32> = (0..head_dim).map(|i| ((i * 5 + 1) as f32 * 0.17).cos()).collect();
        let score = |qp: usize, kp: usize| {
            let mut q = q_content.clone();
            let mut k = k_content.clone();
            kernels::rotary_row(&mut q, qp, &inv_freq);
            kernels::rotary_row(&mut k, kp, &inv_freq);
            kernels::dot_f32(&q, &k)
        };
        let delta = 2;
        let a = score(3, 3 + delta);
        let b = score(40, 40 + delta);
        assert!((a - b).abs() < 1e-4, "relative-position invariance: {a} vs {b}");
        assert!((score(0, 1) - score(7, 8)).abs() < 1e-4);
    }

    #[test]
    fn quantized_base_still_forwards_and_stays_causal() {
        let mut model = small_model();
        model.quantize_base(crate::quant::QuantSpec::default()).unwrap();
        let g = Graph::inference();
        let a = forward(&g, &model, &[1, 10, 20, 30], false, None).unwrap();
        let b = forward(&g, &model, &[1, 10, 20, 99], false, None).unwrap();
        assert_eq!(a.shape(), &[4, 260]);
        let v = 260;
        assert_eq!(a.data_f32()[..3 * v], b.data_f32()[..3 * v]);
    }
}
