//! Deterministic weight initialization.

use super::{layer_weight_name, ModelConfig, ModelError, ModelHandle, WeightEntry, WeightStorage};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Standard deviation of the normal init for matrix weights.
pub const INIT_STD: f32 = 0.02;

/// Builds a model with weights drawn from `N(0, 0.02²)` (norm gains 1,
/// biases 0). The draw order is fixed — embedding, then per layer
/// `attn_q, attn_k, attn_v, attn_o, mlp_up, mlp_down`, then the untied head
/// if present — so a given seed always produces bitwise-identical weights.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelHandle, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid normal");
    let mut draw = |shape: &[usize]| -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::param(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
    };

    let mut weights = BTreeMap::new();
    let insert = |weights: &mut BTreeMap<String, WeightEntry>, name: String, t: Tensor| {
        weights.insert(
            name,
            WeightEntry {
                storage: WeightStorage::Dense(t),
                trainable: true,
                adapter: None,
            },
        );
    };

    insert(
        &mut weights,
        "embedding".to_string(),
        draw(&[config.vocab_size, config.d_model]),
    );
    let kv_width = config.kv_width();
    for i in 0..config.n_layers {
        insert(
            &mut weights,
            layer_weight_name(i, "attn_q"),
            draw(&[config.d_model, config.d_model]),
        );
        insert(
            &mut weights,
            layer_weight_name(i, "attn_k"),
            draw(&[kv_width, config.d_model]),
        );
        insert(
            &mut weights,
            layer_weight_name(i, "attn_v"),
            draw(&[kv_width, config.d_model]),
        );
        insert(
            &mut weights,
            layer_weight_name(i, "attn_o"),
            draw(&[config.d_model, config.d_model]),
        );
        insert(
            &mut weights,
            layer_weight_name(i, "mlp_up"),
            draw(&[config.d_ff, config.d_model]),
        );
        insert(
            &mut weights,
            layer_weight_name(i, "mlp_down"),
            draw(&[config.d_model, config.d_ff]),
        );
        insert(
            &mut weights,
            layer_weight_name(i, "norm_gain"),
            Tensor::param(&[config.d_model], vec![1.0; config.d_model]),
        );
        insert(
            &mut weights,
            layer_weight_name(i, "norm_bias"),
            Tensor::param(&[config.d_model], vec![0.0; config.d_model]),
        );
    }
    if !config.tie_embeddings {
        insert(
            &mut weights,
            "lm_head".to_string(),
            draw(&[config.vocab_size, config.d_model]),
        );
    }

    Ok(ModelHandle::from_weights(config.clone(), seed, weights))
}
