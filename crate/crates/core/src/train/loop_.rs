//! The fine-tuning loop: seeded epoch-cyclic batching, one recorded graph per
//! step, token-pooled batch loss, global-norm clipping, and AdamW updates of
//! adapter parameters only.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;

use super::{
    clip_global_norm, format_example, seeded_rng, AdamW, AdamWConfig, FormattedExample,
    RngStream, TrainConfig, TrainError,
};
use crate::corpus::QARecord;
use crate::model::{forward, lm_loss_parts, ModelError, ModelHandle};
use crate::tensor::{ops, Graph, Tensor};

/// Runs `cfg.steps` optimizer steps over the corpus and returns the updated
/// model with the per-step loss history (f32, one entry per step).
///
/// Batching is epoch-cyclic: a seeded permutation of the corpus is appended
/// to the queue whenever it runs short, so every example is visited once per
/// epoch and the schedule is a pure function of the seed. The batch loss is
/// token-pooled cross-entropy: the sum over all supervised positions in the
/// batch divided by their total count. Only adapter tensors are updated;
/// frozen base weights are untouched bitwise.
pub fn train(
    mut model: ModelHandle,
    corpus: &[QARecord],
    cfg: &TrainConfig,
) -> Result<(ModelHandle, Vec<f32>), TrainError> {
    cfg.validate()?;
    let adapter_names = model.adapter_names();
    if adapter_names.is_empty() {
        return Err(TrainError::NoTrainableParameters);
    }
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }

    // The effective window is the tighter of the trainer's and the model's.
    let window = cfg.max_seq_len.min(model.config.max_seq_len);
    let examples: Vec<FormattedExample> = corpus
        .iter()
        .map(|r| format_example(r, &cfg.template_id, window))
        .collect::<Result<_, _>>()?;

    let mut shuffle_rng = seeded_rng(cfg.seed, RngStream::Shuffle);
    let mut dropout_rng = seeded_rng(cfg.seed, RngStream::Dropout);
    let mut optimizer = AdamW::new(AdamWConfig::from(cfg));
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        while queue.len() < cfg.batch_size {
            let mut perm: Vec<usize> = (0..examples.len()).collect();
            perm.shuffle(&mut shuffle_rng);
            queue.extend(perm);
        }
        let batch: Vec<usize> = queue.drain(..cfg.batch_size).collect();

        let g = Graph::new();
        let mut pooled: Option<Tensor> = None;
        let mut token_count = 0usize;
        for &idx in &batch {
            let ex = &examples[idx];
            let logits = forward(&g, &model, &ex.tokens, true, Some(&mut dropout_rng))?;
            let (sum, count) = lm_loss_parts(&g, &logits, &ex.tokens, &ex.loss_mask)?;
            token_count += count;
            pooled = Some(match pooled {
                Some(acc) => ops::add(&g, &acc, &sum)?,
                None => sum,
            });
        }
        let total = pooled.expect("batch_size >= 1 guarantees at least one example");
        let loss = ops::mul_scalar(&g, &total, 1.0 / token_count as f32);
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        history.push(loss_value);

        g.backward(&loss).map_err(ModelError::from)?;

        // Gradients in a fixed order: adapter_names order, A then B.
        let mut grads: Vec<Vec<f32>> = Vec::with_capacity(adapter_names.len() * 2);
        for name in &adapter_names {
            let adapter = model.weight(name).adapter.as_ref().expect("adapter present");
            for t in [&adapter.a, &adapter.b] {
                grads.push(t.grad().unwrap_or_else(|| vec![0.0; t.element_count()]));
            }
        }
        clip_global_norm(&mut grads, cfg.grad_clip_norm);

        let mut staged: Vec<(String, Vec<f32>)> = Vec::with_capacity(grads.len());
        for name in &adapter_names {
            let adapter = model.weight(name).adapter.as_ref().expect("adapter present");
            staged.push((format!("{name}.lora_a"), adapter.a.data_f32().to_vec()));
            staged.push((format!("{name}.lora_b"), adapter.b.data_f32().to_vec()));
        }
        let mut updates: Vec<(&str, &mut [f32], &[f32])> = staged
            .iter_mut()
            .zip(grads.iter())
            .map(|((name, data), grad)| (name.as_str(), data.as_mut_slice(), grad.as_slice()))
            .collect();
        optimizer.step(&mut updates);
        drop(updates);

        let mut staged = staged.into_iter();
        for name in &adapter_names {
            let (_, a_data) = staged.next().expect("staged in lockstep");
            let (_, b_data) = staged.next().expect("staged in lockstep");
            let adapter = model
                .weight_mut(name)
                .adapter
                .as_mut()
                .expect("adapter present");
            let a_shape = adapter.a.shape().to_vec();
            let b_shape = adapter.b.shape().to_vec();
            adapter.a = Tensor::param(&a_shape, a_data);
            adapter.b = Tensor::param(&b_shape, b_data);
        }
    }

    Ok((model, history))
}

/// Emits the loss history as CSV with a `step,loss` header; steps are 1-based.
pub fn write_loss_csv<W: Write>(history: &[f32], mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "step,loss")?;
    for (i, loss) in history.iter().enumerate() {
        writeln!(sink, "{},{}", i + 1, loss)?;
    }
    Ok(())
}
