//! Desk-scale parameter-efficient fine-tuning laboratory.
//!
//! The crate implements a complete, deterministic medical-QA fine-tuning
//! pipeline at toy scale:
//!
//! * [`corpus`] — MedQuAD-schema XML ingestion, filtering, stats, and JSONL
//!   import/export.
//! * [`tokenizer`] — reversible byte-level tokenization (vocab 260).
//! * [`tensor`] — dense f32/f16 tensors with reverse-mode autograd.
//! * [`quant`] — 4-bit block-wise NF4 quantization with optional double
//!   quantization of the first-level scales.
//! * [`lora`] — low-rank adapters over frozen (optionally quantized) base
//!   weights, with exact trainable-parameter accounting.
//! * [`model`] — a small Falcon-style decoder: rotary positions, multi-query
//!   attention, parallel attention+MLP residual, tied embeddings.
//! * [`train`] — deterministic AdamW fine-tuning of adapter parameters only,
//!   plus a versioned binary checkpoint format.
//! * [`gen`] — greedy / top-k / nucleus decoding with a KV cache and a small
//!   question-answering REPL.
//!
//! Every random path is seeded and every kernel fixes its floating-point
//! evaluation order, so identical inputs and seeds reproduce results bitwise.

pub mod corpus;
pub mod gen;
pub mod lora;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod tokenizer;
pub mod train;
