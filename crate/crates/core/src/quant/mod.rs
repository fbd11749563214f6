//! 4-bit block-wise NF4 quantization with optional double quantization.
//!
//! Weights are split into fixed-size blocks; each block stores its absolute
//! maximum (the first-level scale) and a 4-bit codebook index per element.
//! With double quantization the first-level scales are themselves quantized
//! to 8-bit codes on a per-group affine grid, cutting the scale overhead from
//! 32 to 8 + 64/group bits per block.

mod nf4;
mod pack;

pub use nf4::build_nf4_codebook;
pub use pack::{pack_nibbles, unpack_nibbles};

use crate::tensor::{ops, DType, Graph, Tensor, TensorError};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default elements per first-level scale block.
pub const DEFAULT_BLOCK_SIZE: usize = 64;
/// Default first-level scales per double-quantization group.
pub const DEFAULT_DQ_GROUP_SIZE: usize = 256;

#[derive(Debug, Error)]
pub enum QuantError {
    /// The input tensor contained NaN or infinite values.
    #[error("cannot quantize non-finite input")]
    NonFiniteInput,
}

/// Quantization settings applied to a model's base weights. Part of the
/// checkpoint header, so adapters-only files can rebuild their base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub block_size: usize,
    pub double_quant: bool,
    pub dq_group_size: usize,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            double_quant: true,
            dq_group_size: DEFAULT_DQ_GROUP_SIZE,
        }
    }
}

/// The 16-value code grid shared by all quantized tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// Monotonically increasing values in `[-1, 1]` with exact endpoints
    /// and exactly one zero.
    pub values: [f32; 16],
}

impl Codebook {
    /// Index of the exact-zero code value.
    pub fn zero_index(&self) -> usize {
        self.values
            .iter()
            .position(|&v| v == 0.0)
            .expect("codebook invariant: contains exact zero")
    }

    /// Nearest code index for a normalized value; ties break toward the
    /// lower index.
    pub fn nearest(&self, x: f32) -> u8 {
        let mut best = 0usize;
        let mut best_dist = (x - self.values[0]).abs();
        for (i, &v) in self.values.iter().enumerate().skip(1) {
            let d = (x - v).abs();
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        best as u8
    }
}

/// First-level scale storage: plain f32 per block, or double-quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum AbsmaxStore {
    Plain(Vec<f32>),
    DoubleQuantized {
        /// One signed 8-bit code per block.
        codes: Vec<i8>,
        /// One f32 scale per group of `group_size` blocks.
        scales: Vec<f32>,
        /// One f32 offset per group.
        offsets: Vec<f32>,
        group_size: usize,
    },
}

/// A 4-bit quantized tensor: packed codes plus the block-scale hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    /// Packed 4-bit code indices, two per byte, low nibble first.
    pub codes: Vec<u8>,
    pub block_size: usize,
    pub absmax: AbsmaxStore,
    pub codebook: Codebook,
    pub double_quantized: bool,
}

impl QuantizedTensor {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn n_blocks(&self) -> usize {
        self.element_count().div_ceil(self.block_size)
    }

    /// First-level scale of `block`, reconstructed through the second-level
    /// grid when double-quantized.
    pub fn reconstructed_absmax(&self, block: usize) -> f32 {
        match &self.absmax {
            AbsmaxStore::Plain(v) => v[block],
            AbsmaxStore::DoubleQuantized {
                codes,
                scales,
                offsets,
                group_size,
            } => {
                let g = block / group_size;
                f32::from(codes[block]) * scales[g] + offsets[g]
            }
        }
    }

    /// Exact storage cost in bits per logical parameter.
    pub fn bits_per_parameter(&self) -> Ratio<u64> {
        let group = match &self.absmax {
            AbsmaxStore::Plain(_) => 0,
            AbsmaxStore::DoubleQuantized { group_size, .. } => *group_size,
        };
        bits_per_parameter(self.block_size, self.double_quantized, group)
    }

    /// Actual bytes held by codes and scale storage.
    pub fn storage_bytes(&self) -> usize {
        let scale_bytes = match &self.absmax {
            AbsmaxStore::Plain(v) => 4 * v.len(),
            AbsmaxStore::DoubleQuantized {
                codes,
                scales,
                offsets,
                ..
            } => codes.len() + 4 * scales.len() + 4 * offsets.len(),
        };
        self.codes.len() + scale_bytes
    }
}

/// Exact storage formula: `4 + 32/b` bits without DQ, and
/// `4 + 8/b + 64/(b·g)` with DQ (8-bit scale codes plus one f32 scale and one
/// f32 offset per group).
pub fn bits_per_parameter(block_size: usize, double_quant: bool, dq_group_size: usize) -> Ratio<u64> {
    let b = block_size as u64;
    if double_quant {
        let g = dq_group_size as u64;
        Ratio::from_integer(4) + Ratio::new(8, b) + Ratio::new(64, b * g)
    } else {
        Ratio::from_integer(4) + Ratio::new(32, b)
    }
}

/// Quantizes an f32 tensor to 4-bit NF4 codes with block-wise absmax scales.
///
/// Per block: `absmax = max |x_i|`; each element stores the nearest codebook
/// index of `x_i / absmax` (ties toward the lower index). All-zero blocks
/// store `absmax = 0` and the zero code. With `double_quant` the absmax
/// values are grouped and stored as signed 8-bit codes on a per-group affine
/// grid (`scale = (max − min)/255`, offset at the range midpoint); a constant
/// group stores `scale = 0` and the constant as its offset.
pub fn quantize(
    x: &Tensor,
    block_size: usize,
    double_quant: bool,
    dq_group_size: usize,
) -> Result<QuantizedTensor, QuantError> {
    assert!(block_size >= 1, "block_size must be positive");
    assert!(dq_group_size >= 1, "dq_group_size must be positive");
    if !x.all_finite() {
        return Err(QuantError::NonFiniteInput);
    }
    let codebook = build_nf4_codebook();
    let zero_code = codebook.zero_index() as u8;
    let data = x.to_f32_vec();
    let n = data.len();
    let n_blocks = n.div_ceil(block_size);

    let mut codes = Vec::with_capacity(n);
    let mut absmax = Vec::with_capacity(n_blocks);
    for block in data.chunks(block_size) {
        let am = block.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        absmax.push(am);
        if am == 0.0 {
            codes.extend(std::iter::repeat(zero_code).take(block.len()));
        } else {
            codes.extend(block.iter().map(|&v| codebook.nearest(v / am)));
        }
    }

    let store = if double_quant {
        let mut dq_codes = Vec::with_capacity(n_blocks);
        let mut scales = Vec::new();
        let mut offsets = Vec::new();
        for group in absmax.chunks(dq_group_size) {
            let min = group.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = group.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let offset = (min + max) / 2.0;
            let scale = (max - min) / 255.0;
            scales.push(scale);
            offsets.push(offset);
            if scale == 0.0 {
                dq_codes.extend(std::iter::repeat(0i8).take(group.len()));
            } else {
                dq_codes.extend(group.iter().map(|&a| {
                    ((a - offset) / scale).round().clamp(-128.0, 127.0) as i8
                }));
            }
        }
        AbsmaxStore::DoubleQuantized {
            codes: dq_codes,
            scales,
            offsets,
            group_size: dq_group_size,
        }
    } else {
        AbsmaxStore::Plain(absmax)
    };

    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        codes: pack_nibbles(&codes),
        block_size,
        absmax: store,
        codebook,
        double_quantized: double_quant,
    })
}

/// Reconstructs the dense tensor: `codebook[code] · reconstructed_absmax`.
pub fn dequantize(q: &QuantizedTensor, out_dtype: DType) -> Tensor {
    let n = q.element_count();
    let codes = unpack_nibbles(&q.codes, n);
    let mut data = Vec::with_capacity(n);
    for (i, &code) in codes.iter().enumerate() {
        let am = q.reconstructed_absmax(i / q.block_size);
        data.push(q.codebook.values[code as usize] * am);
    }
    match out_dtype {
        DType::F32 => Tensor::from_vec(&q.shape, data),
        DType::F16 => Tensor::from_vec_f16(&q.shape, &data),
    }
}

/// `x · dequantize(qw)ᵀ` in 16-bit compute, for `qw` a `[out, in]` matrix.
///
/// The weight is dequantized to f16 and multiplied with the same row-dot
/// kernel as a dense 16-bit linear layer, so the result is bitwise identical
/// to materializing first. Gradients flow to `x` only; the quantized weight
/// is constant.
pub fn qmatmul(g: &Graph, x: &Tensor, qw: &QuantizedTensor) -> Result<Tensor, TensorError> {
    if qw.shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "qmatmul",
            lhs: x.shape().to_vec(),
            rhs: qw.shape.clone(),
        });
    }
    let w16 = dequantize(qw, DType::F16);
    ops::linear(g, x, &w16, crate::tensor::Compute::F16)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Compute;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_vec(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn zero_tensor_quantizes_to_zero_codes_and_zero_scales() {
        let x = Tensor::from_vec(&[128], vec![0.0; 128]);
        let q = quantize(&x, 64, false, 256).unwrap();
        let zero = q.codebook.zero_index() as u8;
        assert!(unpack_nibbles(&q.codes, 128).iter().all(|&c| c == zero));
        assert_eq!(q.absmax, AbsmaxStore::Plain(vec![0.0, 0.0]));
        let back = dequantize(&q, DType::F32);
        assert!(back.data_f32().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn codebook_multiples_round_trip_exactly() {
        let cb = build_nf4_codebook();
        let absmax = 3.0f32;
        let data: Vec<f32> = (0..64).map(|i| absmax * cb.values[i % 16]).collect();
        let x = Tensor::from_vec(&[64], data.clone());
        let q = quantize(&x, 64, false, 256).unwrap();
        let back = dequantize(&q, DType::F32);
        assert_eq!(back.data_f32(), &data[..], "fixed points must round-trip bitwise");
    }

    #[test]
    fn round_trip_error_bounded_by_half_largest_gap() {
        let cb = build_nf4_codebook();
        let half_max_gap = cb
            .values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0f32, f32::max)
            / 2.0;
        let data = normal_vec(4096, 11);
        let x = Tensor::from_vec(&[4096], data.clone());
        let q = quantize(&x, 64, false, 256).unwrap();
        let back = dequantize(&q, DType::F32);
        let codes = unpack_nibbles(&q.codes, 4096);
        for (i, (&orig, &deq)) in data.iter().zip(back.data_f32()).enumerate() {
            let am = q.reconstructed_absmax(i / 64);
            assert!(
                (orig - deq).abs() <= am * half_max_gap + 1e-6,
                "element {i}: |{orig} - {deq}| > {am} * {half_max_gap}"
            );
            // Exhaustive scalar-reference nearest-code check.
            let mut best = 0u8;
            let mut best_d = f32::INFINITY;
            for (ci, &v) in cb.values.iter().enumerate() {
                let d = (orig / am - v).abs();
                if d < best_d {
                    best = ci as u8;
                    best_d = d;
                }
            }
            assert_eq!(codes[i], best, "code mismatch at {i}");
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let x = Tensor::from_vec(&[2], vec![1.0, f32::NAN]);
        assert!(matches!(quantize(&x, 64, false, 256), Err(QuantError::NonFiniteInput)));
    }

    #[test]
    fn dq_constant_scale_group_reconstructs_exactly() {
        // Repeat one block's data so every block has the same absmax.
        let base = normal_vec(64, 3);
        let data: Vec<f32> = base.iter().cycle().take(64 * 8).cloned().collect();
        let x = Tensor::from_vec(&[512], data);
        let plain = quantize(&x, 64, false, 256).unwrap();
        let dq = quantize(&x, 64, true, 256).unwrap();
        if let AbsmaxStore::DoubleQuantized { scales, offsets, .. } = &dq.absmax {
            assert_eq!(scales, &vec![0.0]);
            if let AbsmaxStore::Plain(am) = &plain.absmax {
                assert_eq!(offsets[0], am[0], "offset must be the constant absmax");
            }
        } else {
            panic!("expected double-quantized store");
        }
        assert_eq!(
            dequantize(&dq, DType::F32).data_f32(),
            dequantize(&plain, DType::F32).data_f32(),
            "constant-scale reconstruction must match the plain path exactly"
        );
    }

    #[test]
    fn dq_error_within_half_step_of_plain_error() {
        let data = normal_vec(64 * 300, 17); // 300 blocks → several DQ groups at size 128
        let x = Tensor::from_vec(&[data.len()], data.clone());
        let plain = quantize(&x, 64, false, 128).unwrap();
        let dq = quantize(&x, 64, true, 128).unwrap();
        let back_plain = dequantize(&plain, DType::F32);
        let back_dq = dequantize(&dq, DType::F32);
        let max_code = 1.0f32; // max |codebook value|
        let AbsmaxStore::DoubleQuantized { scales, group_size, .. } = &dq.absmax else {
            panic!("expected double-quantized store");
        };
        for (i, &orig) in data.iter().enumerate() {
            let block = i / 64;
            let scale = scales[block / group_size];
            let e_plain = (orig - back_plain.data_f32()[i]).abs();
            let e_dq = (orig - back_dq.data_f32()[i]).abs();
            assert!(
                e_dq <= e_plain + (scale / 2.0) * max_code + 1e-6,
                "element {i}: DQ error {e_dq} exceeds plain error {e_plain} + half-step {}",
                scale / 2.0
            );
        }
    }

    #[test]
    fn scale_covariant_for_exact_power_of_two_factors() {
        let data = normal_vec(256, 23);
        let x = Tensor::from_vec(&[256], data.clone());
        let x4 = Tensor::from_vec(&[256], data.iter().map(|&v| v * 4.0).collect());
        let q1 = quantize(&x, 64, false, 256).unwrap();
        let q4 = quantize(&x4, 64, false, 256).unwrap();
        assert_eq!(q1.codes, q4.codes, "codes are scale-invariant");
        let (AbsmaxStore::Plain(a1), AbsmaxStore::Plain(a4)) = (&q1.absmax, &q4.absmax) else {
            unreachable!()
        };
        for (s1, s4) in a1.iter().zip(a4) {
            assert_eq!(s1 * 4.0, *s4, "absmax scales exactly with the input");
        }
    }

    #[test]
    fn bits_per_parameter_matches_formulas() {
        assert_eq!(bits_per_parameter(64, false, 0), Ratio::new(9, 2)); // 4.5
        let dq = bits_per_parameter(64, true, 256);
        assert_eq!(dq, Ratio::new(1057, 256)); // 4.12890625
        assert_eq!(bits_per_parameter(1, false, 0), Ratio::from_integer(36));
        for b in 3..=128 {
            assert!(
                bits_per_parameter(b, true, 256) < bits_per_parameter(b, false, 0),
                "DQ must be cheaper at block size {b}"
            );
        }
    }

    #[test]
    fn qmatmul_zero_matrix_gives_zero_output() {
        let g = Graph::inference();
        let w = Tensor::from_vec(&[8, 8], vec![0.0; 64]);
        let q = quantize(&w, 64, false, 256).unwrap();
        let x = Tensor::from_vec(&[2, 8], normal_vec(16, 5));
        let y = qmatmul(&g, &x, &q).unwrap();
        assert!(y.data_f32().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qmatmul_is_bitwise_identical_to_materializing_reference() {
        let g = Graph::inference();
        let w = Tensor::from_vec(&[8, 8], normal_vec(64, 31));
        let q = quantize(&w, 8, true, 4).unwrap();
        let x = Tensor::from_vec(&[8, 8], normal_vec(64, 32));
        let fused = qmatmul(&g, &x, &q).unwrap();
        let w16 = dequantize(&q, DType::F16);
        let reference = ops::linear(&g, &x, &w16, Compute::F16).unwrap();
        assert_eq!(fused.data_f32(), reference.data_f32(), "must be bitwise identical");
        // And agrees with the transpose-matmul formulation to f16 tolerance.
        let wt = ops::transpose(&g, &dequantize(&q, DType::F32));
        let via_matmul = ops::matmul(&g, &x, &wt, Compute::F16).unwrap();
        for (a, b) in fused.data_f32().iter().zip(via_matmul.data_f32()) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn perturbing_one_nibble_only_changes_that_weight_row_contribution() {
        let g = Graph::inference();
        let w = Tensor::from_vec(&[8, 8], normal_vec(64, 41));
        let q = quantize(&w, 8, false, 256).unwrap(); // one block per weight row
        let x = Tensor::from_vec(&[4, 8], normal_vec(32, 42));
        let base = qmatmul(&g, &x, &q).unwrap();
        let mut tampered = q.clone();
        // Flip the code of element (row 3, col 5) → flat index 29, high nibble of byte 14.
        tampered.codes[14] ^= 0xF0;
        let out = qmatmul(&g, &x, &tampered).unwrap();
        for r in 0..4 {
            for c in 0..8 {
                let (a, b) = (base.data_f32()[r * 8 + c], out.data_f32()[r * 8 + c]);
                if c == 3 {
                    assert_ne!(a, b, "perturbed row must change its output column");
                } else {
                    assert_eq!(a, b, "untouched rows must be bitwise unchanged at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn dequantize_respects_requested_dtype() {
        let x = Tensor::from_vec(&[32], normal_vec(32, 51));
        let q = quantize(&x, 64, false, 256).unwrap();
        assert_eq!(dequantize(&q, DType::F16).dtype(), DType::F16);
        assert_eq!(dequantize(&q, DType::F32).dtype(), DType::F32);
    }
}
