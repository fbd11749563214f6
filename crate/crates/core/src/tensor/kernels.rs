//! Row-level numeric kernels shared by the recorded tensor ops and the
//! incremental KV-cache path.
//!
//! Bitwise reproducibility contract: every kernel fixes its floating-point
//! evaluation order *by construction* (independent accumulator lanes or
//! per-element k-ascending sums), so scalar and SIMD compilations of the same
//! kernel produce identical bits, and the full-sequence and single-row paths
//! agree exactly as long as they call the same kernel.

use half::f16;

/// Number of independent accumulator lanes in the dot-product kernels.
/// Fixed as part of the numeric contract: changing it changes rounding.
const LANES: usize = 8;

/// Dot product of two equal-length f32 slices using `LANES` striped partial
/// sums combined in a fixed order. Element `i` always contributes to lane
/// `i % LANES`, so vectorization cannot reorder the arithmetic.
#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    for i in chunks * LANES..a.len() {
        acc[i % LANES] += a[i] * b[i];
    }
    combine_lanes(&acc)
}

/// Dot product in 16-bit compute: both operands are pre-converted f16 values;
/// each product is formed exactly in f32 (11-bit × 11-bit significands fit in
/// 24 bits) and accumulated in f32 with the same striping as `dot_f32`.
#[inline]
pub fn dot_f16(a: &[f16], b: &[f16]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l].to_f32() * b[base + l].to_f32();
        }
    }
    for i in chunks * LANES..a.len() {
        acc[i % LANES] += a[i].to_f32() * b[i].to_f32();
    }
    combine_lanes(&acc)
}

/// Fixed-order lane reduction: pairwise tree over the 8 lanes.
#[inline]
fn combine_lanes(acc: &[f32; LANES]) -> f32 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// `out += s * x`, elementwise. Per-element evaluation is independent, so the
/// order is fixed regardless of vectorization.
#[inline]
pub fn axpy(out: &mut [f32], s: f32, x: &[f32]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

/// In-place numerically stable softmax over one row: subtract the running
/// maximum (ascending scan), exponentiate, divide by the ascending-order sum.
#[inline]
pub fn softmax_row(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Layer normalization of one row with learned gain and bias.
/// Two-pass: ascending-order mean, then ascending-order variance.
#[inline]
pub fn layer_norm_row(out: &mut [f32], x: &[f32], gain: &[f32], bias: &[f32], eps: f32) {
    let n = x.len();
    debug_assert!(n > 0 && out.len() == n && gain.len() == n && bias.len() == n);
    let mut sum = 0.0f32;
    for &v in x {
        sum += v;
    }
    let mean = sum / n as f32;
    let mut var_sum = 0.0f32;
    for &v in x {
        let d = v - mean;
        var_sum += d * d;
    }
    let inv_std = 1.0 / (var_sum / n as f32 + eps).sqrt();
    for i in 0..n {
        out[i] = (x[i] - mean) * inv_std * gain[i] + bias[i];
    }
}

/// Gaussian error linear unit, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    const C: f32 = 0.044_715;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + C * x * x * x)).tanh())
}

/// Derivative of `gelu_scalar`.
#[inline]
pub fn gelu_grad_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    const C: f32 = 0.044_715;
    let u = SQRT_2_OVER_PI * (x + C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Rotates one head-sized row in place using the half-split rotary scheme:
/// pairs `(i, i + head_dim/2)` are rotated by angle `pos * inv_freq[i]`.
#[inline]
pub fn rotary_row(head: &mut [f32], pos: usize, inv_freq: &[f32]) {
    let half = head.len() / 2;
    debug_assert_eq!(inv_freq.len(), half);
    for i in 0..half {
        let ang = pos as f32 * inv_freq[i];
        let (sin, cos) = ang.sin_cos();
        let x1 = head[i];
        let x2 = head[i + half];
        head[i] = x1 * cos - x2 * sin;
        head[i + half] = x1 * sin + x2 * cos;
    }
}

/// Inverse frequencies for rotary embedding over a head of `head_dim` lanes:
/// `base^(-2i/head_dim)` for `i = 0 .. head_dim/2`.
pub fn rotary_inv_freq(head_dim: usize, base: f32) -> Vec<f32> {
    (0..head_dim / 2)
        .map(|i| base.powf(-((2 * i) as f32) / head_dim as f32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_plain_sum_closely() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..37).map(|i| (i as f32 * 0.71).cos()).collect();
        let reference: f64 = a
            .iter()
            .zip(&b)
            .map(|(&x, &y)| f64::from(x) * f64::from(y))
            .sum();
        assert!((f64::from(dot_f32(&a, &b)) - reference).abs() < 1e-5);
    }

    #[test]
    fn dot_is_exactly_reproducible() {
        let a: Vec<f32> = (0..100).map(|i| (i as f32).sin()).collect();
        let b: Vec<f32> = (0..100).map(|i| (i as f32).cos()).collect();
        assert_eq!(dot_f32(&a, &b).to_bits(), dot_f32(&a, &b).to_bits());
    }

    #[test]
    fn f16_products_are_exact_in_f32() {
        // Any product of two f16 values is exactly representable in f32,
        // so a single-element "dot" must round-trip exactly.
        let a = [f16::from_f32(0.1234)];
        let b = [f16::from_f32(-3.75)];
        let expected = a[0].to_f32() * b[0].to_f32();
        assert_eq!(dot_f16(&a, &b), expected);
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let mut row = [1.0f32, 2.0, 3.0, -1.0];
        softmax_row(&mut row);
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn layer_norm_row_normalizes() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let gain = [1.0f32; 4];
        let bias = [0.0f32; 4];
        let mut out = [0.0f32; 4];
        layer_norm_row(&mut out, &x, &gain, &bias, 1e-5);
        let mean: f32 = out.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        let var: f32 = out.iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!((var - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rotary_preserves_norm() {
        let mut head: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        let before: f32 = head.iter().map(|v| v * v).sum();
        let inv_freq = rotary_inv_freq(8, 10_000.0);
        rotary_row(&mut head, 7, &inv_freq);
        let after: f32 = head.iter().map(|v| v * v).sum();
        assert!((before - after).abs() / before < 1e-5);
    }

    #[test]
    fn rotary_at_position_zero_is_identity() {
        let mut head = [0.3f32, -0.7, 1.1, 0.2];
        let orig = head;
        let inv_freq = rotary_inv_freq(4, 10_000.0);
        rotary_row(&mut head, 0, &inv_freq);
        assert_eq!(head, orig);
    }

    #[test]
    fn gelu_matches_reference_points() {
        // gelu(0) = 0; gelu(x) ≈ x for large x; gelu(-x) small.
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-4);
        assert!(gelu_scalar(-10.0).abs() < 1e-4);
        // Central difference agreement for the analytic derivative.
        for &x in &[-2.0f32, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-3f32;
            let num = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!(
                (num - gelu_grad_scalar(x)).abs() < 1e-4,
                "gelu'({x}) numeric {num} vs analytic {}",
                gelu_grad_scalar(x)
            );
        }
    }
}
