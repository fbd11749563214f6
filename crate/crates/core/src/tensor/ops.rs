//! Differentiable operations.
//!
//! Every op computes its forward result with a fixed floating-point
//! evaluation order (see [`super::kernels`]) and, when the graph is recording
//! and an input is traced, pushes a backward closure onto the tape. Backward
//! arithmetic is always f32, regardless of the forward compute dtype.

use super::graph::{Compute, Graph};
use super::kernels as k;
use super::{debug_check_finite, Tensor, TensorError};
use half::f16;

fn dims_2d(t: &Tensor) -> (usize, usize) {
    match *t.shape() {
        [m, n] => (m, n),
        [n] => (1, n),
        ref s => panic!("expected 1-D or 2-D tensor, got {s:?}"),
    }
}

/// `a · b` for `a: [m,k]`, `b: [k,n]`. With `Compute::F16` the operands are
/// converted to binary16 and each product is formed exactly in f32;
/// accumulation is f32 in both modes. Output is always f32.
pub fn matmul(g: &Graph, a: &Tensor, b: &Tensor, compute: Compute) -> Result<Tensor, TensorError> {
    let (m, ka) = dims_2d(a);
    let (kb, n) = dims_2d(b);
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let kk = ka;
    let mut out = vec![0.0f32; m * n];
    match compute {
        Compute::F32 => {
            let av = a.data_f32();
            let bv = b.data_f32();
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for x in 0..kk {
                    k::axpy(row, av[i * kk + x], &bv[x * n..(x + 1) * n]);
                }
            }
        }
        Compute::F16 => {
            let a16: Vec<f16> = a.to_f32_vec().iter().map(|&v| f16::from_f32(v)).collect();
            let b16: Vec<f16> = b.to_f32_vec().iter().map(|&v| f16::from_f32(v)).collect();
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for x in 0..kk {
                    let s = a16[i * kk + x].to_f32();
                    for (j, o) in row.iter_mut().enumerate() {
                        *o += s * b16[x * n + j].to_f32();
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[m, n], out);
    debug_check_finite("matmul", &out);
    let (ac, bc) = (a.clone(), b.clone());
    let (need_a, need_b) = (g.is_traced(a), g.is_traced(b));
    g.record(
        &[a, b],
        &out,
        Box::new(move |dy, store| {
            if need_a {
                let bv = bc.to_f32_vec();
                store.accumulate_with(ac.id(), m * kk, |da| {
                    // da[i,x] = dot(dy[i,:], b[x,:])
                    for i in 0..m {
                        for x in 0..kk {
                            da[i * kk + x] +=
                                k::dot_f32(&dy[i * n..(i + 1) * n], &bv[x * n..(x + 1) * n]);
                        }
                    }
                });
            }
            if need_b {
                let av = ac.to_f32_vec();
                store.accumulate_with(bc.id(), kk * n, |db| {
                    // db[x,:] += a[i,x] * dy[i,:]
                    for i in 0..m {
                        for x in 0..kk {
                            k::axpy(&mut db[x * n..(x + 1) * n], av[i * kk + x], &dy[i * n..(i + 1) * n]);
                        }
                    }
                });
            }
        }),
    );
    Ok(out)
}

/// `x · wᵀ` for `x: [m,k]`, `w: [n,k]` — the natural orientation for
/// row-major `[out, in]` weight matrices. Same compute-dtype contract as
/// [`matmul`]. The single-row case of this kernel is what the KV-cache path
/// replays, so full-sequence and incremental results agree bitwise.
pub fn linear(g: &Graph, x: &Tensor, w: &Tensor, compute: Compute) -> Result<Tensor, TensorError> {
    let (m, kx) = dims_2d(x);
    let (n, kw) = dims_2d(w);
    if kx != kw {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let kk = kx;
    let mut out = vec![0.0f32; m * n];
    match compute {
        Compute::F32 => {
            let xv = x.data_f32();
            let wv = w.data_f32();
            for i in 0..m {
                let xr = &xv[i * kk..(i + 1) * kk];
                for o in 0..n {
                    out[i * n + o] = k::dot_f32(xr, &wv[o * kk..(o + 1) * kk]);
                }
            }
        }
        Compute::F16 => {
            let x16: Vec<f16> = x.to_f32_vec().iter().map(|&v| f16::from_f32(v)).collect();
            let w16: Vec<f16> = match w.dtype() {
                super::DType::F16 => w.data_f16().to_vec(),
                super::DType::F32 => w.data_f32().iter().map(|&v| f16::from_f32(v)).collect(),
            };
            for i in 0..m {
                let xr = &x16[i * kk..(i + 1) * kk];
                for o in 0..n {
                    out[i * n + o] = k::dot_f16(xr, &w16[o * kk..(o + 1) * kk]);
                }
            }
        }
    }
    let out = Tensor::from_vec(&[m, n], out);
    debug_check_finite("linear", &out);
    let (xc, wc) = (x.clone(), w.clone());
    let (need_x, need_w) = (g.is_traced(x), g.is_traced(w));
    g.record(
        &[x, w],
        &out,
        Box::new(move |dy, store| {
            if need_x {
                let wv = wc.to_f32_vec();
                store.accumulate_with(xc.id(), m * kk, |dx| {
                    for i in 0..m {
                        for o in 0..n {
                            k::axpy(&mut dx[i * kk..(i + 1) * kk], dy[i * n + o], &wv[o * kk..(o + 1) * kk]);
                        }
                    }
                });
            }
            if need_w {
                let xv = xc.to_f32_vec();
                store.accumulate_with(wc.id(), n * kk, |dw| {
                    for i in 0..m {
                        for o in 0..n {
                            k::axpy(&mut dw[o * kk..(o + 1) * kk], dy[i * n + o], &xv[i * kk..(i + 1) * kk]);
                        }
                    }
                });
            }
        }),
    );
    Ok(out)
}

/// Elementwise sum of two same-shape tensors.
pub fn add(g: &Graph, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data: Vec<f32> = a
        .data_f32()
        .iter()
        .zip(b.data_f32())
        .map(|(&x, &y)| x + y)
        .collect();
    let out = Tensor::from_vec(a.shape(), data);
    debug_check_finite("add", &out);
    let (aid, bid, n) = (a.id(), b.id(), a.element_count());
    let (need_a, need_b) = (g.is_traced(a), g.is_traced(b));
    g.record(
        &[a, b],
        &out,
        Box::new(move |dy, store| {
            if need_a {
                store.accumulate_with(aid, n, |da| k::axpy(da, 1.0, dy));
            }
            if need_b {
                store.accumulate_with(bid, n, |db| k::axpy(db, 1.0, dy));
            }
        }),
    );
    Ok(out)
}

/// Elementwise product of two same-shape tensors.
pub fn mul(g: &Graph, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data: Vec<f32> = a
        .data_f32()
        .iter()
        .zip(b.data_f32())
        .map(|(&x, &y)| x * y)
        .collect();
    let out = Tensor::from_vec(a.shape(), data);
    debug_check_finite("mul", &out);
    let (ac, bc, n) = (a.clone(), b.clone(), a.element_count());
    let (need_a, need_b) = (g.is_traced(a), g.is_traced(b));
    g.record(
        &[a, b],
        &out,
        Box::new(move |dy, store| {
            if need_a {
                let bv = bc.data_f32();
                store.accumulate_with(ac.id(), n, |da| {
                    for i in 0..n {
                        da[i] += dy[i] * bv[i];
                    }
                });
            }
            if need_b {
                let av = ac.data_f32();
                store.accumulate_with(bc.id(), n, |db| {
                    for i in 0..n {
                        db[i] += dy[i] * av[i];
                    }
                });
            }
        }),
    );
    Ok(out)
}

/// Multiplies every element by a constant scalar.
pub fn mul_scalar(g: &Graph, a: &Tensor, s: f32) -> Tensor {
    let data: Vec<f32> = a.data_f32().iter().map(|&x| x * s).collect();
    let out = Tensor::from_vec(a.shape(), data);
    debug_check_finite("mul_scalar", &out);
    let (aid, n) = (a.id(), a.element_count());
    g.record(
        &[a],
        &out,
        Box::new(move |dy, store| {
            store.accumulate_with(aid, n, |da| k::axpy(da, s, dy));
        }),
    );
    out
}

/// Sum of all elements (f64 accumulation internally, f32 result).
pub fn sum(g: &Graph, a: &Tensor) -> Tensor {
    let total: f64 = a.data_f32().iter().map(|&x| f64::from(x)).sum();
    let out = Tensor::scalar(total as f32);
    debug_check_finite("sum", &out);
    let (aid, n) = (a.id(), a.element_count());
    g.record(
        &[a],
        &out,
        Box::new(move |dy, store| {
            store.accumulate_with(aid, n, |da| {
                for d in da.iter_mut() {
                    *d += dy[0];
                }
            });
        }),
    );
    out
}

/// Weighted sum `Σ w_i · a_i` with constant weights (f64 accumulation).
pub fn weighted_sum(g: &Graph, a: &Tensor, w: &[f32]) -> Tensor {
    assert_eq!(w.len(), a.element_count());
    let total: f64 = a
        .data_f32()
        .iter()
        .zip(w)
        .map(|(&x, &wi)| f64::from(x) * f64::from(wi))
        .sum();
    let out = Tensor::scalar(total as f32);
    debug_check_finite("weighted_sum", &out);
    let (aid, n, wv) = (a.id(), a.element_count(), w.to_vec());
    g.record(
        &[a],
        &out,
        Box::new(move |dy, store| {
            store.accumulate_with(aid, n, |da| {
                for (d, &wi) in da.iter_mut().zip(&wv) {
                    *d += dy[0] * wi;
                }
            });
        }),
    );
    out
}

/// GELU activation (tanh approximation), elementwise.
pub fn gelu(g: &Graph, x: &Tensor) -> Tensor {
    let data: Vec<f32> = x.data_f32().iter().map(|&v| k::gelu_scalar(v)).collect();
    let out = Tensor::from_vec(x.shape(), data);
    debug_check_finite("gelu", &out);
    let (xc, n) = (x.clone(), x.element_count());
    g.record(
        &[x],
        &out,
        Box::new(move |dy, store| {
            let xv = xc.data_f32();
            store.accumulate_with(xc.id(), n, |dx| {
                for i in 0..n {
                    dx[i] += dy[i] * k::gelu_grad_scalar(xv[i]);
                }
            });
        }),
    );
    out
}

/// Softmax over the last axis. Rows sum to 1 within 1e-6; outputs in (0, 1).
pub fn softmax(g: &Graph, x: &Tensor) -> Tensor {
    let (rows, d) = dims_2d(x);
    let mut data = x.data_f32().to_vec();
    for r in 0..rows {
        k::softmax_row(&mut data[r * d..(r + 1) * d]);
    }
    let out = Tensor::from_vec(x.shape(), data);
    debug_check_finite("softmax", &out);
    let (xid, oc) = (x.id(), out.clone());
    g.record(
        &[x],
        &out,
        Box::new(move |dy, store| {
            let y = oc.data_f32();
            store.accumulate_with(xid, rows * d, |dx| {
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let dyr = &dy[r * d..(r + 1) * d];
                    let mut dot = 0.0f32;
                    for i in 0..d {
                        dot += dyr[i] * yr[i];
                    }
                    let dxr = &mut dx[r * d..(r + 1) * d];
                    for i in 0..d {
                        dxr[i] += yr[i] * (dyr[i] - dot);
                    }
                }
            });
        }),
    );
    out
}

/// Layer normalization over the last axis with learned gain and bias.
pub fn layer_norm(
    g: &Graph,
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f32,
) -> Result<Tensor, TensorError> {
    let (rows, d) = dims_2d(x);
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let xv = x.data_f32();
    let gv = gain.data_f32();
    let bv = bias.data_f32();
    let mut data = vec![0.0f32; rows * d];
    for r in 0..rows {
        k::layer_norm_row(&mut data[r * d..(r + 1) * d], &xv[r * d..(r + 1) * d], gv, bv, eps);
    }
    let out = Tensor::from_vec(x.shape(), data);
    debug_check_finite("layer_norm", &out);
    let (xc, gc, bc) = (x.clone(), gain.clone(), bias.clone());
    let (need_x, need_g, need_b) = (g.is_traced(x), g.is_traced(gain), g.is_traced(bias));
    g.record(
        &[x, gain, bias],
        &out,
        Box::new(move |dy, store| {
            let xv = xc.data_f32();
            let gv = gc.data_f32();
            // Recompute per-row statistics and normalized values.
            let mut xhat = vec![0.0f32; rows * d];
            let mut inv_std = vec![0.0f32; rows];
            for r in 0..rows {
                let xr = &xv[r * d..(r + 1) * d];
                let mut sum = 0.0f32;
                for &v in xr {
                    sum += v;
                }
                let mean = sum / d as f32;
                let mut var_sum = 0.0f32;
                for &v in xr {
                    let dv = v - mean;
                    var_sum += dv * dv;
                }
                let is = 1.0 / (var_sum / d as f32 + eps).sqrt();
                inv_std[r] = is;
                for i in 0..d {
                    xhat[r * d + i] = (xr[i] - mean) * is;
                }
            }
            if need_g {
                store.accumulate_with(gc.id(), d, |dg| {
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += dy[r * d + i] * xhat[r * d + i];
                        }
                    }
                });
            }
            if need_b {
                store.accumulate_with(bc.id(), d, |db| {
                    for r in 0..rows {
                        for i in 0..d {
                            db[i] += dy[r * d + i];
                        }
                    }
                });
            }
            if !need_x {
                return;
            }
            store.accumulate_with(xc.id(), rows * d, |dx| {
                for r in 0..rows {
                    let dyr = &dy[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    // dŷ = dy * gain; dx = inv_std * (dŷ - mean(dŷ) - x̂ * mean(dŷ·x̂))
                    let mut mean_dyh = 0.0f32;
                    let mut mean_dyh_xh = 0.0f32;
                    for i in 0..d {
                        let dyh = dyr[i] * gv[i];
                        mean_dyh += dyh;
                        mean_dyh_xh += dyh * xh[i];
                    }
                    mean_dyh /= d as f32;
                    mean_dyh_xh /= d as f32;
                    for i in 0..d {
                        let dyh = dyr[i] * gv[i];
                        dx[r * d + i] += inv_std[r] * (dyh - mean_dyh - xh[i] * mean_dyh_xh);
                    }
                }
            });
        }),
    );
    Ok(out)
}

/// Looks up embedding rows: `out[t,:] = emb[ids[t],:]`. Ids must be in range
/// (validated by the model layer).
pub fn embedding(g: &Graph, emb: &Tensor, ids: &[u32]) -> Tensor {
    let (v, d) = dims_2d(emb);
    let ev = emb.data_f32();
    let mut data = vec![0.0f32; ids.len() * d];
    for (t, &id) in ids.iter().enumerate() {
        let id = id as usize;
        assert!(id < v, "token id {id} out of range for vocab {v}");
        data[t * d..(t + 1) * d].copy_from_slice(&ev[id * d..(id + 1) * d]);
    }
    let out = Tensor::from_vec(&[ids.len(), d], data);
    debug_check_finite("embedding", &out);
    let (eid, ids_c) = (emb.id(), ids.to_vec());
    g.record(
        &[emb],
        &out,
        Box::new(move |dy, store| {
            store.accumulate_with(eid, v * d, |de| {
                for (t, &id) in ids_c.iter().enumerate() {
                    let id = id as usize;
                    k::axpy(&mut de[id * d..(id + 1) * d], 1.0, &dy[t * d..(t + 1) * d]);
                }
            });
        }),
    );
    out
}

/// Masked next-token cross-entropy, returned as `(sum, count)`:
/// the summed per-position negative log-likelihood over positions where
/// `mask` is set, plus the number of contributing positions. Callers divide
/// to obtain a mean (see the model layer's `lm_loss`). Returns `None` when
/// the mask selects nothing.
///
/// `logits[t]` is scored against `targets[t]` directly; shifting for the
/// next-token objective is the caller's responsibility.
pub fn cross_entropy_parts(
    g: &Graph,
    logits: &Tensor,
    targets: &[u32],
    mask: &[bool],
) -> Option<(Tensor, usize)> {
    let (t_len, v) = dims_2d(logits);
    assert_eq!(targets.len(), t_len);
    assert_eq!(mask.len(), t_len);
    let lv = logits.data_f32();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for t in 0..t_len {
        if !mask[t] {
            continue;
        }
        let row = &lv[t * v..(t + 1) * v];
        let mut max = f32::NEG_INFINITY;
        for &x in row {
            if x > max {
                max = x;
            }
        }
        let mut sum_exp = 0.0f64;
        for &x in row {
            sum_exp += f64::from((x - max).exp());
        }
        let tgt = targets[t] as usize;
        assert!(tgt < v, "target id {tgt} out of range for vocab {v}");
        total += sum_exp.ln() + f64::from(max) - f64::from(row[tgt]);
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let out = Tensor::scalar(total as f32);
    debug_check_finite("cross_entropy", &out);
    let (lc, targets_c, mask_c) = (logits.clone(), targets.to_vec(), mask.to_vec());
    g.record(
        &[logits],
        &out,
        Box::new(move |dy, store| {
            let lv = lc.data_f32();
            store.accumulate_with(lc.id(), t_len * v, |dl| {
                for t in 0..t_len {
                    if !mask_c[t] {
                        continue; // masked positions get exactly zero gradient
                    }
                    let row = &lv[t * v..(t + 1) * v];
                    let mut max = f32::NEG_INFINITY;
                    for &x in row {
                        if x > max {
                            max = x;
                        }
                    }
                    let mut sum = 0.0f32;
                    let mut p = vec![0.0f32; v];
                    for i in 0..v {
                        p[i] = (row[i] - max).exp();
                        sum += p[i];
                    }
                    let inv = 1.0 / sum;
                    let dl_row = &mut dl[t * v..(t + 1) * v];
                    for i in 0..v {
                        dl_row[i] += dy[0] * p[i] * inv;
                    }
                    dl_row[targets_c[t] as usize] -= dy[0];
                }
            });
        }),
    );
    Some((out, count))
}

/// Mean masked cross-entropy over the positions selected by `mask`.
pub fn cross_entropy(
    g: &Graph,
    logits: &Tensor,
    targets: &[u32],
    mask: &[bool],
) -> Option<Tensor> {
    cross_entropy_parts(g, logits, targets, mask)
        .map(|(sum, count)| mul_scalar(g, &sum, 1.0 / count as f32))
}

/// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
pub fn concat(g: &Graph, parts: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
    assert!(!parts.is_empty() && axis < 2);
    let (m0, n0) = dims_2d(parts[0]);
    let mut rows = m0;
    let mut cols = n0;
    for p in &parts[1..] {
        let (m, n) = dims_2d(p);
        match axis {
            0 if n == n0 => rows += m,
            1 if m == m0 => cols += n,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                })
            }
        }
    }
    let mut data = vec![0.0f32; rows * cols];
    match axis {
        0 => {
            let mut r = 0;
            for p in parts {
                let (m, _) = dims_2d(p);
                data[r * cols..(r + m) * cols].copy_from_slice(p.data_f32());
                r += m;
            }
        }
        _ => {
            let mut c = 0;
            for p in parts {
                let (_, n) = dims_2d(p);
                let pv = p.data_f32();
                for i in 0..rows {
                    data[i * cols + c..i * cols + c + n].copy_from_slice(&pv[i * n..(i + 1) * n]);
                }
                c += n;
            }
        }
    }
    let out = Tensor::from_vec(&[rows, cols], data);
    debug_check_finite("concat", &out);
    let metas: Vec<(usize, usize, usize)> = parts
        .iter()
        .map(|p| {
            let (m, n) = dims_2d(p);
            (p.id(), m, n)
        })
        .collect();
    g.record(
        parts,
        &out,
        Box::new(move |dy, store| {
            match axis {
                0 => {
                    let mut r = 0;
                    for &(id, m, n) in &metas {
                        store.accumulate_with(id, m * n, |dp| {
                            k::axpy(dp, 1.0, &dy[r * cols..(r + m) * cols]);
                        });
                        r += m;
                    }
                }
                _ => {
                    let mut c = 0;
                    for &(id, m, n) in &metas {
                        store.accumulate_with(id, m * n, |dp| {
                            for i in 0..m {
                                for j in 0..n {
                                    dp[i * n + j] += dy[i * cols + c + j];
                                }
                            }
                        });
                        c += n;
                    }
                }
            }
        }),
    );
    Ok(out)
}

/// Contiguous slice of a 2-D tensor along `axis`.
pub fn slice(
    g: &Graph,
    x: &Tensor,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor, TensorError> {
    let (m, n) = dims_2d(x);
    let bound = if axis == 0 { m } else { n };
    if axis > 1 || start + len > bound || len == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "slice",
            lhs: x.shape().to_vec(),
            rhs: vec![axis, start, len],
        });
    }
    let xv = x.data_f32();
    let (out_shape, data) = if axis == 0 {
        (vec![len, n], xv[start * n..(start + len) * n].to_vec())
    } else {
        let mut d = vec![0.0f32; m * len];
        for i in 0..m {
            d[i * len..(i + 1) * len].copy_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        (vec![m, len], d)
    };
    let out = Tensor::from_vec(&out_shape, data);
    debug_check_finite("slice", &out);
    let xid = x.id();
    g.record(
        &[x],
        &out,
        Box::new(move |dy, store| {
            store.accumulate_with(xid, m * n, |dx| {
                if axis == 0 {
                    k::axpy(&mut dx[start * n..(start + len) * n], 1.0, dy);
                } else {
                    for i in 0..m {
                        for j in 0..len {
                            dx[i * n + start + j] += dy[i * len + j];
                        }
                    }
                }
            });
        }),
    );
    Ok(out)
}

/// Matrix transpose of a 2-D tensor.
pub fn transpose(g: &Graph, x: &Tensor) -> Tensor {
    let (m, n) = dims_2d(x);
    let xv = x.data_f32();
    let mut data = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = xv[i * n + j];
        }
    }
    let out = Tensor::from_vec(&[n, m], data);
    debug_check_finite("transpose", &out);
    let xid = x.id();
    g.record(
        &[x],
        &out,
        Box::new(move |dy, store| {
            store.accumulate_with(xid, m * n, |dx| {
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] += dy[j * m + i];
                    }
                }
            });
        }),
    );
    out
}

/// Applies rotary position encoding per head to `x: [T, n_heads*head_dim]`,
/// with row `t` rotated for absolute position `start_pos + t`.
pub fn rotary(g: &Graph, x: &Tensor, n_heads: usize, start_pos: usize) -> Tensor {
    let (t_len, width) = dims_2d(x);
    assert_eq!(width % n_heads, 0);
    let head_dim = width / n_heads;
    assert_eq!(head_dim % 2, 0, "rotary needs an even head dimension");
    let inv_freq = k::rotary_inv_freq(head_dim, 10_000.0);
    let mut data = x.data_f32().to_vec();
    for t in 0..t_len {
        for h in 0..n_heads {
            let off = t * width + h * head_dim;
            k::rotary_row(&mut data[off..off + head_dim], start_pos + t, &inv_freq);
        }
    }
    let out = Tensor::from_vec(x.shape(), data);
    debug_check_finite("rotary", &out);
    let xid = x.id();
    g.record(
        &[x],
        &out,
        Box::new(move |dy, store| {
            store.accumulate_with(xid, t_len * width, |dx| {
                let half = head_dim / 2;
                for t in 0..t_len {
                    for h in 0..n_heads {
                        let off = t * width + h * head_dim;
                        for i in 0..half {
                            let ang = (start_pos + t) as f32 * inv_freq[i];
                            let (sin, cos) = ang.sin_cos();
                            let dy1 = dy[off + i];
                            let dy2 = dy[off + i + half];
                            dx[off + i] += dy1 * cos + dy2 * sin;
                            dx[off + i + half] += -dy1 * sin + dy2 * cos;
                        }
                    }
                }
            });
        }),
    );
    out
}

/// Fused causal multi-query attention.
///
/// `q: [T, n_heads*head_dim]`, `k/v: [T, n_kv_heads*head_dim]`; query head
/// `h` attends over kv head `h / (n_heads / n_kv_heads)`. Scores are scaled
/// by `1/sqrt(head_dim)`, masked causally (row `t` sees columns `0..=t`),
/// softmax-normalized, and applied to `v`. Output is `[T, n_heads*head_dim]`.
pub fn causal_attention(
    g: &Graph,
    q: &Tensor,
    kt: &Tensor,
    v: &Tensor,
    n_heads: usize,
    n_kv_heads: usize,
) -> Result<Tensor, TensorError> {
    let (t_len, qw) = dims_2d(q);
    let (tk, kw) = dims_2d(kt);
    let (tv, vw) = dims_2d(v);
    if qw % n_heads != 0 || kw != vw || tk != t_len || tv != t_len || n_heads % n_kv_heads != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "causal_attention",
            lhs: q.shape().to_vec(),
            rhs: kt.shape().to_vec(),
        });
    }
    let head_dim = qw / n_heads;
    if kw != n_kv_heads * head_dim {
        return Err(TensorError::ShapeMismatch {
            op: "causal_attention",
            lhs: q.shape().to_vec(),
            rhs: kt.shape().to_vec(),
        });
    }
    let group = n_heads / n_kv_heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let qv = q.data_f32();
    let kv = kt.data_f32();
    let vv = v.data_f32();

    // Probabilities stored triangularly packed per head: row t holds t+1 entries.
    let tri = t_len * (t_len + 1) / 2;
    let mut probs = vec![0.0f32; n_heads * tri];
    let mut out = vec![0.0f32; t_len * qw];
    for h in 0..n_heads {
        let kh = (h / group) * head_dim;
        for t in 0..t_len {
            let qr = &qv[t * qw + h * head_dim..t * qw + (h + 1) * head_dim];
            let row_off = h * tri + t * (t + 1) / 2;
            for j in 0..=t {
                let kr = &kv[j * kw + kh..j * kw + kh + head_dim];
                probs[row_off + j] = k::dot_f32(qr, kr) * scale;
            }
            k::softmax_row(&mut probs[row_off..row_off + t + 1]);
            let ctx = &mut out[t * qw + h * head_dim..t * qw + (h + 1) * head_dim];
            for j in 0..=t {
                let vr = &vv[j * vw + kh..j * vw + kh + head_dim];
                k::axpy(ctx, probs[row_off + j], vr);
            }
        }
    }
    let out = Tensor::from_vec(&[t_len, qw], out);
    debug_check_finite("causal_attention", &out);
    let (qc, kc, vc) = (q.clone(), kt.clone(), v.clone());
    g.record(
        &[q, kt, v],
        &out,
        Box::new(move |dy, store| {
            let qv = qc.data_f32();
            let kv = kc.data_f32();
            let vv = vc.data_f32();
            let mut dq = vec![0.0f32; t_len * qw];
            let mut dk = vec![0.0f32; t_len * kw];
            let mut dv = vec![0.0f32; t_len * vw];
            for h in 0..n_heads {
                let kh = (h / group) * head_dim;
                for t in 0..t_len {
                    let row_off = h * tri + t * (t + 1) / 2;
                    let p = &probs[row_off..row_off + t + 1];
                    let dctx = &dy[t * qw + h * head_dim..t * qw + (h + 1) * head_dim];
                    // dp_j = dctx · v_j; s = Σ p_j dp_j; dscore_j = p_j (dp_j − s)
                    let mut dp = vec![0.0f32; t + 1];
                    let mut s = 0.0f32;
                    for j in 0..=t {
                        let vr = &vv[j * vw + kh..j * vw + kh + head_dim];
                        dp[j] = k::dot_f32(dctx, vr);
                        s += p[j] * dp[j];
                    }
                    let qr = &qv[t * qw + h * head_dim..t * qw + (h + 1) * head_dim];
                    for j in 0..=t {
                        let ds = p[j] * (dp[j] - s) * scale;
                        let kr = &kv[j * kw + kh..j * kw + kh + head_dim];
                        k::axpy(
                            &mut dq[t * qw + h * head_dim..t * qw + (h + 1) * head_dim],
                            ds,
                            kr,
                        );
                        k::axpy(&mut dk[j * kw + kh..j * kw + kh + head_dim], ds, qr);
                        k::axpy(&mut dv[j * vw + kh..j * vw + kh + head_dim], p[j], dctx);
                    }
                }
            }
            store.accumulate_with(qc.id(), t_len * qw, |d| k::axpy(d, 1.0, &dq));
            store.accumulate_with(kc.id(), t_len * kw, |d| k::axpy(d, 1.0, &dk));
            store.accumulate_with(vc.id(), t_len * vw, |d| k::axpy(d, 1.0, &dv));
        }),
    );
    Ok(out)
}
