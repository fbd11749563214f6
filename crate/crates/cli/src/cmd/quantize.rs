//! `peftlab quantize`: 4-bit inspection and conversion of checkpoints.

use peftlab::model::{ModelHandle, WeightStorage};
use peftlab::quant::{dequantize, quantize, QuantizedTensor, QuantSpec};
use peftlab::tensor::DType;

use crate::cmd::load_model;
use crate::{emit, internal, CliError, CliResult, QuantizeArgs};

pub fn run(args: &QuantizeArgs) -> CliResult<()> {
    let spec = QuantSpec {
        block_size: args.block_size,
        double_quant: !args.no_double_quant,
        dq_group_size: args.dq_group_size,
    };
    if spec.block_size == 0 || spec.block_size % 2 != 0 {
        return Err(CliError::Usage(
            "--block-size must be a positive even number".into(),
        ));
    }
    if spec.dq_group_size == 0 {
        return Err(CliError::Usage("--dq-group-size must be positive".into()));
    }
    if !args.inspect && args.out.is_none() {
        return Err(CliError::Usage(
            "nothing to do: pass --inspect and/or --out".into(),
        ));
    }

    let loaded = load_model(&args.ckpt, None)?;

    if args.inspect {
        emit(&inspect_table(&loaded.model, spec).map_err(internal)?)?;
    }

    if let Some(out) = &args.out {
        if loaded.model.quant.is_some() {
            return Err(CliError::Usage(
                "checkpoint base is already quantized; nothing to convert".into(),
            ));
        }
        let mut model = loaded.model.clone();
        model.quantize_base(spec).map_err(internal)?;
        peftlab::train::save_checkpoint(&model, loaded.train.as_ref(), out, false)
            .map_err(internal)?;
        eprintln!("quantized checkpoint written to {}", out.display());
    }
    Ok(())
}

fn bits_per_param(q: &QuantizedTensor) -> f64 {
    let r = q.bits_per_parameter();
    *r.numer() as f64 / *r.denom() as f64
}

/// Per-tensor table: storage kind, shape, bits per parameter, the max
/// absolute round-trip error (dense matrices are quantized on the fly to
/// measure it; already-quantized tensors have no reference), and bytes.
fn inspect_table(
    model: &ModelHandle,
    spec: QuantSpec,
) -> Result<String, peftlab::quant::QuantError> {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>10} {:>12} {:>12} {:>12} {:>10}\n",
        "tensor", "kind", "shape", "bits/param", "max err", "bytes"
    ));
    let mut quant_bits: u64 = 0;
    let mut quant_elems: u64 = 0;
    let mut total_bytes: usize = 0;
    let mut dense_equiv_bytes: usize = 0;

    for name in model.weight_names() {
        let entry = model.weight(&name);
        let n = entry.storage.element_count();
        dense_equiv_bytes += 4 * n;
        let shape_s = match entry.storage.shape() {
            [a, b] => format!("{a}x{b}"),
            [a] => format!("{a}"),
            other => format!("{other:?}"),
        };
        match &entry.storage {
            WeightStorage::Quantized(q) => {
                let bytes = q.storage_bytes();
                total_bytes += bytes;
                quant_bits += bytes as u64 * 8;
                quant_elems += n as u64;
                out.push_str(&format!(
                    "{:<22} {:>10} {:>12} {:>12.4} {:>12} {:>10}\n",
                    name,
                    "nf4",
                    shape_s,
                    bits_per_param(q),
                    "-",
                    bytes
                ));
            }
            WeightStorage::Dense(t) => {
                let is_target = entry.storage.is_matrix() && name.starts_with("layer.");
                if is_target {
                    let q = quantize(t, spec.block_size, spec.double_quant, spec.dq_group_size)?;
                    let back = dequantize(&q, DType::F32);
                    let orig = t.to_f32_vec();
                    let rec = back.to_f32_vec();
                    let max_err = orig
                        .iter()
                        .zip(rec.iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f32, f32::max);
                    let bytes = q.storage_bytes();
                    total_bytes += bytes;
                    quant_bits += bytes as u64 * 8;
                    quant_elems += n as u64;
                    out.push_str(&format!(
                        "{:<22} {:>10} {:>12} {:>12.4} {:>12.6} {:>10}\n",
                        name,
                        "f32->nf4",
                        shape_s,
                        bits_per_param(&q),
                        max_err,
                        bytes
                    ));
                } else {
                    let bytes = 4 * n;
                    total_bytes += bytes;
                    out.push_str(&format!(
                        "{:<22} {:>10} {:>12} {:>12} {:>12} {:>10}\n",
                        name, "f32", shape_s, "32", "-", bytes
                    ));
                }
            }
        }
    }
    if quant_elems > 0 {
        let avg = quant_bits as f64 / quant_elems as f64;
        out.push_str(&format!(
            "quantized matrices: \u{2248}{avg:.2} bits/param over {quant_elems} parameters\n"
        ));
    }
    out.push_str(&format!(
        "total storage: {total_bytes} bytes ({dense_equiv_bytes} bytes dense f32 equivalent)\n"
    ));
    Ok(out)
}
