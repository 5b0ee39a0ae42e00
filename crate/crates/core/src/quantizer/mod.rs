//! Per-tensor affine quantization of weights and biases.
//!
//! `q = clamp(round(S * x) + Z, -2^(b-1), 2^(b-1) - 1)` with
//! `S = (2^b - 1) / (alpha - beta)` and `Z = -2^(b-1) - round(S * beta)`.
//! Ranges always include zero so that zeros (in particular the masked-out
//! entries of split layers) dequantize to exactly `0.0`.

mod params;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use params::{check_bits, int_range, round_half_away, QuantParams, SUPPORTED_BITS};

use crate::error::{Error, Result};
use crate::tensor_store::{validate, DType, LayerSpec, ModelGraph, Tensor, TensorTable};

/// Integer payload plus the parameters needed to map it back to reals.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    /// Packed I8 / I4x2 / I2x4 tensor carrying the original name and shape.
    pub qdata: Tensor,
    pub params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(qdata: Tensor, params: QuantParams) -> Result<Self> {
        if qdata.dtype() != DType::for_bits(params.bits).unwrap_or(DType::F32) {
            return Err(Error::Argument(format!(
                "tensor `{}` is {} but parameters declare {} bits",
                qdata.name(),
                qdata.dtype(),
                params.bits
            )));
        }
        Ok(QuantizedTensor { qdata, params })
    }

    pub fn shape(&self) -> &[usize] {
        self.qdata.shape()
    }
}

/// Zero-inclusive range `[min(0, min t), max(0, max t)]`.
///
/// An all-zero tensor yields `(0, 0)`, which [`QuantParams::new`] maps to the
/// degenerate `S = 1, Z = 0` parameters.
pub fn compute_range(t: &Tensor) -> Result<(f64, f64)> {
    range_of(&t.to_f32()?)
}

pub fn range_of(values: &[f32]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::DegenerateInput("empty tensor has no range".into()));
    }
    let (mut lo, mut hi) = (0.0f32, 0.0f32);
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Argument(format!("non-finite value {v}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo as f64, hi as f64))
}

pub fn quant_params(beta: f64, alpha: f64, bits: u8) -> Result<QuantParams> {
    QuantParams::new(beta, alpha, bits)
}

pub fn quantize_values(values: &[f32], bits: u8) -> Result<(Vec<i8>, QuantParams)> {
    check_bits(bits)?;
    let (beta, alpha) = if values.is_empty() {
        (0.0, 0.0)
    } else {
        range_of(values)?
    };
    let params = QuantParams::new(beta, alpha, bits)?;
    Ok((values.iter().map(|&x| params.quantize(x)).collect(), params))
}

pub fn quantize_tensor(t: &Tensor, bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    let (q, params) = quantize_values(&t.to_f32()?, bits)?;
    let qdata = Tensor::from_ints(t.name(), t.shape().to_vec(), bits, &q)?;
    Ok(QuantizedTensor { qdata, params })
}

pub fn dequantize_values(q: &QuantizedTensor) -> Result<Vec<f32>> {
    Ok(q.qdata
        .to_ints()?
        .into_iter()
        .map(|v| q.params.dequantize(v))
        .collect())
}

pub fn dequantize_tensor(q: &QuantizedTensor) -> Result<Tensor> {
    Tensor::from_f32(q.qdata.name(), q.shape().to_vec(), &dequantize_values(q)?)
}

/// Quantizes every F32 weight and bias referenced by the graph, each with its
/// own parameters. Tensors already stored as integers are left alone.
pub fn quantize_model(
    graph: &ModelGraph,
    tensors: &TensorTable,
    bits: u8,
) -> Result<(ModelGraph, TensorTable)> {
    check_bits(bits)?;
    let violations = validate(graph, tensors);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }

    let mut names = Vec::new();
    graph.walk(|l| {
        for n in [&l.weight, &l.bias].into_iter().flatten() {
            if tensors[n].dtype() == DType::F32 {
                names.push(n.clone());
            }
        }
    });
    names.sort();
    names.dedup();

    let quantized: BTreeMap<String, QuantizedTensor> = names
        .par_iter()
        .map(|n| quantize_tensor(&tensors[n], bits).map(|q| (n.clone(), q)))
        .collect::<Result<_>>()?;

    let mut out_graph = graph.clone();
    for layer in &mut out_graph.layers {
        attach_params(layer, &quantized);
    }
    let mut out_tensors = tensors.clone();
    for (name, q) in quantized {
        out_tensors.insert(name, q.qdata);
    }
    Ok((out_graph, out_tensors))
}

fn attach_params(layer: &mut LayerSpec, quantized: &BTreeMap<String, QuantizedTensor>) {
    if let Some(q) = layer.weight.as_ref().and_then(|n| quantized.get(n)) {
        layer.weight_quant = Some(q.params);
    }
    if let Some(q) = layer.bias.as_ref().and_then(|n| quantized.get(n)) {
        layer.bias_quant = Some(q.params);
    }
    for c in &mut layer.children {
        attach_params(c, quantized);
    }
}

/// Quantization error of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub tensor: String,
    pub bits: u8,
    pub numel: usize,
    pub beta: f64,
    pub alpha: f64,
    pub scale: f64,
    pub zero_point: i32,
    pub mse: f64,
    pub max_abs_error: f64,
}

pub fn error_stats(original: &Tensor, q: &QuantizedTensor) -> Result<ErrorStats> {
    if original.shape() != q.shape() {
        return Err(Error::Argument(format!(
            "shape mismatch for `{}`: {:?} vs {:?}",
            original.name(),
            original.shape(),
            q.shape()
        )));
    }
    let x = original.to_f32()?;
    let xq = dequantize_values(q)?;
    let (mse, max_abs_error) = mse_and_max(&x, &xq);
    Ok(ErrorStats {
        tensor: original.name().to_owned(),
        bits: q.params.bits,
        numel: x.len(),
        beta: q.params.beta,
        alpha: q.params.alpha,
        scale: q.params.scale,
        zero_point: q.params.zero_point,
        mse,
        max_abs_error,
    })
}

pub fn mse_and_max(a: &[f32], b: &[f32]) -> (f64, f64) {
    let mut sq = 0.0f64;
    let mut max = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = (x as f64 - y as f64).abs();
        sq += d * d;
        max = max.max(d);
    }
    let mse = if a.is_empty() { 0.0 } else { sq / a.len() as f64 };
    (mse, max)
}
