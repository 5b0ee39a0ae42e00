//! Reference forward pass for desk-scale models.
//!
//! Quantized weights are dequantized once when an [`Executor`] is built and
//! all arithmetic runs in `f32`. Dot products accumulate left to right over
//! the input axis, starting from zero, and the bias is added last; `split_sum`
//! adds its children's outputs in child order.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quantizer::{dequantize_values, QuantParams, QuantizedTensor};
use crate::tensor_store::{validate, DType, LayerKind, LayerSpec, ModelGraph, TensorTable};

pub const LAYERNORM_EPS: f32 = 1e-5;

/// A dense activation in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Activation {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Argument(format!(
                "activation shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Activation { shape, values })
    }

    /// Index of the largest entry in the last row (first index on ties).
    ///
    /// For `[seq, classes]` outputs this is the prediction at the final
    /// position; for 1-D outputs it is the plain argmax.
    pub fn argmax_last_row(&self) -> usize {
        let width = self.shape.last().copied().unwrap_or(1).max(1);
        let start = self.values.len().saturating_sub(width);
        let row = &self.values[start..];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// A validated model with all weights decoded to `f32`.
pub struct Executor<'g> {
    graph: &'g ModelGraph,
    weights: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl<'g> Executor<'g> {
    pub fn new(graph: &'g ModelGraph, tensors: &TensorTable) -> Result<Self> {
        let violations = validate(graph, tensors);
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let mut refs: Vec<(&str, Option<QuantParams>)> = Vec::new();
        graph.walk(|l| {
            if let Some(w) = l.weight.as_deref() {
                refs.push((w, l.weight_quant));
            }
            if let Some(b) = l.bias.as_deref() {
                refs.push((b, l.bias_quant));
            }
        });
        let mut weights = HashMap::new();
        for (name, quant) in refs {
            if weights.contains_key(name) {
                continue;
            }
            let t = &tensors[name];
            let values = match (t.dtype(), quant) {
                (DType::F32, _) => t.to_f32()?,
                (_, Some(p)) => dequantize_values(&QuantizedTensor::new(t.clone(), p)?)?,
                (dt, None) => return Err(Error::exec(name, format!("{dt} tensor without parameters"))),
            };
            weights.insert(name.to_owned(), (t.shape().to_vec(), values));
        }
        Ok(Executor { graph, weights })
    }

    pub fn graph(&self) -> &ModelGraph {
        self.graph
    }

    pub fn run(&self, input: &Activation) -> Result<Activation> {
        if input.shape != self.graph.input_shape {
            return Err(Error::exec(
                "<input>",
                format!(
                    "input shape {:?} does not match model input {:?}",
                    input.shape, self.graph.input_shape
                ),
            ));
        }
        check_finite("<input>", &input.values)?;
        let mut x = input.clone();
        for layer in &self.graph.layers {
            x = self.apply(layer, &x)?;
        }
        Ok(x)
    }

    fn tensor(&self, name: &Option<String>) -> Option<&[f32]> {
        name.as_ref().map(|n| self.weights[n].1.as_slice())
    }

    fn shape(&self, name: &Option<String>) -> &[usize] {
        &self.weights[name.as_ref().expect("validated weight")].0
    }

    fn apply(&self, layer: &LayerSpec, x: &Activation) -> Result<Activation> {
        let y = match layer.kind {
            LayerKind::Linear => self.linear(layer, x),
            LayerKind::Conv2d => self.conv2d(layer, x),
            LayerKind::Embedding => self.embedding(layer, x)?,
            LayerKind::Layernorm => self.layernorm(layer, x),
            LayerKind::Relu => map(x, |v| v.max(0.0)),
            LayerKind::Gelu => map(x, gelu),
            LayerKind::SoftmaxAttention => self.attention(layer, x)?,
            LayerKind::SplitSum => {
                let mut parts = layer.children.iter().map(|c| self.apply(c, x));
                let mut acc = parts.next().expect("validated arity")?;
                for p in parts {
                    for (a, b) in acc.values.iter_mut().zip(p?.values) {
                        *a += b;
                    }
                }
                acc
            }
        };
        check_finite(&layer.name, &y.values)?;
        Ok(y)
    }

    fn linear(&self, layer: &LayerSpec, x: &Activation) -> Activation {
        let w = self.tensor(&layer.weight).unwrap();
        let b = self.tensor(&layer.bias);
        let flatten = layer.attr("flatten") == Some(1);
        let ws = self.shape(&layer.weight);
        let (out_f, in_f) = (ws[0], ws[1]);
        let rows = if flatten {
            1
        } else {
            x.shape[..x.shape.len() - 1].iter().product()
        };
        let mut out = Vec::with_capacity(rows * out_f);
        for r in 0..rows {
            let xr = &x.values[r * in_f..(r + 1) * in_f];
            for o in 0..out_f {
                let wr = &w[o * in_f..(o + 1) * in_f];
                let mut acc = 0.0f32;
                for (wi, xi) in wr.iter().zip(xr) {
                    acc += wi * xi;
                }
                if let Some(b) = b {
                    acc += b[o];
                }
                out.push(acc);
            }
        }
        let shape = if flatten {
            vec![out_f]
        } else {
            let mut s = x.shape.clone();
            *s.last_mut().unwrap() = out_f;
            s
        };
        Activation { shape, values: out }
    }

    fn conv2d(&self, layer: &LayerSpec, x: &Activation) -> Activation {
        let w = self.tensor(&layer.weight).unwrap();
        let b = self.tensor(&layer.bias);
        let stride = layer.attr("stride").unwrap_or(1) as usize;
        let pad = layer.attr("padding").unwrap_or(0) as isize;
        let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
        let ks = self.shape(&layer.weight);
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        let ho = (h + 2 * pad as usize - kh) / stride + 1;
        let wo = (wd + 2 * pad as usize - kw) / stride + 1;
        let mut out = vec![0.0f32; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for c in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let wv = w[((o * ci + c) * kh + ky) * kw + kx];
                                acc += wv * x.values[(c * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b[o];
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        Activation {
            shape: vec![co, ho, wo],
            values: out,
        }
    }

    fn embedding(&self, layer: &LayerSpec, x: &Activation) -> Result<Activation> {
        let table = self.tensor(&layer.weight).unwrap();
        let (vocab, d) = (self.shape(&layer.weight)[0], self.shape(&layer.weight)[1]);
        let mut out = Vec::with_capacity(x.values.len() * d);
        for &id in &x.values {
            if id.fract() != 0.0 || id < 0.0 || id as usize >= vocab {
                return Err(Error::exec(
                    &layer.name,
                    format!("token id {id} outside vocabulary of {vocab}"),
                ));
            }
            let i = id as usize;
            out.extend_from_slice(&table[i * d..(i + 1) * d]);
        }
        Ok(Activation {
            shape: vec![x.values.len(), d],
            values: out,
        })
    }

    fn layernorm(&self, layer: &LayerSpec, x: &Activation) -> Activation {
        let gamma = self.tensor(&layer.weight).unwrap();
        let beta = self.tensor(&layer.bias);
        let d = gamma.len();
        let mut out = Vec::with_capacity(x.values.len());
        for row in x.values.chunks(d) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (i, &v) in row.iter().enumerate() {
                let b = beta.map_or(0.0, |b| b[i]);
                out.push((v - mean) * inv * gamma[i] + b);
            }
        }
        Activation {
            shape: x.shape.clone(),
            values: out,
        }
    }

    fn attention(&self, layer: &LayerSpec, x: &Activation) -> Result<Activation> {
        let q = self.apply(&layer.children[0], x)?;
        let k = self.apply(&layer.children[1], x)?;
        let v = self.apply(&layer.children[2], x)?;
        let head = layer.attr("head_dim").unwrap() as usize;
        let seq = x.shape[0];
        let scale = 1.0 / (head as f32).sqrt();
        let mut ctx = vec![0.0f32; seq * head];
        let mut scores = vec![0.0f32; seq];
        for i in 0..seq {
            let qi = &q.values[i * head..(i + 1) * head];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k.values[j * head..(j + 1) * head];
                let mut acc = 0.0f32;
                for (a, b) in qi.iter().zip(kj) {
                    acc += a * b;
                }
                *s = acc * scale;
            }
            softmax_in_place(&mut scores);
            let ci = &mut ctx[i * head..(i + 1) * head];
            for (j, &p) in scores.iter().enumerate() {
                for (c, vv) in ci.iter_mut().zip(&v.values[j * head..(j + 1) * head]) {
                    *c += p * vv;
                }
            }
        }
        let ctx = Activation {
            shape: vec![seq, head],
            values: ctx,
        };
        check_finite(&layer.name, &ctx.values)?;
        self.apply(&layer.children[3], &ctx)
    }
}

pub fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn map(x: &Activation, f: impl Fn(f32) -> f32) -> Activation {
    Activation {
        shape: x.shape.clone(),
        values: x.values.iter().map(|&v| f(v)).collect(),
    }
}

fn check_finite(layer: &str, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::exec(
            layer,
            format!("non-finite value {} at index {i}", values[i]),
        )),
        None => Ok(()),
    }
}

/// One-shot forward pass.
pub fn forward(graph: &ModelGraph, tensors: &TensorTable, input: &Activation) -> Result<Activation> {
    Executor::new(graph, tensors)?.run(input)
}

/// How closely two models agree over a batch of inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub samples: usize,
    pub max_abs_deviation: f64,
    /// Fraction of inputs whose final-row argmax matches.
    pub agreement: f64,
}

pub fn batch_agreement(a: &Executor, b: &Executor, inputs: &[Activation]) -> Result<Agreement> {
    let per_input: Vec<(f64, bool)> = inputs
        .par_iter()
        .map(|x| {
            let (ya, yb) = (a.run(x)?, b.run(x)?);
            if ya.shape != yb.shape {
                return Err(Error::Comparison(format!(
                    "output shapes differ: {:?} vs {:?}",
                    ya.shape, yb.shape
                )));
            }
            let dev = ya
                .values
                .iter()
                .zip(&yb.values)
                .map(|(p, q)| (*p as f64 - *q as f64).abs())
                .fold(0.0, f64::max);
            Ok((dev, ya.argmax_last_row() == yb.argmax_last_row()))
        })
        .collect::<Result<_>>()?;
    let samples = per_input.len();
    let max_abs_deviation = per_input.iter().map(|p| p.0).fold(0.0, f64::max);
    let agree = per_input.iter().filter(|p| p.1).count();
    Ok(Agreement {
        samples,
        max_abs_deviation,
        agreement: if samples == 0 {
            1.0
        } else {
            agree as f64 / samples as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{insert_tensor, LayerKind, LayerSpec, Tensor};

    #[test]
    fn activation_shape_must_match() {
        assert!(matches!(
            Activation::new(vec![2, 2], vec![0.0; 3]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn argmax_uses_last_row_and_first_tie() {
        let a = Activation::new(vec![2, 3], vec![9.0, 0.0, 0.0, 1.0, 4.0, 4.0]).unwrap();
        assert_eq!(a.argmax_last_row(), 1);
        assert_eq!(
            Activation::new(vec![3], vec![2.0, 2.0, 1.0])
                .unwrap()
                .argmax_last_row(),
            0
        );
    }

    #[test]
    fn softmax_is_shift_stable() {
        let mut a = [1000.0f32, 1000.0, 1000.0, 1000.0];
        softmax_in_place(&mut a);
        assert_eq!(a, [0.25; 4]);
        let mut b = [0.0f32, (2.0f32).ln()];
        softmax_in_place(&mut b);
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-6 && (b[1] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
        assert_eq!(gelu(10.0), 10.0);
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let mut t = TensorTable::new();
        insert_tensor(&mut t, Tensor::from_f32("g", vec![4], &[1.0; 4]).unwrap());
        let g = ModelGraph::new(
            vec![2, 4],
            vec![LayerSpec::new("ln", LayerKind::Layernorm).with_tensors("g", None)],
        );
        let x = Activation::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap();
        let y = forward(&g, &t, &x).unwrap();
        for row in y.values.chunks(4) {
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn embedding_rejects_unknown_ids() {
        let mut t = TensorTable::new();
        insert_tensor(
            &mut t,
            Tensor::from_f32("e", vec![3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        );
        let g = ModelGraph::new(
            vec![2],
            vec![LayerSpec::new("emb", LayerKind::Embedding).with_tensors("e", None)],
        );
        let y = forward(&g, &t, &Activation::new(vec![2], vec![2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(y.values, vec![4.0, 5.0, 0.0, 1.0]);
        for bad in [3.0, -1.0, 0.5] {
            let x = Activation::new(vec![2], vec![0.0, bad]).unwrap();
            assert!(matches!(forward(&g, &t, &x), Err(Error::Execution { .. })));
        }
    }

    #[test]
    fn wrong_input_shape_is_an_execution_error() {
        let g = ModelGraph::new(vec![3], vec![LayerSpec::new("act", LayerKind::Relu)]);
        let x = Activation::new(vec![4], vec![0.0; 4]).unwrap();
        assert!(matches!(
            forward(&g, &TensorTable::new(), &x),
            Err(Error::Execution { .. })
        ));
    }
}
