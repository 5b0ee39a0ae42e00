//! Rewrites linear and conv2d layers into `split_sum` layers.
//!
//! The weight and bias values of a layer are clustered jointly into lower,
//! middle and upper groups. Sublayer `i` keeps the values labelled `i` and
//! zeros everywhere else, so the three sublayer weights add up to the
//! original one and, by linearity, so do their outputs.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::clustering::{kmeans3, ClusterAssignment, CLUSTERS, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::inference::{batch_agreement, Activation, Executor};
use crate::quantizer::{dequantize_values, range_of, QuantizedTensor};
use crate::tensor_store::{
    insert_tensor, validate, DType, LayerKind, LayerSpec, ModelGraph, Tensor, TensorTable,
};

/// Layers with fewer weight elements than this are left alone.
pub const DEFAULT_MIN_ELEMS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub min_elems: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            min_elems: DEFAULT_MIN_ELEMS,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

pub fn sublayer_name(base: &str, index: usize) -> String {
    format!("{base}.split{index}")
}

/// Copies each value into the slot of its label and zeros into the others.
pub fn mask_by_label(values: &[f32], labels: &[u8]) -> [Vec<f32>; CLUSTERS] {
    std::array::from_fn(|i| {
        values
            .iter()
            .zip(labels)
            .map(|(&v, &l)| if l as usize == i { v } else { 0.0 })
            .collect()
    })
}

/// How one layer was split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub layer_id: String,
    pub assignment: ClusterAssignment,
    pub weight_names: [String; CLUSTERS],
    pub bias_names: Option<[String; CLUSTERS]>,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum SplitOutcome {
    Split {
        layer: LayerSpec,
        tensors: Vec<Tensor>,
        plan: SplitPlan,
    },
    Unchanged {
        reason: String,
    },
}

/// Splits one linear or conv2d layer.
///
/// Returns [`SplitOutcome::Unchanged`] when the layer is too small or its
/// values have fewer than three distinct entries.
pub fn split_layer(
    layer: &LayerSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
    opts: &SplitOptions,
) -> Result<SplitOutcome> {
    if !layer.kind.is_splittable() {
        return Err(Error::Argument(format!(
            "cannot split {} layer `{}`",
            layer.kind, layer.name
        )));
    }
    if layer.weight.as_deref() != Some(weight.name()) || layer.bias.as_deref() != bias.map(Tensor::name) {
        return Err(Error::Argument(format!(
            "tensors do not match the references of layer `{}`",
            layer.name
        )));
    }
    let w = weight.to_f32()?;
    let b = bias.map(Tensor::to_f32).transpose()?.unwrap_or_default();
    if w.len() < opts.min_elems {
        return Ok(SplitOutcome::Unchanged {
            reason: format!("{} weights, below the minimum of {}", w.len(), opts.min_elems),
        });
    }

    let mut joint = Vec::with_capacity(w.len() + b.len());
    joint.extend_from_slice(&w);
    joint.extend_from_slice(&b);
    let assignment = match kmeans3(&joint, opts.max_iter, opts.tol) {
        Ok(a) => a,
        Err(Error::DegenerateInput(reason)) => return Ok(SplitOutcome::Unchanged { reason }),
        Err(e) => return Err(e),
    };
    let (w_labels, b_labels) = assignment.labels.split_at(w.len());

    let weight_names: [String; CLUSTERS] = std::array::from_fn(|i| sublayer_name(weight.name(), i));
    let bias_names = bias.map(|t| std::array::from_fn(|i| sublayer_name(t.name(), i)));

    let mut tensors = Vec::with_capacity(2 * CLUSTERS);
    for (i, masked) in mask_by_label(&w, w_labels).iter().enumerate() {
        tensors.push(Tensor::from_f32(
            &weight_names[i],
            weight.shape().to_vec(),
            masked,
        )?);
    }
    if let (Some(bias), Some(names)) = (bias, &bias_names) {
        for (i, masked) in mask_by_label(&b, b_labels).iter().enumerate() {
            tensors.push(Tensor::from_f32(&names[i], bias.shape().to_vec(), masked)?);
        }
    }

    let children = (0..CLUSTERS)
        .map(|i| LayerSpec {
            name: sublayer_name(&layer.name, i),
            kind: layer.kind,
            weight: Some(weight_names[i].clone()),
            bias: bias_names.as_ref().map(|n| n[i].clone()),
            weight_quant: None,
            bias_quant: None,
            attrs: layer.attrs.clone(),
            children: Vec::new(),
        })
        .collect();
    let split = LayerSpec::new(&layer.name, LayerKind::SplitSum).with_children(children);

    Ok(SplitOutcome::Split {
        layer: split,
        tensors,
        plan: SplitPlan {
            layer_id: layer.name.clone(),
            assignment,
            weight_names,
            bias_names,
        },
    })
}

/// Per-layer summary of a split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub layer: String,
    pub numel: usize,
    pub centroids: [f64; CLUSTERS],
    pub boundaries: [f64; CLUSTERS - 1],
    pub counts: [usize; CLUSTERS],
    /// Zero-inclusive `[min, max]` of the original weight and bias values.
    pub range: (f64, f64),
    /// Zero-inclusive range of each sublayer.
    pub sub_ranges: [(f64, f64); CLUSTERS],
    /// Original range width over each sublayer's width; `None` for an all-zero sublayer.
    pub narrowing: [Option<f64>; CLUSTERS],
}

impl SplitReport {
    fn new(plan: &SplitPlan, joint: &[f32]) -> Result<Self> {
        let range = range_of(joint)?;
        let masked = mask_by_label(joint, &plan.assignment.labels);
        let mut sub_ranges = [(0.0, 0.0); CLUSTERS];
        for (r, m) in sub_ranges.iter_mut().zip(&masked) {
            *r = range_of(m)?;
        }
        let width = range.1 - range.0;
        let narrowing = sub_ranges.map(|(lo, hi)| (hi > lo).then(|| width / (hi - lo)));
        Ok(SplitReport {
            layer: plan.layer_id.clone(),
            numel: joint.len(),
            centroids: plan.assignment.centroids,
            boundaries: plan.assignment.boundaries,
            counts: plan.assignment.counts(),
            range,
            sub_ranges,
            narrowing,
        })
    }
}

/// Location of a splittable layer: top-level index, then child index for
/// attention projections.
type LayerPath = (usize, Option<usize>);

fn layer_at(layers: &[LayerSpec], path: LayerPath) -> &LayerSpec {
    match path {
        (i, None) => &layers[i],
        (i, Some(j)) => &layers[i].children[j],
    }
}

/// Splits every eligible layer of a model.
///
/// Top-level linear/conv2d layers and the linear projections inside
/// attention blocks are split. Embeddings, normalization, activations and
/// existing `split_sum` layers are left untouched. Original tensors that are
/// no longer referenced are dropped from the table.
pub fn split_model(
    graph: &ModelGraph,
    tensors: &TensorTable,
    opts: &SplitOptions,
) -> Result<(ModelGraph, TensorTable, Vec<SplitReport>)> {
    let violations = validate(graph, tensors);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }

    let mut targets: Vec<LayerPath> = Vec::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        match layer.kind {
            k if k.is_splittable() => targets.push((i, None)),
            LayerKind::SoftmaxAttention => targets.extend(
                layer
                    .children
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.kind.is_splittable())
                    .map(|(j, _)| (i, Some(j))),
            ),
            _ => {}
        }
    }

    let outcomes: Vec<(LayerPath, SplitOutcome)> = targets
        .par_iter()
        .map(|&path| {
            let layer = layer_at(&graph.layers, path);
            let weight = &tensors[layer.weight.as_deref().expect("validated")];
            let bias = layer.bias.as_deref().map(|b| &tensors[b]);
            if weight.dtype() != DType::F32 || bias.is_some_and(|b| b.dtype() != DType::F32) {
                return Ok((
                    path,
                    SplitOutcome::Unchanged {
                        reason: "layer is already quantized".into(),
                    },
                ));
            }
            split_layer(layer, weight, bias, opts).map(|o| (path, o))
        })
        .collect::<Result<_>>()?;

    let mut out_graph = graph.clone();
    let mut out_tensors = tensors.clone();
    let mut reports = Vec::new();
    for (path, outcome) in outcomes {
        let SplitOutcome::Split {
            layer,
            tensors: new,
            plan,
        } = outcome
        else {
            continue;
        };
        let original = layer_at(&graph.layers, path);
        let mut joint = tensors[original.weight.as_deref().unwrap()].to_f32()?;
        if let Some(b) = original.bias.as_deref() {
            joint.extend(tensors[b].to_f32()?);
        }
        reports.push(SplitReport::new(&plan, &joint)?);
        for t in new {
            if out_tensors.contains_key(t.name()) {
                return Err(Error::Argument(format!(
                    "sublayer tensor name `{}` already in use",
                    t.name()
                )));
            }
            insert_tensor(&mut out_tensors, t);
        }
        match path {
            (i, None) => out_graph.layers[i] = layer,
            (i, Some(j)) => out_graph.layers[i].children[j] = layer,
        }
    }

    let mut before = BTreeSet::new();
    graph.walk(|l| before.extend(l.tensor_refs().into_iter().map(str::to_owned)));
    let mut after = BTreeSet::new();
    out_graph.walk(|l| after.extend(l.tensor_refs().into_iter().map(str::to_owned)));
    for stale in before.difference(&after) {
        out_tensors.remove(stale);
    }

    debug_assert!(validate(&out_graph, &out_tensors).is_empty());
    Ok((out_graph, out_tensors, reports))
}

/// Result of comparing a split model against its source.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnsplitReport {
    pub split_layers: usize,
    /// Sublayer weights and biases sum bit-exactly to the originals.
    pub reconstruction_exact: bool,
    pub mismatched_layers: Vec<String>,
    pub samples: usize,
    pub max_abs_deviation: f64,
    pub agreement: f64,
}

/// Checks weight reconstruction of every `split_sum` and the forward-output
/// deviation over `inputs`.
///
/// Reconstruction adds the three sublayer values in order in `f32` and
/// compares bit patterns, treating `+0.0` and `-0.0` as equal.
pub fn unsplit_check(
    original: (&ModelGraph, &TensorTable),
    split: (&ModelGraph, &TensorTable),
    inputs: &[Activation],
) -> Result<UnsplitReport> {
    let (og, ot) = original;
    let (sg, st) = split;
    if og.input_shape != sg.input_shape {
        return Err(Error::Comparison(format!(
            "input shapes differ: {:?} vs {:?}",
            og.input_shape, sg.input_shape
        )));
    }
    let mut cmp = Reconstruction {
        ot,
        st,
        split_layers: 0,
        mismatched: Vec::new(),
    };
    cmp.layers(&og.layers, &sg.layers)?;

    let a = Executor::new(og, ot)?;
    let b = Executor::new(sg, st)?;
    let agreement = batch_agreement(&a, &b, inputs)?;
    Ok(UnsplitReport {
        split_layers: cmp.split_layers,
        reconstruction_exact: cmp.mismatched.is_empty(),
        mismatched_layers: cmp.mismatched,
        samples: agreement.samples,
        max_abs_deviation: agreement.max_abs_deviation,
        agreement: agreement.agreement,
    })
}

struct Reconstruction<'a> {
    ot: &'a TensorTable,
    st: &'a TensorTable,
    split_layers: usize,
    mismatched: Vec<String>,
}

impl Reconstruction<'_> {
    fn layers(&mut self, original: &[LayerSpec], split: &[LayerSpec]) -> Result<()> {
        if original.len() != split.len() {
            return Err(Error::Comparison(format!(
                "layer counts differ: {} vs {}",
                original.len(),
                split.len()
            )));
        }
        for (o, s) in original.iter().zip(split) {
            self.layer(o, s)?;
        }
        Ok(())
    }

    fn layer(&mut self, o: &LayerSpec, s: &LayerSpec) -> Result<()> {
        if s.kind == LayerKind::SplitSum && o.kind.is_splittable() {
            self.split_layers += 1;
            if s.children.iter().any(|c| c.kind != o.kind) {
                return Err(Error::Comparison(format!(
                    "`{}` split into a different layer kind",
                    o.name
                )));
            }
            let weights_ok =
                self.sums_match(&o.weight, o.weight_quant, s, |c| (&c.weight, c.weight_quant))?;
            let bias_ok = self.sums_match(&o.bias, o.bias_quant, s, |c| (&c.bias, c.bias_quant))?;
            if !(weights_ok && bias_ok) {
                self.mismatched.push(o.name.clone());
            }
            return Ok(());
        }
        if o.kind != s.kind {
            return Err(Error::Comparison(format!(
                "layer `{}` is {} in the original but {} in the split model",
                o.name, o.kind, s.kind
            )));
        }
        self.layers(&o.children, &s.children)
    }

    fn sums_match(
        &self,
        name: &Option<String>,
        quant: Option<crate::quantizer::QuantParams>,
        split: &LayerSpec,
        pick: impl Fn(&LayerSpec) -> (&Option<String>, Option<crate::quantizer::QuantParams>),
    ) -> Result<bool> {
        let parts: Vec<_> = split.children.iter().map(&pick).collect();
        let Some(name) = name else {
            return Ok(parts.iter().all(|(n, _)| n.is_none()));
        };
        if parts.iter().any(|(n, _)| n.is_none()) {
            return Ok(false);
        }
        let reference = decode(self.ot, name, quant)?;
        let mut sum = vec![0.0f32; reference.len()];
        for (n, q) in parts {
            let v = decode(self.st, n.as_ref().unwrap(), q)?;
            if v.len() != sum.len() {
                return Ok(false);
            }
            for (acc, x) in sum.iter_mut().zip(v) {
                *acc += x;
            }
        }
        Ok(sum
            .iter()
            .zip(&reference)
            .all(|(a, b)| a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0)))
    }
}

fn decode(
    tensors: &TensorTable,
    name: &str,
    quant: Option<crate::quantizer::QuantParams>,
) -> Result<Vec<f32>> {
    let t = tensors
        .get(name)
        .ok_or_else(|| Error::Comparison(format!("tensor `{name}` missing")))?;
    match (t.dtype(), quant) {
        (DType::F32, _) => t.to_f32(),
        (_, Some(p)) => dequantize_values(&QuantizedTensor::new(t.clone(), p)?),
        (dt, None) => Err(Error::Comparison(format!(
            "{dt} tensor `{name}` has no parameters"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::forward;

    fn table(ts: Vec<Tensor>) -> TensorTable {
        let mut tt = TensorTable::new();
        for t in ts {
            insert_tensor(&mut tt, t);
        }
        tt
    }

    #[test]
    fn one_by_three_example() {
        let w = Tensor::from_f32("w", vec![1, 3], &[1.0, 5.0, 9.0]).unwrap();
        let b = Tensor::from_f32("b", vec![1], &[0.0]).unwrap();
        let layer = LayerSpec::linear("fc", "w", Some("b"));
        let opts = SplitOptions {
            min_elems: 0,
            ..SplitOptions::default()
        };
        let SplitOutcome::Split {
            layer: s, tensors, ..
        } = split_layer(&layer, &w, Some(&b), &opts).unwrap()
        else {
            panic!("expected a split");
        };
        let by_name = table(tensors);
        let expect = [[1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 9.0]];
        for (i, e) in expect.iter().enumerate() {
            assert_eq!(by_name[&format!("w.split{i}")].to_f32().unwrap(), e);
        }
        let bias_total: f32 = (0..3)
            .map(|i| by_name[&format!("b.split{i}")].to_f32().unwrap()[0])
            .sum();
        assert_eq!(bias_total, 0.0);

        let g = ModelGraph::new(vec![3], vec![s]);
        let y = forward(&g, &by_name, &Activation::new(vec![3], vec![1.0; 3]).unwrap()).unwrap();
        assert_eq!(y.values, vec![15.0]);
    }

    #[test]
    fn constant_weights_are_left_alone() {
        let w = Tensor::from_f32("w", vec![4, 8], &[0.25; 32]).unwrap();
        let layer = LayerSpec::linear("fc", "w", None);
        let out = split_layer(&layer, &w, None, &SplitOptions::default()).unwrap();
        assert!(matches!(out, SplitOutcome::Unchanged { .. }));
    }

    #[test]
    fn small_layers_are_left_alone() {
        let w = Tensor::from_f32("w", vec![1, 3], &[1.0, 5.0, 9.0]).unwrap();
        let layer = LayerSpec::linear("fc", "w", None);
        let out = split_layer(&layer, &w, None, &SplitOptions::default()).unwrap();
        assert!(matches!(out, SplitOutcome::Unchanged { .. }));
    }

    #[test]
    fn rejects_unsplittable_kinds() {
        let w = Tensor::from_f32("e", vec![4, 8], &[0.5; 32]).unwrap();
        let layer = LayerSpec::new("emb", LayerKind::Embedding).with_tensors("e", None);
        assert!(matches!(
            split_layer(&layer, &w, None, &SplitOptions::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn model_without_eligible_layers_is_unchanged() {
        let g = ModelGraph::new(
            vec![4],
            vec![
                LayerSpec::new("r", LayerKind::Relu),
                LayerSpec::new("g", LayerKind::Gelu),
            ],
        );
        let (g2, t2, reports) = split_model(&g, &TensorTable::new(), &SplitOptions::default()).unwrap();
        assert_eq!(g2, g);
        assert!(t2.is_empty() && reports.is_empty());
    }
}
