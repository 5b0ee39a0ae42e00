use std::fmt;

use super::graph::{LayerKind, LayerSpec, ModelGraph, TensorTable};
use super::tensor::{numel, DType, Tensor};
use crate::quantizer::QuantParams;

/// Which structural rule a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    DanglingTensor,
    TensorName,
    TensorShape,
    ShapeMismatch,
    SplitArity,
    SplitChildren,
    AttentionChildren,
    Attribute,
    Quantization,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Layer or tensor the violation is attached to.
    pub location: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{:?}]: {}", self.location, self.rule, self.detail)
    }
}

/// Checks every type invariant and shape-compatibility rule.
///
/// Returns an empty list iff the model can be executed by the inference
/// engine without shape faults.
pub fn validate(graph: &ModelGraph, tensors: &TensorTable) -> Vec<Violation> {
    let mut v = Checker {
        tensors,
        out: Vec::new(),
    };
    for (key, t) in tensors {
        if key != t.name() {
            v.push(
                key,
                Rule::TensorName,
                format!("table key differs from name `{}`", t.name()),
            );
        }
    }
    let mut shape = Some(graph.input_shape.clone());
    for layer in &graph.layers {
        shape = match shape {
            Some(s) => v.layer(layer, &s),
            None => {
                v.refs_only(layer);
                None
            }
        };
    }
    v.out
}

/// Output extents of `layer` applied to `input`, if the layer is well-formed.
pub fn layer_output_shape(
    layer: &LayerSpec,
    input: &[usize],
    tensors: &TensorTable,
) -> Result<Vec<usize>, Vec<Violation>> {
    let mut v = Checker {
        tensors,
        out: Vec::new(),
    };
    match v.layer(layer, input) {
        Some(s) if v.out.is_empty() => Ok(s),
        _ => Err(v.out),
    }
}

struct Checker<'a> {
    tensors: &'a TensorTable,
    out: Vec<Violation>,
}

impl Checker<'_> {
    fn push(&mut self, location: &str, rule: Rule, detail: String) {
        self.out.push(Violation {
            location: location.to_owned(),
            rule,
            detail,
        });
    }

    fn refs_only(&mut self, layer: &LayerSpec) {
        for name in layer.tensor_refs() {
            if !self.tensors.contains_key(name) {
                self.push(
                    &layer.name,
                    Rule::DanglingTensor,
                    format!("tensor `{name}` not found"),
                );
            }
        }
    }

    /// Fetches a referenced tensor and checks its dtype against the layer's quant params.
    fn tensor(
        &mut self,
        layer: &LayerSpec,
        name: Option<&str>,
        quant: Option<&QuantParams>,
        role: &str,
    ) -> Option<&Tensor> {
        let name = name?;
        let Some(t) = self.tensors.get(name) else {
            self.push(
                &layer.name,
                Rule::DanglingTensor,
                format!("{role} tensor `{name}` not found"),
            );
            return None;
        };
        match (t.dtype(), quant) {
            (DType::F32, None) => {}
            (DType::F32, Some(_)) => self.push(
                &layer.name,
                Rule::Quantization,
                format!("{role} `{name}` is F32 but carries quantization parameters"),
            ),
            (dt, None) => self.push(
                &layer.name,
                Rule::Quantization,
                format!("{role} `{name}` is {dt} without quantization parameters"),
            ),
            (dt, Some(p)) => {
                if p.bits != dt.bits() {
                    self.push(
                        &layer.name,
                        Rule::Quantization,
                        format!("{role} `{name}` is {dt} but parameters declare {} bits", p.bits),
                    );
                }
                if let Err(e) = p.check() {
                    self.push(&layer.name, Rule::Quantization, format!("{role} `{name}`: {e}"));
                }
            }
        }
        Some(t)
    }

    fn require_weight(&mut self, layer: &LayerSpec) -> Option<Vec<usize>> {
        if layer.weight.is_none() {
            self.push(
                &layer.name,
                Rule::DanglingTensor,
                format!("{} layer has no weight", layer.kind),
            );
            return None;
        }
        self.tensor(
            layer,
            layer.weight.as_deref(),
            layer.weight_quant.as_ref(),
            "weight",
        )
        .map(|t| t.shape().to_vec())
    }

    fn bias_shape(&mut self, layer: &LayerSpec) -> Option<Option<Vec<usize>>> {
        match layer.bias.as_deref() {
            None => Some(None),
            Some(_) => self
                .tensor(layer, layer.bias.as_deref(), layer.bias_quant.as_ref(), "bias")
                .map(|t| Some(t.shape().to_vec())),
        }
    }

    fn check_bias(&mut self, layer: &LayerSpec, bias: &Option<Vec<usize>>, extent: usize) -> bool {
        match bias {
            Some(b) if b.as_slice() != [extent] => {
                self.push(
                    &layer.name,
                    Rule::TensorShape,
                    format!("bias shape {b:?}, expected [{extent}]"),
                );
                false
            }
            _ => true,
        }
    }

    fn no_tensors(&mut self, layer: &LayerSpec) -> bool {
        if layer.weight.is_some() || layer.bias.is_some() {
            self.push(
                &layer.name,
                Rule::Attribute,
                format!("{} layer takes no tensors", layer.kind),
            );
            return false;
        }
        true
    }

    fn layer(&mut self, layer: &LayerSpec, input: &[usize]) -> Option<Vec<usize>> {
        if layer.kind != LayerKind::SplitSum
            && layer.kind != LayerKind::SoftmaxAttention
            && !layer.children.is_empty()
        {
            self.push(
                &layer.name,
                Rule::Attribute,
                format!("{} layer cannot have children", layer.kind),
            );
            return None;
        }
        match layer.kind {
            LayerKind::Linear => self.linear(layer, input),
            LayerKind::Conv2d => self.conv2d(layer, input),
            LayerKind::Embedding => self.embedding(layer, input),
            LayerKind::Layernorm => self.layernorm(layer, input),
            LayerKind::Relu | LayerKind::Gelu => self.no_tensors(layer).then(|| input.to_vec()),
            LayerKind::SoftmaxAttention => self.attention(layer, input),
            LayerKind::SplitSum => self.split_sum(layer, input),
        }
    }

    fn linear(&mut self, layer: &LayerSpec, input: &[usize]) -> Option<Vec<usize>> {
        let w = self.require_weight(layer);
        let b = self.bias_shape(layer);
        let (w, b) = (w?, b?);
        if w.len() != 2 {
            self.push(
                &layer.name,
                Rule::TensorShape,
                format!("linear weight must be 2-D, got {w:?}"),
            );
            return None;
        }
        let (out_f, in_f) = (w[0], w[1]);
        if !self.check_bias(layer, &b, out_f) {
            return None;
        }
        match layer.attr("flatten").unwrap_or(0) {
            0 => {
                if input.last() != Some(&in_f) {
                    self.push(
                        &layer.name,
                        Rule::ShapeMismatch,
                        format!("input {input:?} does not end in {in_f}"),
                    );
                    return None;
                }
                let mut out = input.to_vec();
                *out.last_mut().unwrap() = out_f;
                Some(out)
            }
            1 => {
                if numel(input) != in_f {
                    self.push(
                        &layer.name,
                        Rule::ShapeMismatch,
                        format!(
                            "flattened input {input:?} has {} elements, expected {in_f}",
                            numel(input)
                        ),
                    );
                    return None;
                }
                Some(vec![out_f])
            }
            other => {
                self.push(
                    &layer.name,
                    Rule::Attribute,
                    format!("flatten must be 0 or 1, got {other}"),
                );
                None
            }
        }
    }

    fn conv2d(&mut self, layer: &LayerSpec, input: &[usize]) -> Option<Vec<usize>> {
        let w = self.require_weight(layer);
        let b = self.bias_shape(layer);
        let (w, b) = (w?, b?);
        if w.len() != 4 {
            self.push(
                &layer.name,
                Rule::TensorShape,
                format!("conv2d weight must be 4-D, got {w:?}"),
            );
            return None;
        }
        if !self.check_bias(layer, &b, w[0]) {
            return None;
        }
        let stride = layer.attr("stride").unwrap_or(1);
        let padding = layer.attr("padding").unwrap_or(0);
        if stride < 1 || padding < 0 {
            self.push(
                &layer.name,
                Rule::Attribute,
                format!("invalid stride {stride} / padding {padding}"),
            );
            return None;
        }
        if input.len() != 3 || input[0] != w[1] {
            self.push(
                &layer.name,
                Rule::ShapeMismatch,
                format!("input {input:?} is not [{}, H, W]", w[1]),
            );
            return None;
        }
        let (s, p) = (stride as usize, padding as usize);
        let (h, wd) = (input[1] + 2 * p, input[2] + 2 * p);
        if h < w[2] || wd < w[3] {
            self.push(
                &layer.name,
                Rule::ShapeMismatch,
                format!("kernel {}x{} larger than padded input {h}x{wd}", w[2], w[3]),
            );
            return None;
        }
        Some(vec![w[0], (h - w[2]) / s + 1, (wd - w[3]) / s + 1])
    }

    fn embedding(&mut self, layer: &LayerSpec, input: &[usize]) -> Option<Vec<usize>> {
        let w = self.require_weight(layer)?;
        if layer.bias.is_some() {
            self.push(&layer.name, Rule::Attribute, "embedding takes no bias".into());
            return None;
        }
        if w.len() != 2 {
            self.push(
                &layer.name,
                Rule::TensorShape,
                format!("embedding table must be 2-D, got {w:?}"),
            );
            return None;
        }
        if input.len() != 1 {
            self.push(
                &layer.name,
                Rule::ShapeMismatch,
                format!("embedding expects a 1-D id sequence, got {input:?}"),
            );
            return None;
        }
        Some(vec![input[0], w[1]])
    }

    fn layernorm(&mut self, layer: &LayerSpec, input: &[usize]) -> Option<Vec<usize>> {
        let w = self.require_weight(layer);
        let b = self.bias_shape(layer);
        let (w, b) = (w?, b?);
        if w.len() != 1 || !self.check_bias(layer, &b, w[0]) {
            if w.len() != 1 {
                self.push(
                    &layer.name,
                    Rule::TensorShape,
                    format!("layernorm gamma must be 1-D, got {w:?}"),
                );
            }
            return None;
        }
        if input.last() != Some(&w[0]) {
            self.push(
                &layer.name,
                Rule::ShapeMismatch,
                format!("input {input:?} does not end in {}", w[0]),
            );
            return None;
        }
        Some(input.to_vec())
    }

    fn split_sum(&mut self, layer: &LayerSpec, input: &[usize]) -> Option<Vec<usize>> {
        if !self.no_tensors(layer) {
            return None;
        }
        if layer.children.len() != 3 {
            self.push(
                &layer.name,
                Rule::SplitArity,
                format!("split_sum needs exactly 3 children, has {}", layer.children.len()),
            );
            for c in &layer.children {
                self.refs_only(c);
            }
            return None;
        }
        let kind = layer.children[0].kind;
        if !kind.is_splittable() || layer.children.iter().any(|c| c.kind != kind) {
            let kinds: Vec<_> = layer.children.iter().map(|c| c.kind.as_str()).collect();
            self.push(
                &layer.name,
                Rule::SplitChildren,
                format!("children must share one kind of linear/conv2d, got {kinds:?}"),
            );
            for c in &layer.children {
                self.refs_only(c);
            }
            return None;
        }
        let mut shapes = Vec::with_capacity(3);
        for c in &layer.children {
            shapes.push(self.layer(c, input));
        }
        let shapes: Option<Vec<_>> = shapes.into_iter().collect();
        let shapes = shapes?;
        let sig = |c: &LayerSpec| {
            let shape = |n: &Option<String>| {
                n.as_deref()
                    .and_then(|n| self.tensors.get(n))
                    .map(|t| t.shape().to_vec())
            };
            (shape(&c.weight), shape(&c.bias), c.attrs.clone())
        };
        let first = sig(&layer.children[0]);
        if layer.children[1..].iter().any(|c| sig(c) != first) || shapes.iter().any(|s| *s != shapes[0]) {
            self.push(
                &layer.name,
                Rule::SplitChildren,
                "children differ in tensor shapes or attributes".into(),
            );
            return None;
        }
        shapes.into_iter().next()
    }

    fn attention(&mut self, layer: &LayerSpec, input: &[usize]) -> Option<Vec<usize>> {
        if !self.no_tensors(layer) {
            return None;
        }
        let projection_ok = |c: &LayerSpec| match c.kind {
            LayerKind::Linear => true,
            LayerKind::SplitSum => c.children.iter().all(|g| g.kind == LayerKind::Linear),
            _ => false,
        };
        if layer.children.len() != 4 || !layer.children.iter().all(projection_ok) {
            self.push(
                &layer.name,
                Rule::AttentionChildren,
                "attention needs 4 linear projections (query, key, value, output)".into(),
            );
            for c in &layer.children {
                self.refs_only(c);
            }
            return None;
        }
        let Some(head) = layer.attr("head_dim").filter(|&h| h > 0) else {
            self.push(
                &layer.name,
                Rule::Attribute,
                "attention needs a positive head_dim".into(),
            );
            for c in &layer.children {
                self.refs_only(c);
            }
            return None;
        };
        let head = head as usize;
        if input.len() != 2 {
            self.push(
                &layer.name,
                Rule::ShapeMismatch,
                format!("attention expects [seq, d_model], got {input:?}"),
            );
            for c in &layer.children {
                self.refs_only(c);
            }
            return None;
        }
        let q = self.layer(&layer.children[0], input);
        let k = self.layer(&layer.children[1], input);
        let v = self.layer(&layer.children[2], input);
        let (q, k, v) = (q?, k?, v?);
        let expect = [input[0], head];
        if q != expect || k != expect || v != expect {
            self.push(
                &layer.name,
                Rule::ShapeMismatch,
                format!("q/k/v projections give {q:?}/{k:?}/{v:?}, expected {expect:?}"),
            );
            self.refs_only(&layer.children[3]);
            return None;
        }
        self.layer(&layer.children[3], &v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::graph::insert_tensor;

    fn t(name: &str, shape: &[usize]) -> Tensor {
        let n = numel(shape);
        Tensor::from_f32(name, shape.to_vec(), &vec![0.5; n]).unwrap()
    }

    fn mlp() -> (ModelGraph, TensorTable) {
        let mut tt = TensorTable::new();
        for (n, s) in [
            ("w1", &[8usize, 4][..]),
            ("b1", &[8]),
            ("w2", &[3, 8]),
            ("b2", &[3]),
        ] {
            insert_tensor(&mut tt, t(n, s));
        }
        let g = ModelGraph::new(
            vec![4],
            vec![
                LayerSpec::linear("fc1", "w1", Some("b1")),
                LayerSpec::new("act", LayerKind::Relu),
                LayerSpec::linear("fc2", "w2", Some("b2")),
            ],
        );
        (g, tt)
    }

    #[test]
    fn well_formed_mlp_has_no_violations() {
        let (g, tt) = mlp();
        assert_eq!(validate(&g, &tt), vec![]);
    }

    #[test]
    fn split_sum_with_two_children_is_one_arity_violation() {
        let (mut g, tt) = mlp();
        let child = g.layers[0].clone();
        g.layers[0] = LayerSpec::new("fc1", LayerKind::SplitSum).with_children(vec![child.clone(), child]);
        let v = validate(&g, &tt);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].rule, Rule::SplitArity);
    }

    #[test]
    fn incompatible_consecutive_layers_is_one_shape_violation() {
        let (g, mut tt) = mlp();
        insert_tensor(&mut tt, t("w2", &[3, 6]));
        let v = validate(&g, &tt);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].rule, Rule::ShapeMismatch);
        assert_eq!(v[0].location, "fc2");
    }

    #[test]
    fn dangling_reference() {
        let (g, mut tt) = mlp();
        tt.remove("b2");
        let v = validate(&g, &tt);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::DanglingTensor);
    }

    #[test]
    fn embedding_cannot_be_split_child() {
        let mut tt = TensorTable::new();
        insert_tensor(&mut tt, t("e", &[10, 4]));
        let e = LayerSpec::new("emb", LayerKind::Embedding).with_tensors("e", None);
        let g = ModelGraph::new(
            vec![5],
            vec![LayerSpec::new("s", LayerKind::SplitSum).with_children(vec![e.clone(), e.clone(), e])],
        );
        let v = validate(&g, &tt);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::SplitChildren);
    }

    #[test]
    fn quantized_tensor_requires_params() {
        let (g, mut tt) = mlp();
        insert_tensor(&mut tt, Tensor::from_ints("w1", vec![8, 4], 4, &[0; 32]).unwrap());
        let v = validate(&g, &tt);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::Quantization);
    }

    #[test]
    fn conv_output_extent() {
        let mut tt = TensorTable::new();
        insert_tensor(&mut tt, t("k", &[4, 2, 3, 3]));
        let conv = LayerSpec::new("c", LayerKind::Conv2d)
            .with_tensors("k", None)
            .with_attr("stride", 2)
            .with_attr("padding", 1);
        assert_eq!(layer_output_shape(&conv, &[2, 7, 8], &tt).unwrap(), vec![4, 4, 4]);
    }
}
