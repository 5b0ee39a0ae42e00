use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::quantizer::QuantParams;

/// Tensors of a model keyed by name.
pub type TensorTable = BTreeMap<String, Tensor>;

pub fn insert_tensor(table: &mut TensorTable, tensor: Tensor) {
    table.insert(tensor.name().to_owned(), tensor);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv2d,
    Embedding,
    Layernorm,
    Relu,
    Gelu,
    SoftmaxAttention,
    SplitSum,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Embedding => "embedding",
            LayerKind::Layernorm => "layernorm",
            LayerKind::Relu => "relu",
            LayerKind::Gelu => "gelu",
            LayerKind::SoftmaxAttention => "softmax_attention",
            LayerKind::SplitSum => "split_sum",
        }
    }

    /// Kinds that own a weight tensor.
    pub fn has_weight(self) -> bool {
        matches!(
            self,
            LayerKind::Linear | LayerKind::Conv2d | LayerKind::Embedding | LayerKind::Layernorm
        )
    }

    /// Kinds the splitter may rewrite.
    pub fn is_splittable(self) -> bool {
        matches!(self, LayerKind::Linear | LayerKind::Conv2d)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One step of the forward computation.
///
/// `children` holds the three cluster sublayers of a `split_sum`, or the
/// query/key/value/output projections of a `softmax_attention` block.
///
/// Recognized `attrs`: `stride` and `padding` for conv2d, `flatten` (0/1)
/// for linear, `head_dim` for attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_quant: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_quant: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, i64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<LayerSpec>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            weight: None,
            bias: None,
            weight_quant: None,
            bias_quant: None,
            attrs: BTreeMap::new(),
            children: Vec::new(),
        }
    }

    pub fn linear(name: impl Into<String>, weight: &str, bias: Option<&str>) -> Self {
        LayerSpec::new(name, LayerKind::Linear).with_tensors(weight, bias)
    }

    pub fn with_tensors(mut self, weight: &str, bias: Option<&str>) -> Self {
        self.weight = Some(weight.to_owned());
        self.bias = bias.map(str::to_owned);
        self
    }

    pub fn with_attr(mut self, key: &str, value: i64) -> Self {
        self.attrs.insert(key.to_owned(), value);
        self
    }

    pub fn with_children(mut self, children: Vec<LayerSpec>) -> Self {
        self.children = children;
        self
    }

    pub fn attr(&self, key: &str) -> Option<i64> {
        self.attrs.get(key).copied()
    }

    /// Tensor names referenced by this layer and its children, in order.
    pub fn tensor_refs(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a str>) {
        out.extend(self.weight.as_deref());
        out.extend(self.bias.as_deref());
        for c in &self.children {
            c.collect_refs(out);
        }
    }
}

/// Ordered layer list plus the extents of the model input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub metadata: BTreeMap<String, String>,
}

impl ModelGraph {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        ModelGraph {
            layers,
            input_shape,
            metadata: BTreeMap::new(),
        }
    }

    /// Visits every layer depth-first, parents before children.
    pub fn walk<'a>(&'a self, mut f: impl FnMut(&'a LayerSpec)) {
        fn go<'a>(l: &'a LayerSpec, f: &mut impl FnMut(&'a LayerSpec)) {
            f(l);
            for c in &l.children {
                go(c, f);
            }
        }
        for l in &self.layers {
            go(l, &mut f);
        }
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        let mut n = 0;
        self.walk(|l| n += usize::from(l.kind == kind));
        n
    }
}

/// The serialized body of the graph manifest.
#[derive(Serialize, Deserialize)]
pub(crate) struct GraphDoc {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}
