//! Cluster-based layer splitting and affine low-bit weight quantization.
//!
//! Each linear or conv2d layer is rewritten into three masked copies of
//! itself, one per k-means cluster (lower, middle, upper) of its weight and
//! bias values, whose outputs are summed. The rewrite preserves the layer's
//! function while giving each copy a much narrower value range, so plain
//! per-tensor linear quantization at 4 bits keeps far more resolution.

pub mod clustering;
pub mod error;
pub mod harness;
pub mod inference;
pub mod quantizer;
pub mod splitter;
pub mod tensor_store;

pub use clustering::{kmeans3, kmeans3_oracle, ClusterAssignment};
pub use error::{Error, Result};
pub use harness::{gen_desk_model, gen_outlier_tensor, DeskConfig, DeskKind};
pub use inference::{batch_agreement, forward, Activation, Agreement, Executor};
pub use quantizer::{
    dequantize_tensor, error_stats, quantize_model, quantize_tensor, ErrorStats, QuantParams, QuantizedTensor,
};
pub use splitter::{
    split_layer, split_model, unsplit_check, SplitOptions, SplitOutcome, SplitReport, UnsplitReport,
};
pub use tensor_store::{
    load_model, save_model, validate, DType, LayerKind, LayerSpec, ModelGraph, Tensor, TensorTable, Violation,
};
