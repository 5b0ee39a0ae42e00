//! Model container: tensors, graph manifest, and structural validation.

mod container;
mod graph;
mod tensor;
mod validate;

pub use container::{decode_model, encode_model, load_model, save_model, GRAPH_KEY, METADATA_KEY};
pub use graph::{insert_tensor, LayerKind, LayerSpec, ModelGraph, TensorTable};
pub use tensor::{numel, pack_i2, pack_i4, unpack_i2, unpack_i4, DType, Tensor};
pub use validate::{layer_output_shape, validate, Rule, Violation};
