//! On-disk model container.
//!
//! Byte layout (safetensors convention):
//!
//! ```text
//! [u64 LE header length N][N bytes UTF-8 JSON header, space padded][payload]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`,
//! with offsets relative to the start of the payload. The graph manifest is a
//! JSON document stored as a string under `__metadata__["splitquant.graph"]`.
//! Other metadata keys are carried through untouched.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::graph::{GraphDoc, ModelGraph, TensorTable};
use super::tensor::{DType, Tensor};
use super::validate::validate;
use crate::error::{Error, Result};

pub const METADATA_KEY: &str = "__metadata__";
pub const GRAPH_KEY: &str = "splitquant.graph";

/// Serializes a model into container bytes. Fails if the graph does not validate.
pub fn encode_model(graph: &ModelGraph, tensors: &TensorTable) -> Result<Vec<u8>> {
    let violations = validate(graph, tensors);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }

    let mut metadata: Map<String, Value> = graph
        .metadata
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    let doc = GraphDoc {
        input_shape: graph.input_shape.clone(),
        layers: graph.layers.clone(),
    };
    let doc = serde_json::to_string(&doc).map_err(|e| Error::Format(e.to_string()))?;
    metadata.insert(GRAPH_KEY.to_owned(), Value::String(doc));

    let mut header = Map::new();
    header.insert(METADATA_KEY.to_owned(), Value::Object(metadata));
    let mut offset = 0usize;
    for (name, t) in tensors {
        let end = offset + t.data().len();
        header.insert(
            name.clone(),
            json!({
                "dtype": t.dtype().as_str(),
                "shape": t.shape(),
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }

    let mut header = serde_json::to_vec(&Value::Object(header)).map_err(|e| Error::Format(e.to_string()))?;
    header.resize(header.len().next_multiple_of(8), b' ');

    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        out.extend_from_slice(t.data());
    }
    Ok(out)
}

/// Writes a model. Nothing is written if validation fails.
pub fn save_model(graph: &ModelGraph, tensors: &TensorTable, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_model(graph, tensors)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelGraph, TensorTable)> {
    let bytes = fs::read(path)?;
    decode_model(&bytes)
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelGraph, TensorTable)> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the 8-byte header length",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let rest = &bytes[8..];
    if header_len > rest.len() as u64 {
        return Err(Error::Format(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let (header, payload) = rest.split_at(header_len as usize);
    let header =
        std::str::from_utf8(header).map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let header: Map<String, Value> = match serde_json::from_str(header.trim_end_matches(' ')) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(Error::Format("header is not a JSON object".into())),
        Err(e) => return Err(Error::Format(format!("header JSON: {e}"))),
    };

    let mut graph = ModelGraph::default();
    let mut tensors = TensorTable::new();
    let mut spans: Vec<(usize, usize, String)> = Vec::new();

    for (name, entry) in header {
        if name == METADATA_KEY {
            graph.metadata = parse_metadata(entry)?;
            continue;
        }
        let (tensor, begin, end) = parse_entry(&name, &entry, payload)?;
        spans.push((begin, end, name.clone()));
        tensors.insert(name, tensor);
    }

    spans.sort();
    for pair in spans.windows(2) {
        let ((_, prev_end, a), (begin, _, b)) = (&pair[0], &pair[1]);
        if begin < prev_end {
            return Err(Error::Corruption(format!("data of `{a}` and `{b}` overlap")));
        }
    }

    if let Some(doc) = graph.metadata.remove(GRAPH_KEY) {
        let doc: GraphDoc =
            serde_json::from_str(&doc).map_err(|e| Error::Format(format!("graph manifest: {e}")))?;
        graph.layers = doc.layers;
        graph.input_shape = doc.input_shape;
    }

    let violations = validate(&graph, &tensors);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok((graph, tensors))
}

fn parse_metadata(entry: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(m) = entry else {
        return Err(Error::Format("__metadata__ is not an object".into()));
    };
    m.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            other => Err(Error::Format(format!(
                "metadata value for `{k}` is not a string: {other}"
            ))),
        })
        .collect()
}

fn parse_entry(name: &str, entry: &Value, payload: &[u8]) -> Result<(Tensor, usize, usize)> {
    let bad = |what: &str| Error::Format(format!("tensor `{name}`: {what}"));
    let dtype: DType = entry
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?
        .parse()?;
    let shape = entry
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| {
            d.as_u64()
                .map(|d| d as usize)
                .ok_or_else(|| bad("shape extents must be non-negative integers"))
        })
        .collect::<Result<Vec<_>>>()?;
    let offsets = entry
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| bad("data_offsets must be a two-element array"))?;
    let begin = offsets[0].as_u64().ok_or_else(|| bad("bad data_offsets"))? as usize;
    let end = offsets[1].as_u64().ok_or_else(|| bad("bad data_offsets"))? as usize;

    if begin > end || end > payload.len() {
        return Err(Error::Corruption(format!(
            "tensor `{name}`: offsets [{begin}, {end}) outside payload of {} bytes",
            payload.len()
        )));
    }
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = numel.map(|n| dtype.byte_len(n));
    if expected != Some(end - begin) {
        return Err(Error::Corruption(format!(
            "tensor `{name}`: {dtype} {shape:?} does not fit {} payload bytes",
            end - begin
        )));
    }
    let t = Tensor::from_bytes(name, dtype, shape, payload[begin..end].to_vec())?;
    Ok((t, begin, end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::graph::{insert_tensor, LayerKind, LayerSpec};

    fn raw(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn minimal_container() {
        let bytes = raw(
            r#"{"x":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            &[0u8; 16],
        );
        let (g, tt) = decode_model(&bytes).unwrap();
        assert!(g.layers.is_empty());
        assert_eq!(tt["x"].shape(), &[2, 2]);
    }

    #[test]
    fn empty_model_is_header_only() {
        let bytes = encode_model(&ModelGraph::default(), &TensorTable::new()).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + n);
        assert_eq!(n % 8, 0);
        let (g, tt) = decode_model(&bytes).unwrap();
        assert_eq!(g, ModelGraph::default());
        assert!(tt.is_empty());
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode_model(&[1, 2, 3]), Err(Error::Format(_))));
        assert!(matches!(decode_model(&raw("{", &[])), Err(Error::Format(_))));
        let mut huge = raw("{}", &[]);
        huge[..8].copy_from_slice(&1000u64.to_le_bytes());
        assert!(matches!(decode_model(&huge), Err(Error::Format(_))));
        assert!(matches!(
            decode_model(&raw(
                r#"{"x":{"dtype":"F16","shape":[1],"data_offsets":[0,2]}}"#,
                &[0; 2]
            )),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn overlapping_and_out_of_bounds_offsets() {
        let overlap = raw(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
            &[0; 12],
        );
        assert!(matches!(decode_model(&overlap), Err(Error::Corruption(_))));
        let oob = raw(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
            &[0; 4],
        );
        assert!(matches!(decode_model(&oob), Err(Error::Corruption(_))));
        let wrong_len = raw(
            r#"{"a":{"dtype":"I4x2","shape":[7],"data_offsets":[0,3]}}"#,
            &[0; 3],
        );
        assert!(matches!(decode_model(&wrong_len), Err(Error::Corruption(_))));
    }

    #[test]
    fn dangling_reference_is_validation_error() {
        let mut g = ModelGraph::new(vec![2], vec![LayerSpec::linear("fc", "w1", None)]);
        g.metadata.insert("author".into(), "x".into());
        let doc = serde_json::to_string(&GraphDoc {
            input_shape: g.input_shape.clone(),
            layers: g.layers.clone(),
        })
        .unwrap();
        let header = json!({ METADATA_KEY: { GRAPH_KEY: doc } }).to_string();
        assert!(matches!(
            decode_model(&raw(&header, &[])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unknown_metadata_survives() {
        let mut tt = TensorTable::new();
        insert_tensor(&mut tt, Tensor::from_f32("w", vec![1, 2], &[1.0, 2.0]).unwrap());
        let mut g = ModelGraph::new(vec![2], vec![LayerSpec::linear("fc", "w", None)]);
        g.metadata.insert("format".into(), "pt".into());
        let (g2, tt2) = decode_model(&encode_model(&g, &tt).unwrap()).unwrap();
        assert_eq!(g2, g);
        assert_eq!(tt2, tt);
    }

    #[test]
    fn invalid_graph_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.model");
        let mut tt = TensorTable::new();
        insert_tensor(&mut tt, Tensor::from_f32("w", vec![1, 2], &[1.0, 2.0]).unwrap());
        let child = LayerSpec::linear("fc", "w", None);
        let g = ModelGraph::new(
            vec![2],
            vec![LayerSpec::new("s", LayerKind::SplitSum).with_children(vec![child.clone(), child])],
        );
        assert!(matches!(save_model(&g, &tt, &path), Err(Error::Validation(_))));
        assert!(!path.exists());
    }

    #[test]
    fn offsets_are_ascending_and_cover_payload() {
        let mut tt = TensorTable::new();
        insert_tensor(&mut tt, Tensor::from_f32("a", vec![3], &[1.0, 2.0, 3.0]).unwrap());
        insert_tensor(
            &mut tt,
            Tensor::from_ints("b", vec![7], 4, &[1, 2, 3, 4, 5, 6, 7]).unwrap(),
        );
        insert_tensor(&mut tt, Tensor::from_f32("c", vec![0], &[]).unwrap());
        let bytes = encode_model(&ModelGraph::default(), &tt).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        let mut spans: Vec<(u64, u64)> = tt
            .keys()
            .map(|k| {
                let o = header[k]["data_offsets"].as_array().unwrap();
                (o[0].as_u64().unwrap(), o[1].as_u64().unwrap())
            })
            .collect();
        spans.sort();
        assert_eq!(spans.first().unwrap().0, 0);
        for w in spans.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        assert_eq!(spans.last().unwrap().1 as usize, bytes.len() - 8 - n);
    }
}
