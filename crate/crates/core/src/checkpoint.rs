//! safetensors container parsing and GPT-2 weight assembly.
//!
//! Layout: 8-byte little-endian header length `N`, `N` bytes of JSON mapping
//! tensor names to `{dtype, shape, data_offsets}`, then the raw little-endian
//! data section. Offsets are relative to the start of the data section.
//!
//! Published GPT-2 tensor names, with or without a `transformer.` prefix:
//!
//! | name                      | shape                 |
//! |---------------------------|-----------------------|
//! | `wte.weight`              | `[vocab, d]`          |
//! | `wpe.weight`              | `[n_ctx, d]`          |
//! | `h.{i}.ln_1.{weight,bias}`| `[d]`                 |
//! | `h.{i}.attn.c_attn.weight`| `[d, 3d]` (+ `[3d]` bias) |
//! | `h.{i}.attn.c_proj.weight`| `[d, d]` (+ `[d]` bias) |
//! | `h.{i}.ln_2.{weight,bias}`| `[d]`                 |
//! | `h.{i}.mlp.c_fc.weight`   | `[d, 4d]` (+ `[4d]` bias) |
//! | `h.{i}.mlp.c_proj.weight` | `[4d, d]` (+ `[d]` bias) |
//! | `ln_f.{weight,bias}`      | `[d]`                 |
//!
//! `lm_head.weight` is ignored (the unembedding is tied to `wte`), as are the
//! `attn.bias` / `attn.masked_bias` mask buffers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayerWeights, ModelConfig, ModelWeights};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor {name}: byte range {begin}..{end} outside data section of {len} bytes")]
    BoundsError {
        name: String,
        begin: usize,
        end: usize,
        len: usize,
    },
    #[error("tensors {first} and {second} overlap")]
    OverlapError { first: String, second: String },
    #[error("tensor {name}: unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Offsets into the data section, `[begin, end)`.
    pub byte_range: (usize, usize),
}

impl TensorRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// A parsed container borrowing the file bytes.
#[derive(Debug)]
pub struct Container<'a> {
    records: BTreeMap<String, TensorRecord>,
    data: &'a [u8],
}

/// Parse a safetensors container. The input is never modified.
pub fn parse_container(bytes: &[u8]) -> Result<Container<'_>, CheckpointError> {
    let malformed = |m: &str| CheckpointError::MalformedHeader(m.to_string());
    if bytes.len() < 8 {
        return Err(malformed("file shorter than the 8-byte length prefix"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| malformed("header length exceeds file size"))?;
    let header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let data = &bytes[header_end..];

    let mut records = BTreeMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: HeaderEntry =
            serde_json::from_value(value).map_err(|e| CheckpointError::MalformedHeader(format!("{name}: {e}")))?;
        let dtype = match entry.dtype.as_str() {
            "F32" => Dtype::F32,
            "F16" => Dtype::F16,
            other => {
                return Err(CheckpointError::UnsupportedDtype {
                    name,
                    dtype: other.to_string(),
                })
            }
        };
        let [begin, end] = entry.data_offsets;
        if begin > end || end > data.len() {
            return Err(CheckpointError::BoundsError {
                name,
                begin,
                end,
                len: data.len(),
            });
        }
        let numel: usize = entry.shape.iter().product();
        if end - begin != numel * dtype.size() {
            return Err(CheckpointError::MalformedHeader(format!(
                "{name}: {} bytes for shape {:?} of {:?}",
                end - begin,
                entry.shape,
                dtype
            )));
        }
        records.insert(
            name.clone(),
            TensorRecord {
                name,
                dtype,
                shape: entry.shape,
                byte_range: (begin, end),
            },
        );
    }

    let mut by_offset: Vec<&TensorRecord> = records.values().filter(|r| r.numel() > 0).collect();
    by_offset.sort_by_key(|r| r.byte_range);
    for pair in by_offset.windows(2) {
        if pair[1].byte_range.0 < pair[0].byte_range.1 {
            return Err(CheckpointError::OverlapError {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    Ok(Container { records, data })
}

impl<'a> Container<'a> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &TensorRecord> {
        self.records.values()
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.get(name)
    }

    /// Raw little-endian bytes of a tensor.
    pub fn bytes(&self, record: &TensorRecord) -> &'a [u8] {
        &self.data[record.byte_range.0..record.byte_range.1]
    }

    /// Tensor values upcast to f32.
    pub fn to_f32(&self, record: &TensorRecord) -> Vec<f32> {
        let raw = self.bytes(record);
        match record.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                .collect(),
        }
    }
}

/// A tensor to be written by [`write_container`].
#[derive(Debug, Clone)]
pub struct TensorData<'a> {
    pub name: &'a str,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Little-endian bytes of `dtype`.
    pub bytes: &'a [u8],
}

/// Serialize tensors into a safetensors container (tensors laid out in the
/// order given).
pub fn write_container(tensors: &[TensorData<'_>]) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut offset = 0;
    for t in tensors {
        let end = offset + t.bytes.len();
        header.insert(
            t.name.to_string(),
            serde_json::json!({
                "dtype": match t.dtype { Dtype::F32 => "F32", Dtype::F16 => "F16" },
                "shape": t.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let mut json = serde_json::to_vec(&header).expect("serializable header");
    // pad the header so the data section is 8-byte aligned
    while !(8 + json.len()).is_multiple_of(8) {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        out.extend_from_slice(t.bytes);
    }
    out
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Read a model-config JSON sidecar.
pub fn load_config(path: &Path) -> Result<ModelConfig, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
    config.validate().map_err(CheckpointError::InvalidConfig)?;
    Ok(config)
}

/// Load a GPT-2 checkpoint file.
pub fn load_model(path: &Path, config: &ModelConfig) -> Result<ModelWeights, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    weights_from_container(&parse_container(&bytes)?, config)
}

/// Assemble typed weights from a parsed container.
pub fn weights_from_container(
    container: &Container<'_>,
    config: &ModelConfig,
) -> Result<ModelWeights, CheckpointError> {
    config.validate().map_err(CheckpointError::InvalidConfig)?;
    let prefixed = container.records().any(|r| r.name.starts_with("transformer."));
    let fetch = |name: String, expected: Vec<usize>| -> Result<Vec<f32>, CheckpointError> {
        let full = if prefixed {
            format!("transformer.{name}")
        } else {
            name.clone()
        };
        let record = container
            .get(&full)
            .ok_or(CheckpointError::MissingTensor(full.clone()))?;
        if record.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: full,
                expected,
                found: record.shape.clone(),
            });
        }
        let values = container.to_f32(record);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(full));
        }
        Ok(values)
    };

    let d = config.d_model;
    let layers = (0..config.n_layer)
        .map(|i| {
            Ok(LayerWeights {
                ln1_gain: fetch(format!("h.{i}.ln_1.weight"), vec![d])?,
                ln1_bias: fetch(format!("h.{i}.ln_1.bias"), vec![d])?,
                qkv_weight: fetch(format!("h.{i}.attn.c_attn.weight"), vec![d, 3 * d])?,
                qkv_bias: fetch(format!("h.{i}.attn.c_attn.bias"), vec![3 * d])?,
                attn_out_weight: fetch(format!("h.{i}.attn.c_proj.weight"), vec![d, d])?,
                attn_out_bias: fetch(format!("h.{i}.attn.c_proj.bias"), vec![d])?,
                ln2_gain: fetch(format!("h.{i}.ln_2.weight"), vec![d])?,
                ln2_bias: fetch(format!("h.{i}.ln_2.bias"), vec![d])?,
                mlp_up_weight: fetch(format!("h.{i}.mlp.c_fc.weight"), vec![d, 4 * d])?,
                mlp_up_bias: fetch(format!("h.{i}.mlp.c_fc.bias"), vec![4 * d])?,
                mlp_down_weight: fetch(format!("h.{i}.mlp.c_proj.weight"), vec![4 * d, d])?,
                mlp_down_bias: fetch(format!("h.{i}.mlp.c_proj.bias"), vec![d])?,
            })
        })
        .collect::<Result<Vec<_>, CheckpointError>>()?;

    Ok(ModelWeights {
        token_embedding: fetch("wte.weight".into(), vec![config.vocab_size, d])?,
        position_embedding: fetch("wpe.weight".into(), vec![config.n_ctx, d])?,
        layers,
        final_ln_gain: fetch("ln_f.weight".into(), vec![d])?,
        final_ln_bias: fetch("ln_f.bias".into(), vec![d])?,
    })
}

/// Serialize weights under the published (unprefixed) GPT-2 names.
pub fn weights_to_container(weights: &ModelWeights, config: &ModelConfig) -> Vec<u8> {
    let d = config.d_model;
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = vec![
        (
            "wte.weight".into(),
            vec![config.vocab_size, d],
            f32_bytes(&weights.token_embedding),
        ),
        (
            "wpe.weight".into(),
            vec![config.n_ctx, d],
            f32_bytes(&weights.position_embedding),
        ),
    ];
    for (i, l) in weights.layers.iter().enumerate() {
        let entries: [(&str, Vec<usize>, &[f32]); 12] = [
            ("ln_1.weight", vec![d], &l.ln1_gain),
            ("ln_1.bias", vec![d], &l.ln1_bias),
            ("attn.c_attn.weight", vec![d, 3 * d], &l.qkv_weight),
            ("attn.c_attn.bias", vec![3 * d], &l.qkv_bias),
            ("attn.c_proj.weight", vec![d, d], &l.attn_out_weight),
            ("attn.c_proj.bias", vec![d], &l.attn_out_bias),
            ("ln_2.weight", vec![d], &l.ln2_gain),
            ("ln_2.bias", vec![d], &l.ln2_bias),
            ("mlp.c_fc.weight", vec![d, 4 * d], &l.mlp_up_weight),
            ("mlp.c_fc.bias", vec![4 * d], &l.mlp_up_bias),
            ("mlp.c_proj.weight", vec![4 * d, d], &l.mlp_down_weight),
            ("mlp.c_proj.bias", vec![d], &l.mlp_down_bias),
        ];
        for (name, shape, values) in entries {
            owned.push((format!("h.{i}.{name}"), shape, f32_bytes(values)));
        }
    }
    owned.push(("ln_f.weight".into(), vec![d], f32_bytes(&weights.final_ln_gain)));
    owned.push(("ln_f.bias".into(), vec![d], f32_bytes(&weights.final_ln_bias)));
    let tensors: Vec<TensorData<'_>> = owned
        .iter()
        .map(|(name, shape, bytes)| TensorData {
            name,
            dtype: Dtype::F32,
            shape: shape.clone(),
            bytes,
        })
        .collect();
    write_container(&tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_tensor_file() -> Vec<u8> {
        let bytes = f32_bytes(&[1.5, -2.0]);
        write_container(&[TensorData {
            name: "x",
            dtype: Dtype::F32,
            shape: vec![2],
            bytes: &bytes,
        }])
    }

    #[test]
    fn parses_minimal_container() {
        let file = one_tensor_file();
        let c = parse_container(&file).unwrap();
        assert_eq!(c.len(), 1);
        let rec = c.get("x").unwrap();
        assert_eq!(rec.shape, vec![2]);
        assert_eq!(rec.byte_range, (0, 8));
        assert_eq!(c.to_f32(rec), vec![1.5, -2.0]);
    }

    #[test]
    fn header_length_past_eof_is_malformed() {
        let mut file = one_tensor_file();
        file[..8].copy_from_slice(&(10_000u64).to_le_bytes());
        assert!(matches!(
            parse_container(&file),
            Err(CheckpointError::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_container(&[1, 2, 3]),
            Err(CheckpointError::MalformedHeader(_))
        ));
    }

    #[test]
    fn bad_json_is_malformed() {
        let mut file = 4u64.to_le_bytes().to_vec();
        file.extend_from_slice(b"{oop");
        assert!(matches!(
            parse_container(&file),
            Err(CheckpointError::MalformedHeader(_))
        ));
    }

    fn raw_file(header: serde_json::Value, data_len: usize) -> Vec<u8> {
        let json = serde_json::to_vec(&header).unwrap();
        let mut file = (json.len() as u64).to_le_bytes().to_vec();
        file.extend_from_slice(&json);
        file.extend(std::iter::repeat_n(0u8, data_len));
        file
    }

    #[test]
    fn out_of_bounds_offsets() {
        let file = raw_file(
            serde_json::json!({"x": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}),
            8,
        );
        assert!(matches!(
            parse_container(&file),
            Err(CheckpointError::BoundsError { .. })
        ));
    }

    #[test]
    fn overlapping_ranges() {
        let file = raw_file(
            serde_json::json!({
                "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
            }),
            12,
        );
        assert!(matches!(
            parse_container(&file),
            Err(CheckpointError::OverlapError { .. })
        ));
    }

    #[test]
    fn f16_is_upcast() {
        let halves: Vec<u8> = [1.0f32, 0.5, -3.25]
            .iter()
            .flat_map(|&v| half::f16::from_f32(v).to_le_bytes())
            .collect();
        let file = write_container(&[TensorData {
            name: "h",
            dtype: Dtype::F16,
            shape: vec![3],
            bytes: &halves,
        }]);
        let c = parse_container(&file).unwrap();
        assert_eq!(c.to_f32(c.get("h").unwrap()), vec![1.0, 0.5, -3.25]);
    }

    #[test]
    fn unsupported_dtype() {
        let file = raw_file(
            serde_json::json!({"q": {"dtype": "I8", "shape": [2], "data_offsets": [0, 2]}}),
            2,
        );
        assert!(matches!(
            parse_container(&file),
            Err(CheckpointError::UnsupportedDtype { .. })
        ));
    }
}
