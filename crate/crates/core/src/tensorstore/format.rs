//! Length-prefixed JSON header followed by a raw little-endian data block.
//!
//! ```text
//! [u64 LE: N][N bytes UTF-8 JSON header][data block]
//! ```
//!
//! The header maps each tensor name to `{dtype, shape, data_offsets}` with
//! offsets relative to the start of the data block, plus an optional
//! `__metadata__` object of string pairs. This is the safetensors layout
//! restricted to `F32` and `F64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::{Map, Value};

use super::{DType, Role, Tensor, TensorMap};
use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
const MODEL_ID_KEY: &str = "model_id";
const ROLE_KEY: &str = "role";
const PREFIX_LEN: u64 = 8;

/// Location and layout of one tensor inside a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Offset from the start of the data block.
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

struct Header {
    tensors: Vec<TensorMeta>,
    metadata: BTreeMap<String, String>,
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fallback_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unnamed".to_string());
    from_bytes(&bytes, &fallback_id)
}

pub fn save_checkpoint(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a whole file image. `fallback_id` names the model when the header
/// carries no `model_id`.
pub fn from_bytes(bytes: &[u8], fallback_id: &str) -> Result<TensorMap> {
    if (bytes.len() as u64) < PREFIX_LEN {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "file is {} bytes, shorter than the 8-byte length prefix",
                bytes.len()
            ),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let available = bytes.len() as u64 - PREFIX_LEN;
    if header_len > available {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "header length {header_len} exceeds the {available} bytes after the prefix"
            ),
        });
    }
    let header_end = (PREFIX_LEN + header_len) as usize;
    let header = parse_header(&bytes[8..header_end])?;

    let body = &bytes[header_end..];
    let declared = header
        .tensors
        .iter()
        .map(|t| t.byte_offset + t.byte_length)
        .max()
        .unwrap_or(0);
    if (body.len() as u64) < declared {
        return Err(Error::Truncated {
            expected: declared,
            found: body.len() as u64,
        });
    }
    if (body.len() as u64) > declared {
        return Err(Error::Format {
            offset: header_end as u64 + declared,
            message: format!(
                "{} trailing bytes after the last tensor",
                body.len() as u64 - declared
            ),
        });
    }

    let mut metadata = header.metadata;
    let model_id = metadata
        .remove(MODEL_ID_KEY)
        .unwrap_or_else(|| fallback_id.to_string());
    let role = match metadata.remove(ROLE_KEY) {
        None => Role::Pretrained,
        Some(r) => Role::parse(&r).ok_or_else(|| Error::Validation {
            tensor: METADATA_KEY.to_string(),
            message: format!("unknown role `{r}`"),
        })?,
    };

    let mut map = TensorMap::new(model_id, role);
    *map.metadata_mut() = metadata;
    for meta in header.tensors {
        let start = meta.byte_offset as usize;
        let raw = &body[start..start + meta.byte_length as usize];
        let values: Vec<f64> = match meta.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let tensor = Tensor::from_vec(meta.dtype, &meta.shape, values)?;
        tensor.check_finite(&meta.name)?;
        map.insert(meta.name, tensor);
    }
    Ok(map)
}

fn parse_header(raw: &[u8]) -> Result<Header> {
    let text = std::str::from_utf8(raw).map_err(|e| Error::Format {
        offset: PREFIX_LEN + e.valid_up_to() as u64,
        message: "header is not valid UTF-8".to_string(),
    })?;
    let root: Map<String, Value> = serde_json::from_str(text).map_err(|e| Error::Format {
        offset: PREFIX_LEN + json_error_offset(text, e.line(), e.column()),
        message: format!("malformed header JSON: {e}"),
    })?;

    let mut metadata = BTreeMap::new();
    let mut tensors = Vec::with_capacity(root.len());
    for (name, value) in root {
        let key_offset = PREFIX_LEN + key_position(text, &name);
        let format_err = |message: String| Error::Format {
            offset: key_offset,
            message: format!("entry `{name}`: {message}"),
        };
        if name == METADATA_KEY {
            let Value::Object(obj) = value else {
                return Err(format_err("metadata must be an object".into()));
            };
            for (k, v) in obj {
                let Value::String(s) = v else {
                    return Err(format_err(format!(
                        "metadata value for `{k}` must be a string"
                    )));
                };
                metadata.insert(k, s);
            }
            continue;
        }
        let entry: RawEntry =
            serde_json::from_value(value).map_err(|e| format_err(e.to_string()))?;
        let dtype = DType::parse(&entry.dtype)
            .ok_or_else(|| format_err(format!("unsupported dtype `{}`", entry.dtype)))?;
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(format_err(format!(
                "shape {:?} must be non-empty with all dims >= 1",
                entry.shape
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size() as u64))
            .ok_or_else(|| format_err("shape overflows".into()))?;
        let [begin, end] = entry.data_offsets;
        if end < begin || end - begin != numel {
            return Err(format_err(format!(
                "data_offsets [{begin}, {end}] do not span the {numel} bytes implied by dtype and shape"
            )));
        }
        tensors.push(TensorMeta {
            name,
            dtype,
            shape: entry.shape.iter().map(|&d| d as usize).collect(),
            byte_offset: begin,
            byte_length: numel,
        });
    }

    // The data block must be tiled exactly, without gaps or overlaps.
    tensors.sort_by(|a, b| (a.byte_offset, &a.name).cmp(&(b.byte_offset, &b.name)));
    let mut cursor = 0u64;
    for t in &tensors {
        if t.byte_offset != cursor {
            return Err(Error::Format {
                offset: PREFIX_LEN + key_position(text, &t.name),
                message: format!(
                    "entry `{}` starts at data offset {} but the previous tensor ends at {cursor}",
                    t.name, t.byte_offset
                ),
            });
        }
        cursor += t.byte_length;
    }
    Ok(Header { tensors, metadata })
}

/// Serializes `map` into a complete file image.
pub fn to_bytes(map: &TensorMap) -> Result<Vec<u8>> {
    map.validate()?;

    let mut meta = Map::new();
    for (k, v) in map.metadata() {
        meta.insert(k.clone(), Value::String(v.clone()));
    }
    meta.insert(
        MODEL_ID_KEY.into(),
        Value::String(map.model_id().to_string()),
    );
    meta.insert(
        ROLE_KEY.into(),
        Value::String(map.role().as_str().to_string()),
    );

    let mut header = Map::new();
    header.insert(METADATA_KEY.into(), Value::Object(meta));
    let mut offset = 0u64;
    for (name, tensor) in map.iter() {
        let len = (tensor.numel() * tensor.dtype().size()) as u64;
        header.insert(
            name.to_string(),
            serde_json::json!({
                "dtype": tensor.dtype().as_str(),
                "shape": tensor.shape(),
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }

    let mut header_bytes = serde_json::to_vec(&Value::Object(header))
        .map_err(|e| Error::Argument(format!("cannot encode header: {e}")))?;
    // Pad so the data block starts 8-byte aligned, as safetensors writers do.
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, tensor) in map.iter() {
        match tensor.dtype() {
            DType::F32 => {
                for v in tensor.values() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for v in tensor.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

fn json_error_offset(text: &str, line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len()) as u64
}

fn key_position(text: &str, name: &str) -> u64 {
    let quoted = serde_json::to_string(name).unwrap_or_default();
    text.find(&quoted).unwrap_or(0) as u64
}
