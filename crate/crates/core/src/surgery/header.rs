use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};

use super::SurgeryError;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    Bool,
    U8,
    I8,
    I16,
    U16,
    F16,
    BF16,
    I32,
    U32,
    F32,
    I64,
    U64,
    F64,
}

impl Dtype {
    pub fn width(self) -> u64 {
        match self {
            Dtype::Bool | Dtype::U8 | Dtype::I8 => 1,
            Dtype::I16 | Dtype::U16 | Dtype::F16 | Dtype::BF16 => 2,
            Dtype::I32 | Dtype::U32 | Dtype::F32 => 4,
            Dtype::I64 | Dtype::U64 | Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::Bool => "BOOL",
            Dtype::U8 => "U8",
            Dtype::I8 => "I8",
            Dtype::I16 => "I16",
            Dtype::U16 => "U16",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::I32 => "I32",
            Dtype::U32 => "U32",
            Dtype::F32 => "F32",
            Dtype::I64 => "I64",
            Dtype::U64 => "U64",
            Dtype::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "BOOL" => Dtype::Bool,
            "U8" => Dtype::U8,
            "I8" => Dtype::I8,
            "I16" => Dtype::I16,
            "U16" => Dtype::U16,
            "F16" => Dtype::F16,
            "BF16" => Dtype::BF16,
            "I32" => Dtype::I32,
            "U32" => Dtype::U32,
            "F32" => Dtype::F32,
            "I64" => Dtype::I64,
            "U64" => Dtype::U64,
            "F64" => Dtype::F64,
            _ => return None,
        })
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    /// Byte range relative to the start of the data region.
    pub data_offsets: (u64, u64),
}

impl TensorMeta {
    pub fn numel(&self) -> Option<u64> {
        self.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }

    /// Bytes in one slice along axis 0 (the whole element width for 1-D).
    pub fn row_bytes(&self) -> u64 {
        self.shape.iter().skip(1).product::<u64>() * self.dtype.width()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorIndex {
    /// Tensors in ascending data-offset order.
    pub metas: Vec<TensorMeta>,
    /// Length of the JSON header, excluding the 8-byte prefix.
    pub header_length: u64,
    pub metadata: Option<BTreeMap<String, String>>,
    /// Bytes after the header.
    pub data_len: u64,
}

impl TensorIndex {
    pub fn get(&self, name: &str) -> Option<&TensorMeta> {
        self.metas.iter().find(|m| m.name == name)
    }

    /// Offset of the data region within the file.
    pub fn data_start(&self) -> u64 {
        8 + self.header_length
    }

    pub fn file_len(&self) -> u64 {
        self.data_start() + self.data_len
    }

    pub fn total_params(&self) -> u64 {
        self.metas.iter().filter_map(TensorMeta::numel).sum()
    }

    /// Data-region bytes not covered by any tensor.
    pub fn gap_bytes(&self) -> u64 {
        self.data_len - self.metas.iter().map(TensorMeta::byte_len).sum::<u64>()
    }
}

/// Header entries in file order, keeping duplicates so they can be reported.
struct Entries(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for Entries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Entries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Entries, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry()? {
                    out.push(entry);
                }
                Ok(Entries(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

/// Parses and validates a JSON header against a data region of `data_len`
/// bytes.
pub fn parse_header(json: &[u8], data_len: u64) -> Result<TensorIndex, SurgeryError> {
    let malformed = |e: serde_json::Error| SurgeryError::MalformedHeader(e.to_string());
    let Entries(entries) = serde_json::from_slice(json).map_err(malformed)?;

    let mut metas = Vec::with_capacity(entries.len());
    let mut metadata = None;
    let mut seen = HashSet::new();
    for (name, value) in entries {
        if !seen.insert(name.clone()) {
            return Err(SurgeryError::DuplicateTensor(name));
        }
        if name == METADATA_KEY {
            metadata = Some(serde_json::from_value(value).map_err(malformed)?);
            continue;
        }
        let raw: RawEntry = serde_json::from_value(value)
            .map_err(|e| SurgeryError::MalformedHeader(format!("tensor {name:?}: {e}")))?;
        let dtype = Dtype::parse(&raw.dtype).ok_or_else(|| SurgeryError::UnknownDtype {
            name: name.clone(),
            dtype: raw.dtype.clone(),
        })?;
        let [begin, end] = raw.data_offsets;
        let meta = TensorMeta {
            name,
            dtype,
            shape: raw.shape,
            data_offsets: (begin, end),
        };
        let expected = meta
            .numel()
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| SurgeryError::MalformedHeader(format!("tensor {:?}: shape overflows", meta.name)))?;
        if end < begin || end - begin != expected {
            return Err(SurgeryError::ShapeMismatch {
                name: meta.name,
                expected,
                actual: end.saturating_sub(begin),
            });
        }
        if end > data_len {
            return Err(SurgeryError::OutOfBounds {
                name: meta.name,
                end,
                data_len,
            });
        }
        metas.push(meta);
    }

    metas.sort_by_key(|m| m.data_offsets.0);
    for pair in metas.windows(2) {
        if pair[0].data_offsets.1 > pair[1].data_offsets.0 {
            return Err(SurgeryError::Overlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    Ok(TensorIndex {
        metas,
        header_length: json.len() as u64,
        metadata,
        data_len,
    })
}

pub fn read_tensor_index(path: impl AsRef<Path>) -> Result<TensorIndex, SurgeryError> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(SurgeryError::io(path))?;
    let file_len = file.metadata().map_err(SurgeryError::io(path))?.len();
    if file_len < 8 {
        return Err(SurgeryError::TooShort { len: file_len });
    }
    let mut prefix = [0u8; 8];
    file.read_exact(&mut prefix).map_err(SurgeryError::io(path))?;
    let header_len = u64::from_le_bytes(prefix);
    if header_len > file_len - 8 {
        return Err(SurgeryError::HeaderTooLarge {
            declared: header_len,
            available: file_len - 8,
        });
    }
    let mut json = vec![0u8; header_len as usize];
    file.read_exact(&mut json).map_err(SurgeryError::io(path))?;
    parse_header(&json, file_len - 8 - header_len)
}

/// Renders a header for `metas` (in the given order) with space padding to
/// a multiple of 8 bytes. The 8-byte length prefix is not included.
pub fn write_header(metas: &[TensorMeta], metadata: Option<&BTreeMap<String, String>>) -> Vec<u8> {
    let mut out = String::from("{");
    let mut first = true;
    let mut sep = |out: &mut String| {
        if !std::mem::take(&mut first) {
            out.push(',');
        }
    };
    if let Some(md) = metadata {
        sep(&mut out);
        out.push_str(&format!(
            "{}:{}",
            json_str(METADATA_KEY),
            serde_json::to_string(md).expect("string map")
        ));
    }
    for m in metas {
        sep(&mut out);
        let shape: Vec<String> = m.shape.iter().map(u64::to_string).collect();
        out.push_str(&format!(
            "{}:{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
            json_str(&m.name),
            m.dtype,
            shape.join(","),
            m.data_offsets.0,
            m.data_offsets.1
        ));
    }
    out.push('}');
    let mut bytes = out.into_bytes();
    bytes.resize(bytes.len().div_ceil(8) * 8, b' ');
    bytes
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_an_empty_index() {
        let idx = parse_header(b"{}", 0).unwrap();
        assert!(idx.metas.is_empty());
        assert_eq!(idx.header_length, 2);
    }

    #[test]
    fn one_tensor() {
        let json = br#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
        let idx = parse_header(json, 16).unwrap();
        assert_eq!(idx.metas.len(), 1);
        assert_eq!(idx.metas[0].row_bytes(), 8);
    }

    #[test]
    fn offset_shape_mismatch() {
        let json = br#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,15]}}"#;
        assert!(matches!(
            parse_header(json, 16),
            Err(SurgeryError::ShapeMismatch {
                expected: 16,
                actual: 15,
                ..
            })
        ));
    }

    #[test]
    fn rejects_duplicates_overlaps_and_overruns() {
        let dup = br#"{"w":{"dtype":"U8","shape":[1],"data_offsets":[0,1]},"w":{"dtype":"U8","shape":[1],"data_offsets":[1,2]}}"#;
        assert!(matches!(parse_header(dup, 2), Err(SurgeryError::DuplicateTensor(_))));
        let overlap = br#"{"a":{"dtype":"U8","shape":[2],"data_offsets":[0,2]},"b":{"dtype":"U8","shape":[2],"data_offsets":[1,3]}}"#;
        assert!(matches!(parse_header(overlap, 3), Err(SurgeryError::Overlap { .. })));
        let overrun = br#"{"a":{"dtype":"U8","shape":[4],"data_offsets":[0,4]}}"#;
        assert!(matches!(
            parse_header(overrun, 3),
            Err(SurgeryError::OutOfBounds { .. })
        ));
        assert!(matches!(parse_header(b"[1]", 0), Err(SurgeryError::MalformedHeader(_))));
        let dtype = br#"{"a":{"dtype":"Q4","shape":[4],"data_offsets":[0,4]}}"#;
        assert!(matches!(parse_header(dtype, 4), Err(SurgeryError::UnknownDtype { .. })));
    }

    #[test]
    fn writer_output_parses_back_with_gaps_tolerated() {
        let metas = vec![
            TensorMeta {
                name: "b\"q".into(),
                dtype: Dtype::BF16,
                shape: vec![3],
                data_offsets: (0, 6),
            },
            TensorMeta {
                name: "a".into(),
                dtype: Dtype::I64,
                shape: vec![1, 1],
                data_offsets: (10, 18),
            },
        ];
        let mut md = BTreeMap::new();
        md.insert("format".to_owned(), "pt".to_owned());
        let bytes = write_header(&metas, Some(&md));
        assert_eq!(bytes.len() % 8, 0);
        let idx = parse_header(&bytes, 18).unwrap();
        assert_eq!(idx.metas, metas);
        assert_eq!(idx.metadata, Some(md));
        assert_eq!(idx.gap_bytes(), 4);
    }
}
