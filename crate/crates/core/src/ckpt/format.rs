use std::collections::BTreeMap;
use std::fmt;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use super::{shape_numel, Checkpoint, CkptError, Dtype, Tensor, METADATA_KEY};

/// Header is padded with spaces to this alignment so payloads start on an
/// 8-byte boundary.
const HEADER_ALIGN: usize = 8;

/// Serializes `ckpt`. Payloads are laid out in lexicographic name order with
/// no gaps; the output is a pure function of the checkpoint.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut header = String::from("{");
    let mut first = true;
    let mut push_entry = |header: &mut String, key: &str, value: String| {
        if !first {
            header.push(',');
        }
        first = false;
        header.push_str(&serde_json::to_string(key).expect("string serializes"));
        header.push(':');
        header.push_str(&value);
    };

    if !ckpt.metadata.is_empty() {
        let meta = serde_json::to_string(&ckpt.metadata).expect("string map serializes");
        push_entry(&mut header, METADATA_KEY, meta);
    }
    let mut offset = 0usize;
    for (name, tensor) in &ckpt.tensors {
        let end = offset + tensor.bytes().len();
        let shape: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        let entry = format!(
            "{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{offset},{end}]}}",
            tensor.dtype(),
            shape.join(",")
        );
        push_entry(&mut header, name, entry);
        offset = end;
    }
    header.push('}');
    while header.len() % HEADER_ALIGN != 0 {
        header.push(' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for tensor in ckpt.tensors.values() {
        out.extend_from_slice(tensor.bytes());
    }
    out
}

/// JSON object kept as an ordered entry list so duplicate keys are visible.
struct Entries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for Entries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = Entries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Entries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

fn malformed(msg: impl Into<String>) -> CkptError {
    CkptError::MalformedHeader(msg.into())
}

fn parse_u64_array(value: &Value, what: &str, name: &str) -> Result<Vec<u64>, CkptError> {
    let arr = value
        .as_array()
        .ok_or_else(|| malformed(format!("`{name}`: {what} is not an array")))?;
    arr.iter()
        .map(|v| {
            v.as_u64()
                .ok_or_else(|| malformed(format!("`{name}`: {what} holds a non-integer")))
        })
        .collect()
}

fn parse_entry(name: String, value: &Value) -> Result<Entry, CkptError> {
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(format!("`{name}`: entry is not an object")))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "dtype" | "shape" | "data_offsets") {
            return Err(malformed(format!("`{name}`: unexpected field `{key}`")));
        }
    }
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("`{name}`: missing dtype")))?;
    let shape = parse_u64_array(
        obj.get("shape")
            .ok_or_else(|| malformed(format!("`{name}`: missing shape")))?,
        "shape",
        &name,
    )?;
    let offsets = parse_u64_array(
        obj.get("data_offsets")
            .ok_or_else(|| malformed(format!("`{name}`: missing data_offsets")))?,
        "data_offsets",
        &name,
    )?;
    let dtype = Dtype::parse(dtype_str).ok_or_else(|| CkptError::UnsupportedDtype {
        name: name.clone(),
        dtype: dtype_str.to_string(),
    })?;
    let [begin, end] = offsets[..] else {
        return Err(malformed(format!("`{name}`: data_offsets must have two entries")));
    };
    if begin > end {
        return Err(malformed(format!("`{name}`: data_offsets begin > end")));
    }
    let shape: Vec<usize> = shape
        .into_iter()
        .map(|d| usize::try_from(d).map_err(|_| malformed(format!("`{name}`: extent too large"))))
        .collect::<Result<_, _>>()?;
    let nbytes = shape_numel(&shape)
        .and_then(|n| n.checked_mul(dtype.byte_width()))
        .ok_or_else(|| malformed(format!("`{name}`: shape overflows")))?;
    if (end - begin) != nbytes as u64 {
        return Err(malformed(format!(
            "`{name}`: data_offsets span {} bytes but shape {shape:?} of {dtype} needs {nbytes}",
            end - begin
        )));
    }
    Ok(Entry {
        name,
        dtype,
        shape,
        begin,
        end,
    })
}

/// Parses a container from memory. Never reads outside the declared offsets;
/// every malformed input yields a typed error.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CkptError> {
    if bytes.len() < 8 {
        return Err(malformed("file shorter than the 8-byte length prefix"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let rest = (bytes.len() - 8) as u64;
    if header_len > rest {
        return Err(malformed(format!(
            "length prefix {header_len} exceeds the {rest} bytes that follow"
        )));
    }
    let header_end = 8 + header_len as usize;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| malformed(format!("header is not UTF-8: {e}")))?;
    let Entries(raw) = serde_json::from_str(header)
        .map_err(|e| malformed(format!("header is not a JSON object: {e}")))?;
    let data = &bytes[header_end..];

    let mut metadata = BTreeMap::new();
    let mut seen_meta = false;
    let mut entries = Vec::with_capacity(raw.len());
    for (key, value) in raw {
        if key == METADATA_KEY {
            if seen_meta {
                return Err(malformed("duplicate __metadata__ key"));
            }
            seen_meta = true;
            let obj = value
                .as_object()
                .ok_or_else(|| malformed("__metadata__ is not an object"))?;
            for (k, v) in obj {
                let s = v
                    .as_str()
                    .ok_or_else(|| malformed(format!("metadata value for `{k}` is not a string")))?;
                metadata.insert(k.clone(), s.to_string());
            }
            continue;
        }
        if key.is_empty() {
            return Err(CkptError::InvalidName(key));
        }
        entries.push(parse_entry(key, &value)?);
    }

    // Payload placement is checked in offset order so files written by other
    // tools with a different layout order still load.
    entries.sort_by(|a, b| (a.begin, a.end, &a.name).cmp(&(b.begin, b.end, &b.name)));
    let mut cursor = 0u64;
    let mut prev: Option<&Entry> = None;
    for entry in &entries {
        if entry.begin < cursor {
            return Err(CkptError::OverlappingOffsets {
                first: prev.map(|p| p.name.clone()).unwrap_or_default(),
                second: entry.name.clone(),
            });
        }
        if entry.end > data.len() as u64 {
            return Err(CkptError::TruncatedData {
                name: entry.name.clone(),
                end: entry.end,
                available: data.len() as u64,
            });
        }
        if entry.begin > cursor {
            return Err(malformed(format!(
                "gap in data region before `{}` (bytes {cursor}..{})",
                entry.name, entry.begin
            )));
        }
        cursor = entry.end;
        prev = Some(entry);
    }
    if cursor != data.len() as u64 {
        return Err(malformed(format!(
            "data region holds {} bytes but tensors cover {cursor}",
            data.len()
        )));
    }

    let mut ckpt = Checkpoint::new().with_metadata(metadata);
    for entry in entries {
        let payload = data[entry.begin as usize..entry.end as usize].to_vec();
        let tensor = Tensor::new(entry.dtype, entry.shape, payload)?;
        ckpt.insert(entry.name, tensor)?;
    }
    Ok(ckpt)
}
