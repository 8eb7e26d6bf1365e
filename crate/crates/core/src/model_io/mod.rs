//! The `.irnn` container.
//!
//! ```text
//! "IRNN" | version u32 | manifest length u64 | manifest CRC32 u32 | manifest JSON
//! zero padding to 64 bytes, then each blob at a 64-byte aligned offset
//! ```
//!
//! The manifest is the serde form of the model with every long numeric array
//! lifted out into a little-endian blob and replaced by `{"$blob": name}`.
//! Integer arrays use the narrowest of `u8, i8, u16, i16, u32, i32, i64` that
//! holds every element. Float arrays are `f64` in integer models and `f32` in
//! float exports. Each blob entry records its offset, length and CRC32, so a
//! truncated or corrupted file fails to load instead of loading garbage.
//!
//! Object keys are sorted and blobs are laid out in traversal order, which
//! makes `save` byte-deterministic.

mod calib;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Number, Value};

pub use calib::{read_calibration, read_csv, read_raw_f32, write_csv, write_raw_f32};

use crate::error::{Error, Result};
use crate::model::{FloatModel, IrnnModel};

pub const MAGIC: &[u8; 4] = b"IRNN";
pub const FORMAT_VERSION: u32 = 1;
pub const BLOB_ALIGN: usize = 64;
/// Arrays shorter than this stay inline in the manifest.
pub const MIN_BLOB_LEN: usize = 8;

const HEADER_LEN: usize = 4 + 4 + 8 + 4;
const BLOB_KEY: &str = "$blob";

/// What a file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Integer,
    Float,
}

impl ModelKind {
    fn tag(self) -> &'static str {
        match self {
            ModelKind::Integer => "integer",
            ModelKind::Float => "float",
        }
    }

    fn float_dtype(self) -> DType {
        match self {
            ModelKind::Integer => DType::F64,
            ModelKind::Float => DType::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DType {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    I64,
    F32,
    F64,
}

impl DType {
    const ALL: [DType; 9] = [
        DType::U8,
        DType::I8,
        DType::U16,
        DType::I16,
        DType::U32,
        DType::I32,
        DType::I64,
        DType::F32,
        DType::F64,
    ];

    fn name(self) -> &'static str {
        match self {
            DType::U8 => "u8",
            DType::I8 => "i8",
            DType::U16 => "u16",
            DType::I16 => "i16",
            DType::U32 => "u32",
            DType::I32 => "i32",
            DType::I64 => "i64",
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Malformed(format!("unknown dtype `{s}`")))
    }

    fn width(self) -> usize {
        match self {
            DType::U8 | DType::I8 => 1,
            DType::U16 | DType::I16 => 2,
            DType::U32 | DType::I32 | DType::F32 => 4,
            DType::I64 | DType::F64 => 8,
        }
    }

    fn narrowest(lo: i64, hi: i64) -> Self {
        let fits = |min: i64, max: i64| lo >= min && hi <= max;
        if fits(0, u8::MAX as i64) {
            DType::U8
        } else if fits(i8::MIN as i64, i8::MAX as i64) {
            DType::I8
        } else if fits(0, u16::MAX as i64) {
            DType::U16
        } else if fits(i16::MIN as i64, i16::MAX as i64) {
            DType::I16
        } else if fits(0, u32::MAX as i64) {
            DType::U32
        } else if fits(i32::MIN as i64, i32::MAX as i64) {
            DType::I32
        } else {
            DType::I64
        }
    }
}

enum Lifted {
    Ints(Vec<i64>),
    Floats(Vec<f64>),
}

fn classify(items: &[Value]) -> Option<Lifted> {
    if items.len() < MIN_BLOB_LEN {
        return None;
    }
    if items.iter().all(|v| v.is_i64()) {
        return Some(Lifted::Ints(items.iter().filter_map(Value::as_i64).collect()));
    }
    if items.iter().all(|v| v.is_f64()) {
        return Some(Lifted::Floats(items.iter().filter_map(Value::as_f64).collect()));
    }
    None
}

struct Writer {
    float_dtype: DType,
    entries: Vec<Value>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, dtype: DType, bytes: Vec<u8>, len: usize) {
        pad_to(&mut self.payload, BLOB_ALIGN);
        self.entries.push(json!({
            "name": name,
            "dtype": dtype.name(),
            "len": len,
            "offset": self.payload.len(),
            "nbytes": bytes.len(),
            "crc32": crc32fast::hash(&bytes),
        }));
        self.payload.extend_from_slice(&bytes);
    }

    fn lift(&mut self, value: &mut Value, path: &str) -> Result<()> {
        match value {
            Value::Array(items) => {
                if let Some(lifted) = classify(items) {
                    let name = if path.is_empty() { "root".to_string() } else { path.to_string() };
                    let (dtype, bytes, len) = match lifted {
                        Lifted::Ints(v) => {
                            let lo = v.iter().copied().min().unwrap_or(0);
                            let hi = v.iter().copied().max().unwrap_or(0);
                            let dtype = DType::narrowest(lo, hi);
                            (dtype, encode_ints(&v, dtype), v.len())
                        }
                        Lifted::Floats(v) => {
                            let dtype = self.float_dtype;
                            (dtype, encode_floats(&v, dtype), v.len())
                        }
                    };
                    self.push(name.clone(), dtype, bytes, len);
                    *value = json!({ BLOB_KEY: name });
                } else {
                    for (i, item) in items.iter_mut().enumerate() {
                        self.lift(item, &join(path, &i.to_string()))?;
                    }
                }
            }
            Value::Object(map) => {
                if map.contains_key(BLOB_KEY) {
                    return Err(Error::Malformed(format!("reserved key `{BLOB_KEY}` at `{path}`")));
                }
                for (k, v) in map.iter_mut() {
                    self.lift(v, &join(path, k))?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    let rem = buf.len() % align;
    if rem != 0 {
        buf.resize(buf.len() + align - rem, 0);
    }
}

fn encode_ints(v: &[i64], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * dtype.width());
    for &x in v {
        match dtype {
            DType::U8 => out.push(x as u8),
            DType::I8 => out.extend_from_slice(&(x as i8).to_le_bytes()),
            DType::U16 => out.extend_from_slice(&(x as u16).to_le_bytes()),
            DType::I16 => out.extend_from_slice(&(x as i16).to_le_bytes()),
            DType::U32 => out.extend_from_slice(&(x as u32).to_le_bytes()),
            DType::I32 => out.extend_from_slice(&(x as i32).to_le_bytes()),
            _ => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    out
}

fn encode_floats(v: &[f64], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * dtype.width());
    for &x in v {
        match dtype {
            DType::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            _ => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    out
}

fn decode(bytes: &[u8], dtype: DType) -> Result<Vec<Value>> {
    let w = dtype.width();
    let chunks = bytes.chunks_exact(w);
    let value = |c: &[u8]| -> Result<Value> {
        let v = match dtype {
            DType::U8 => Value::from(c[0]),
            DType::I8 => Value::from(i8::from_le_bytes([c[0]])),
            DType::U16 => Value::from(u16::from_le_bytes([c[0], c[1]])),
            DType::I16 => Value::from(i16::from_le_bytes([c[0], c[1]])),
            DType::U32 => Value::from(u32::from_le_bytes(c.try_into().unwrap())),
            DType::I32 => Value::from(i32::from_le_bytes(c.try_into().unwrap())),
            DType::I64 => Value::from(i64::from_le_bytes(c.try_into().unwrap())),
            DType::F32 => float(f32::from_le_bytes(c.try_into().unwrap()) as f64)?,
            DType::F64 => float(f64::from_le_bytes(c.try_into().unwrap()))?,
        };
        Ok(v)
    };
    chunks.map(value).collect()
}

fn float(x: f64) -> Result<Value> {
    Number::from_f64(x)
        .map(Value::Number)
        .ok_or_else(|| Error::Malformed(format!("non-finite float {x} in blob")))
}

fn encode<T: Serialize>(model: &T, kind: ModelKind) -> Result<Vec<u8>> {
    let mut body = serde_json::to_value(model).map_err(|e| Error::Malformed(e.to_string()))?;
    let mut w = Writer {
        float_dtype: kind.float_dtype(),
        entries: Vec::new(),
        payload: Vec::new(),
    };
    w.lift(&mut body, "")?;
    let mut manifest = Map::new();
    manifest.insert("kind".into(), Value::from(kind.tag()));
    manifest.insert("model".into(), body);
    manifest.insert("tensors".into(), Value::Array(w.entries));
    let text = serde_json::to_vec(&Value::Object(manifest)).map_err(|e| Error::Malformed(e.to_string()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + text.len() + w.payload.len() + BLOB_ALIGN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&text).to_le_bytes());
    out.extend_from_slice(&text);
    pad_to(&mut out, BLOB_ALIGN);
    out.extend_from_slice(&w.payload);
    Ok(out)
}

/// Reads the header and the manifest, checking magic, version and the
/// manifest checksum. Returns the manifest and where the blob section starts.
pub fn read_manifest(bytes: &[u8]) -> Result<(Value, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Malformed(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Malformed("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let crc = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| HEADER_LEN.checked_add(l))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checksum("manifest".into()))?;
    let text = &bytes[HEADER_LEN..end];
    if crc32fast::hash(text) != crc {
        return Err(Error::Checksum("manifest".into()));
    }
    let manifest: Value = serde_json::from_slice(text).map_err(|e| Error::Malformed(e.to_string()))?;
    let start = end.div_ceil(BLOB_ALIGN) * BLOB_ALIGN;
    Ok((manifest, start))
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::Malformed(format!("missing `{key}`")))
}

fn usize_field(v: &Value, key: &str) -> Result<usize> {
    field(v, key)?
        .as_u64()
        .and_then(|x| usize::try_from(x).ok())
        .ok_or_else(|| Error::Malformed(format!("`{key}` is not an unsigned integer")))
}

fn restore(value: &mut Value, blobs: &mut Map<String, Value>) -> Result<()> {
    match value {
        Value::Object(map) => {
            if let Some(name) = map.get(BLOB_KEY) {
                let name = name
                    .as_str()
                    .ok_or_else(|| Error::Malformed("blob reference is not a string".into()))?;
                let data = blobs
                    .remove(name)
                    .ok_or_else(|| Error::DanglingTensor(name.to_string()))?;
                *value = data;
            } else {
                for v in map.values_mut() {
                    restore(v, blobs)?;
                }
            }
        }
        Value::Array(items) => {
            for v in items {
                restore(v, blobs)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn decode_file(bytes: &[u8], kind: ModelKind) -> Result<Value> {
    let (manifest, start) = read_manifest(bytes)?;
    let tag = field(&manifest, "kind")?.as_str().unwrap_or_default();
    if tag != kind.tag() {
        return Err(Error::Malformed(format!("expected a {} model, found `{tag}`", kind.tag())));
    }
    let entries = field(&manifest, "tensors")?
        .as_array()
        .ok_or_else(|| Error::Malformed("`tensors` is not an array".into()))?;
    let mut blobs = Map::new();
    for e in entries {
        let name = field(e, "name")?
            .as_str()
            .ok_or_else(|| Error::Malformed("tensor name is not a string".into()))?
            .to_string();
        let dtype = DType::parse(field(e, "dtype")?.as_str().unwrap_or_default())?;
        let (len, offset, nbytes) = (usize_field(e, "len")?, usize_field(e, "offset")?, usize_field(e, "nbytes")?);
        let crc = field(e, "crc32")?
            .as_u64()
            .ok_or_else(|| Error::Malformed("`crc32` is not an integer".into()))?;
        if len.checked_mul(dtype.width()) != Some(nbytes) {
            return Err(Error::Malformed(format!("`{name}`: {len} x {} != {nbytes} bytes", dtype.name())));
        }
        let raw = start
            .checked_add(offset)
            .and_then(|a| Some(a..a.checked_add(nbytes)?))
            .and_then(|r| bytes.get(r))
            .ok_or_else(|| Error::Checksum(name.clone()))?;
        if crc32fast::hash(raw) as u64 != crc {
            return Err(Error::Checksum(name));
        }
        blobs.insert(name, Value::Array(decode(raw, dtype)?));
    }
    let mut body = field(&manifest, "model")?.clone();
    restore(&mut body, &mut blobs)?;
    Ok(body)
}

fn decode_model<T: DeserializeOwned>(bytes: &[u8], kind: ModelKind) -> Result<T> {
    let body = decode_file(bytes, kind)?;
    serde_json::from_value(body).map_err(|e| Error::Malformed(e.to_string()))
}

/// Serializes a calibrated integer model.
pub fn save(model: &IrnnModel) -> Result<Vec<u8>> {
    encode(model, ModelKind::Integer)
}

pub fn load(bytes: &[u8]) -> Result<IrnnModel> {
    decode_model(bytes, ModelKind::Integer)
}

/// Serializes a float model with `f32` weights.
pub fn save_float(model: &FloatModel) -> Result<Vec<u8>> {
    encode(model, ModelKind::Float)
}

pub fn load_float(bytes: &[u8]) -> Result<FloatModel> {
    let m: FloatModel = decode_model(bytes, ModelKind::Float)?;
    m.validate()?;
    Ok(m)
}

/// The kind stored in a file, from its manifest.
pub fn kind_of(bytes: &[u8]) -> Result<ModelKind> {
    let (manifest, _) = read_manifest(bytes)?;
    match field(&manifest, "kind")?.as_str() {
        Some("integer") => Ok(ModelKind::Integer),
        Some("float") => Ok(ModelKind::Float),
        other => Err(Error::Malformed(format!("unknown model kind {other:?}"))),
    }
}

pub fn save_file(model: &IrnnModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, save(model)?)?;
    Ok(())
}

pub fn load_file(path: impl AsRef<Path>) -> Result<IrnnModel> {
    load(&std::fs::read(path)?)
}

pub fn save_float_file(model: &FloatModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, save_float(model)?)?;
    Ok(())
}

/// Reads a float model from an `.irnn` float export or from plain JSON.
pub fn load_float_file(path: impl AsRef<Path>) -> Result<FloatModel> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        return load_float(&bytes);
    }
    let m: FloatModel = serde_json::from_slice(&bytes).map_err(|e| Error::Malformed(e.to_string()))?;
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy_model, ToySpec};

    #[test]
    fn narrowest_dtype() {
        assert_eq!(DType::narrowest(0, 255), DType::U8);
        assert_eq!(DType::narrowest(-1, 5), DType::I8);
        assert_eq!(DType::narrowest(0, 256), DType::U16);
        assert_eq!(DType::narrowest(-129, 0), DType::I16);
        assert_eq!(DType::narrowest(0, 1 << 20), DType::U32);
        assert_eq!(DType::narrowest(-(1 << 20), 0), DType::I32);
        assert_eq!(DType::narrowest(i64::MIN, 0), DType::I64);
    }

    #[test]
    fn int_codecs_round_trip() {
        let v: Vec<i64> = vec![-3, 0, 7, 100, -100, 5, 1, 2];
        for d in [DType::I8, DType::I16, DType::I32, DType::I64] {
            let back: Vec<i64> = decode(&encode_ints(&v, d), d)
                .unwrap()
                .iter()
                .map(|x| x.as_i64().unwrap())
                .collect();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn blobs_are_aligned_and_lifted() {
        let f = toy_model(ToySpec::default(), 1).unwrap();
        let bytes = save_float(&f).unwrap();
        let (manifest, start) = read_manifest(&bytes).unwrap();
        assert_eq!(start % BLOB_ALIGN, 0);
        let entries = manifest["tensors"].as_array().unwrap();
        assert!(!entries.is_empty());
        for e in entries {
            assert_eq!(e["offset"].as_u64().unwrap() % BLOB_ALIGN as u64, 0);
            assert_eq!(e["dtype"], "f32");
        }
        assert_eq!(kind_of(&bytes).unwrap(), ModelKind::Float);
        assert!(matches!(load(&bytes), Err(Error::Malformed(_))));
    }

    #[test]
    fn float_export_round_trips_at_f32() {
        use crate::model::FloatLayer;
        let f = toy_model(ToySpec::default(), 2).unwrap();
        let back = load_float(&save_float(&f).unwrap()).unwrap();
        let (FloatLayer::Lstm(a), FloatLayer::Lstm(b)) = (&f.layers[0], &back.layers[0]) else {
            panic!("toy layer is a unidirectional LSTM");
        };
        for (x, y) in a.wx.iter().zip(&b.wx) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }

    #[test]
    fn header_errors() {
        let f = toy_model(ToySpec::default(), 3).unwrap();
        let bytes = save_float(&f).unwrap();
        assert!(matches!(read_manifest(&bytes[..10]), Err(Error::Malformed(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_manifest(&bad), Err(Error::Malformed(_))));
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(read_manifest(&bad).unwrap_err(), Error::VersionMismatch(2));
        let mut bad = bytes.clone();
        bad[HEADER_LEN + 3] ^= 1;
        assert_eq!(read_manifest(&bad).unwrap_err(), Error::Checksum("manifest".into()));
    }

    #[test]
    fn dangling_reference() {
        let f = toy_model(ToySpec::default(), 4).unwrap();
        let bytes = save_float(&f).unwrap();
        let (mut manifest, start) = read_manifest(&bytes).unwrap();
        manifest["tensors"].as_array_mut().unwrap().remove(0);
        let text = serde_json::to_vec(&manifest).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&text).to_le_bytes());
        out.extend_from_slice(&text);
        pad_to(&mut out, BLOB_ALIGN);
        out.extend_from_slice(&bytes[start..]);
        assert!(matches!(load_float(&out), Err(Error::DanglingTensor(_))));
    }
}
