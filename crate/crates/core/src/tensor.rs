//! Checkpoint weight maps and the MKT1 container format.
//!
//! A [`WeightMap`] is an ordered map from parameter name to a dense f32
//! tensor. On disk it lives in a single-file container:
//!
//! ```text
//! bytes 0..4    magic "MKT1"
//! bytes 4..12   u64 LE header length H
//! bytes 12..12+H UTF-8 JSON: {name: {"shape": [..], "offset": N, "len_bytes": N}, ..}
//! payload       tensors packed contiguously in lexicographic name order,
//!               row-major little-endian f32; offsets relative to payload start
//! ```
//!
//! Saving is canonical: the same logical map always produces byte-identical
//! files, so checkpoints can be compared with a plain hash.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"MKT1";

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, checking that the data length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "tensor shape {shape:?} has a non-positive dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidInput(format!(
                "tensor shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        assert_eq!(self.shape.len(), 2, "row() requires a rank-2 tensor");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// An ordered map from parameter name to tensor. Iteration is always
/// lexicographic by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightMap {
    entries: BTreeMap<String, Tensor>,
}

impl WeightMap {
    pub fn new() -> Self {
        WeightMap::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidInput("empty parameter name".to_string()));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidInput(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn schema_digest(&self) -> SchemaDigest {
        SchemaDigest::of(self)
    }

    /// Error if any value is NaN or infinite, naming the offending entry.
    pub fn check_finite(&self) -> Result<()> {
        for (name, tensor) in &self.entries {
            if let Some(index) = tensor.first_non_finite() {
                return Err(Error::NonFinite {
                    name: name.clone(),
                    index,
                });
            }
        }
        Ok(())
    }
}

/// Elementwise `a + b` over maps with equal schemas.
pub fn add(a: &WeightMap, b: &WeightMap) -> Result<WeightMap> {
    zip_map(a, b, |x, y| x + y)
}

/// Elementwise `a - b` over maps with equal schemas.
pub fn sub(a: &WeightMap, b: &WeightMap) -> Result<WeightMap> {
    zip_map(a, b, |x, y| x - y)
}

/// Every element multiplied by `c`.
pub fn scale(a: &WeightMap, c: f32) -> WeightMap {
    let mut out = WeightMap::new();
    for (name, tensor) in a.iter() {
        let data = tensor.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(tensor.shape().to_vec(), data).expect("shape preserved");
        out.insert(name.clone(), t).expect("names preserved");
    }
    out
}

fn zip_map(a: &WeightMap, b: &WeightMap, f: impl Fn(f32, f32) -> f32) -> Result<WeightMap> {
    validate_compat(&[a, b])?;
    let mut out = WeightMap::new();
    for ((name, ta), (_, tb)) in a.iter().zip(b.iter()) {
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        out.insert(name.clone(), t).expect("names preserved");
    }
    Ok(out)
}

/// The (name, shape) signature of a weight map plus a 64-bit digest of it.
/// Two maps are merge-compatible iff their digests are equal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaDigest {
    pairs: Vec<(String, Vec<usize>)>,
    hash: u64,
}

impl SchemaDigest {
    pub fn of(map: &WeightMap) -> Self {
        let pairs: Vec<(String, Vec<usize>)> = map
            .iter()
            .map(|(name, t)| (name.clone(), t.shape().to_vec()))
            .collect();
        let mut hasher = Fnv64::new();
        for (name, shape) in &pairs {
            hasher.update(name.as_bytes());
            hasher.update(&[0u8]);
            hasher.update(&(shape.len() as u64).to_le_bytes());
            for &dim in shape {
                hasher.update(&(dim as u64).to_le_bytes());
            }
        }
        SchemaDigest {
            pairs,
            hash: hasher.finish(),
        }
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn pairs(&self) -> &[(String, Vec<usize>)] {
        &self.pairs
    }
}

/// Check that all maps agree on parameter names and shapes, returning the
/// shared digest. The error names the first differing parameter.
pub fn validate_compat(maps: &[&WeightMap]) -> Result<SchemaDigest> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("validate_compat on empty list".to_string()))?;
    for other in &maps[1..] {
        let mut a = first.iter();
        let mut b = other.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => break,
                (Some((name, ta)), Some((nb, tb))) => {
                    if name != nb {
                        // Lexicographic iteration: the smaller name is missing
                        // from the other map.
                        let (missing, left, right) = if name < nb {
                            (name, Some(ta.shape().to_vec()), None)
                        } else {
                            (nb, None, Some(tb.shape().to_vec()))
                        };
                        return Err(Error::SchemaMismatch {
                            name: missing.clone(),
                            left,
                            right,
                        });
                    }
                    if ta.shape() != tb.shape() {
                        return Err(Error::SchemaMismatch {
                            name: name.clone(),
                            left: Some(ta.shape().to_vec()),
                            right: Some(tb.shape().to_vec()),
                        });
                    }
                }
                (Some((name, ta)), None) => {
                    return Err(Error::SchemaMismatch {
                        name: name.clone(),
                        left: Some(ta.shape().to_vec()),
                        right: None,
                    });
                }
                (None, Some((name, tb))) => {
                    return Err(Error::SchemaMismatch {
                        name: name.clone(),
                        left: None,
                        right: Some(tb.shape().to_vec()),
                    });
                }
            }
        }
    }
    Ok(first.schema_digest())
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    offset: u64,
    len_bytes: u64,
}

/// Serialize a map to canonical MKT1 bytes.
pub fn to_bytes(map: &WeightMap) -> Result<Vec<u8>> {
    map.check_finite()?;
    let mut header: BTreeMap<&str, HeaderEntry> = BTreeMap::new();
    let mut offset: u64 = 0;
    for (name, tensor) in map.iter() {
        let len_bytes = (tensor.numel() as u64) * 4;
        header.insert(
            name,
            HeaderEntry {
                shape: tensor.shape().to_vec(),
                offset,
                len_bytes,
            },
        );
        offset = offset
            .checked_add(len_bytes)
            .ok_or_else(|| Error::Format("payload size overflow".to_string()))?;
    }
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header serialization: {e}")))?;

    let mut out = Vec::with_capacity(12 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, tensor) in map.iter() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse MKT1 bytes, validating the invariants of the format.
pub fn from_bytes(bytes: &[u8]) -> Result<WeightMap> {
    if bytes.len() < 12 {
        return Err(Error::Format("file shorter than magic + header length".to_string()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"MKT1\"",
            &bytes[0..4]
        )));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let header_end = 12u64
        .checked_add(header_len)
        .ok_or_else(|| Error::Format("header length overflow".to_string()))?;
    if header_end > bytes.len() as u64 {
        return Err(Error::Format(format!(
            "declared header length {header_len} exceeds file size"
        )));
    }
    let header: BTreeMap<String, HeaderEntry> =
        serde_json::from_slice(&bytes[12..header_end as usize])
            .map_err(|e| Error::Format(format!("header JSON: {e}")))?;
    let payload = &bytes[header_end as usize..];

    let mut map = WeightMap::new();
    let mut expected_offset: u64 = 0;
    for (name, entry) in &header {
        if name.is_empty() {
            return Err(Error::Format("empty tensor name in header".to_string()));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.shape.iter().any(|&d| d == 0) {
            return Err(Error::Format(format!(
                "tensor '{name}' has a non-positive dimension in shape {:?}",
                entry.shape
            )));
        }
        if entry.len_bytes != (numel as u64) * 4 {
            return Err(Error::Format(format!(
                "tensor '{name}' declares {} bytes but shape {:?} needs {}",
                entry.len_bytes,
                entry.shape,
                numel * 4
            )));
        }
        // Canonical packing: contiguous in lexicographic name order.
        if entry.offset != expected_offset {
            return Err(Error::Format(format!(
                "tensor '{name}' at offset {} but canonical packing expects {}",
                entry.offset, expected_offset
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.len_bytes)
            .ok_or_else(|| Error::Format(format!("tensor '{name}' offset/length overflow")))?;
        if end > payload.len() as u64 {
            return Err(Error::Format(format!("truncated tensor '{name}'")));
        }
        expected_offset = end;

        let raw = &payload[entry.offset as usize..end as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: name.clone(),
                index,
            });
        }
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Format(format!("tensor '{name}': {e}")))?;
        map.insert(name.clone(), tensor)
            .map_err(|e| Error::Format(format!("tensor '{name}': {e}")))?;
    }
    if expected_offset != payload.len() as u64 {
        return Err(Error::Format(format!(
            "payload has {} trailing bytes",
            payload.len() as u64 - expected_offset
        )));
    }
    Ok(map)
}

/// Load a weight map from an MKT1 file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<WeightMap> {
    let bytes = fsutil::read_bytes(path.as_ref())?;
    from_bytes(&bytes)
}

/// Save a weight map to an MKT1 file (canonical bytes, atomic write).
pub fn save_checkpoint(map: &WeightMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(map)?;
    fsutil::write_atomic(path.as_ref(), &bytes)
}

/// Incremental FNV-1a 64-bit hash.
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64::new()
    }
}
