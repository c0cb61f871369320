//! Binary parameter container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"CONVQACK"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     manifest length L in bytes, u64 little-endian
//! 20      L     manifest, UTF-8 JSON (see below)
//! 20+L    ...   data region: raw little-endian value blocks
//! ```
//!
//! The manifest is
//! `{"metadata": {str: str}, "tensors": [{"name", "shape", "dtype", "offset", "trainable"}]}`
//! where `dtype` is `"f64"` or `"f32"` and `offset` is the byte offset of the
//! tensor's block from the start of the data region. Blocks hold
//! `product(shape)` values in row-major order. Writers emit `f64`; readers
//! accept both widths.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CONVQACK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    /// `(name, value, trainable)` in file order.
    pub tensors: Vec<(String, Tensor, bool)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, t, _)| t)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    metadata: BTreeMap<String, String>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    #[serde(default)]
    trainable: bool,
}

pub fn write_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<()> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    for (name, t, trainable) in &ckpt.tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            trainable: *trainable,
        });
        offset += 8 * t.numel() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        metadata: ckpt.metadata.clone(),
        tensors: entries,
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    let mut buf = Vec::new();
    for (_, t, _) in &ckpt.tensors {
        buf.clear();
        buf.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::parse("checkpoint", None, msg);
    if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let manifest_end = usize::try_from(manifest_len)
        .ok()
        .and_then(|l| HEADER_LEN.checked_add(l))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(format!("manifest length {manifest_len} exceeds file")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| bad(format!("manifest: {e}")))?;
    let data = &bytes[manifest_end..];

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let width = match e.dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            other => return Err(bad(format!("tensor {}: unknown dtype {other:?}", e.name))),
        };
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("tensor {}: shape overflows", e.name)))?;
        let start = usize::try_from(e.offset).map_err(|_| bad(format!("tensor {}: offset too large", e.name)))?;
        let block = numel
            .checked_mul(width)
            .and_then(|len| start.checked_add(len).map(|end| (start, end)))
            .filter(|&(_, end)| end <= data.len())
            .map(|(s, end)| &data[s..end])
            .ok_or_else(|| bad(format!("tensor {}: block outside data region", e.name)))?;
        let values: Vec<f64> = if width == 8 {
            block
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        } else {
            block
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        };
        let t = Tensor::new(e.shape, values).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?;
        tensors.push((e.name, t, e.trainable));
    }
    Ok(Checkpoint {
        metadata: manifest.metadata,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut metadata = BTreeMap::new();
        metadata.insert("config".into(), "hidden = 4\n".into());
        Checkpoint {
            metadata,
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap(), true),
                ("b".into(), Tensor::vector(vec![f64::MAX, 0.0, -0.0]), false),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ck).unwrap();
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    }

    #[test]
    fn reads_f32_blocks() {
        let manifest = br#"{"metadata":{},"tensors":[{"name":"x","shape":[2],"dtype":"f32","offset":0}]}"#;
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend((manifest.len() as u64).to_le_bytes());
        bytes.extend(manifest);
        bytes.extend(1.5f32.to_le_bytes());
        bytes.extend((-2.0f32).to_le_bytes());
        let ck = read_checkpoint(&bytes).unwrap();
        assert_eq!(ck.tensor("x").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn truncated_files_are_rejected() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()).unwrap();
        for cut in [0, 7, 19, 40, bytes.len() - 1] {
            assert!(read_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }
}
