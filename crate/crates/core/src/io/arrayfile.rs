//! A self-describing container of named numeric arrays.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header, then the
//! raw data blob. The header lists every array (name, dtype, shape, byte offset
//! into the blob) plus an arbitrary JSON `meta` document. Floats are stored as
//! little-endian f64, integer arrays as little-endian i64, so files are
//! bit-exact across platforms.
//!
//! Checkpoints and hand-template assets are both stored in this format.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MVHARRS1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    dtype: String, // "f64" | "i64"
    shape: Vec<usize>,
    offset: usize,
    len: usize, // element count
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Header {
    arrays: BTreeMap<String, ArrayEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// In-memory form of the container.
#[derive(Default)]
pub struct ArrayFile {
    f64_arrays: BTreeMap<String, ArrayD<f64>>,
    i64_arrays: BTreeMap<String, ArrayD<i64>>,
    pub meta: serde_json::Value,
}

impl ArrayFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, arr: ArrayD<f64>) {
        self.f64_arrays.insert(name.into(), arr);
    }

    pub fn insert_i64(&mut self, name: impl Into<String>, arr: ArrayD<i64>) {
        self.i64_arrays.insert(name.into(), arr);
    }

    pub fn f64_array(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.f64_arrays
            .get(name)
            .ok_or_else(|| Error::ArrayFile(format!("missing f64 array '{name}'")))
    }

    pub fn i64_array(&self, name: &str) -> Result<&ArrayD<i64>> {
        self.i64_arrays
            .get(name)
            .ok_or_else(|| Error::ArrayFile(format!("missing i64 array '{name}'")))
    }

    pub fn f64_names(&self) -> impl Iterator<Item = &str> {
        self.f64_arrays.keys().map(|s| s.as_str())
    }

    /// Fetch an f64 array and check its shape.
    pub fn f64_checked(&self, name: &str, shape: &[usize]) -> Result<&ArrayD<f64>> {
        let arr = self.f64_array(name)?;
        if arr.shape() != shape {
            return Err(Error::ArrayFile(format!(
                "array '{name}' has shape {:?}, expected {:?}",
                arr.shape(),
                shape
            )));
        }
        Ok(arr)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = Header {
            meta: self.meta.clone(),
            ..Default::default()
        };
        let mut blob: Vec<u8> = Vec::new();
        for (name, arr) in &self.f64_arrays {
            let offset = blob.len();
            for v in arr.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            header.arrays.insert(
                name.clone(),
                ArrayEntry {
                    dtype: "f64".into(),
                    shape: arr.shape().to_vec(),
                    offset,
                    len: arr.len(),
                },
            );
        }
        for (name, arr) in &self.i64_arrays {
            let offset = blob.len();
            for v in arr.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            header.arrays.insert(
                name.clone(),
                ArrayEntry {
                    dtype: "i64".into(),
                    shape: arr.shape().to_vec(),
                    offset,
                    len: arr.len(),
                },
            );
        }
        let header_json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::ArrayFile("bad magic (not a mvhand array file)".into()));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json)?;
        let header: Header = serde_json::from_slice(&header_json)?;
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;

        let mut out = ArrayFile {
            meta: header.meta,
            ..Default::default()
        };
        for (name, entry) in header.arrays {
            let nbytes = entry.len * 8;
            let slice = blob.get(entry.offset..entry.offset + nbytes).ok_or_else(|| {
                Error::ArrayFile(format!("array '{name}' extends past end of blob"))
            })?;
            if entry.shape.iter().product::<usize>() != entry.len {
                return Err(Error::ArrayFile(format!(
                    "array '{name}': shape {:?} does not describe {} elements",
                    entry.shape, entry.len
                )));
            }
            match entry.dtype.as_str() {
                "f64" => {
                    let vals: Vec<f64> = slice
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), vals)
                        .map_err(|e| Error::ArrayFile(e.to_string()))?;
                    out.f64_arrays.insert(name, arr);
                }
                "i64" => {
                    let vals: Vec<i64> = slice
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), vals)
                        .map_err(|e| Error::ArrayFile(e.to_string()))?;
                    out.i64_arrays.insert(name, arr);
                }
                other => {
                    return Err(Error::ArrayFile(format!(
                        "array '{name}' has unsupported dtype '{other}'"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
