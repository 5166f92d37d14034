//! `FeatureStore` and its `FSTR` binary file.
//!
//! ```text
//! "FSTR" | u32 version = 1 | u32 dim | u64 count
//! per entry: u16 id length | id UTF-8 | u16 vehicle length | vehicle UTF-8
//!            | i32 camera (-1 = none) | dim × f32
//! ```
//!
//! All integers and floats are little-endian. The aspect ratio of the model
//! that produced a store lives in a JSON sidecar (`<file>.meta.json`).

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::FeatureVector;

pub const STORE_MAGIC: &[u8; 4] = b"FSTR";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub image_id: String,
    pub vehicle_id: String,
    pub camera_id: Option<i32>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StoreMeta {
    /// Aspect ratio of the producing model; absent for fused stores.
    pub model_ar: Option<f64>,
    /// Free-form provenance, e.g. `"encode"` or `"fuse:weighted_sum"`.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub dim: usize,
    pub entries: Vec<StoreEntry>,
    pub meta: StoreMeta,
}

/// Numeric camera code from a label such as `"c003"` or `"2"`: the decimal
/// digits it contains.
pub fn camera_code(label: &str) -> Option<i32> {
    let digits: String = label.chars().filter(char::is_ascii_digit).collect();
    digits.parse().ok()
}

impl FeatureStore {
    pub fn new(dim: usize, meta: StoreMeta) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            meta,
        }
    }

    pub fn from_entries(entries: Vec<StoreEntry>, meta: StoreMeta) -> Result<Self> {
        let dim = entries.first().map(|e| e.values.len()).unwrap_or(0);
        let mut store = Self::new(dim, meta);
        for e in entries {
            store.push(e)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, entry: StoreEntry) -> Result<()> {
        if entry.values.len() != self.dim {
            return Err(Error::DimensionMismatch(vec![self.dim, entry.values.len()]));
        }
        if self.entries.iter().any(|e| e.image_id == entry.image_id) {
            return Err(Error::InvalidArgument(format!("duplicate image id {}", entry.image_id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, image_id: &str) -> Option<&StoreEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn feature(&self, index: usize) -> FeatureVector {
        let e = &self.entries[index];
        FeatureVector::new(
            e.image_id.clone(),
            self.meta.model_ar.unwrap_or(f64::NAN),
            e.values.clone(),
        )
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let ctx = "feature store";
        let io = |e: std::io::Error| Error::format(ctx, e.to_string());
        w.write_all(STORE_MAGIC).map_err(io)?;
        w.write_all(&STORE_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes()).map_err(io)?;
        for e in &self.entries {
            for s in [&e.image_id, &e.vehicle_id] {
                let len = u16::try_from(s.len())
                    .map_err(|_| Error::format(ctx, format!("string too long: {s}")))?;
                w.write_all(&len.to_le_bytes()).map_err(io)?;
                w.write_all(s.as_bytes()).map_err(io)?;
            }
            w.write_all(&e.camera_id.unwrap_or(-1).to_le_bytes()).map_err(io)?;
            for &v in &e.values {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let ctx = "feature store";
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(Error::format(ctx, "bad magic"));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != STORE_VERSION {
            return Err(Error::format(ctx, format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(read_array(r)?) as usize;
        let count = u64::from_le_bytes(read_array(r)?);
        let mut entries = Vec::new();
        let mut ids = HashSet::new();
        for _ in 0..count {
            let image_id = read_string(r)?;
            let vehicle_id = read_string(r)?;
            let camera = i32::from_le_bytes(read_array(r)?);
            let mut buf = vec![0u8; dim * 4];
            read_exact(r, &mut buf)?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
                .collect();
            if !ids.insert(image_id.clone()) {
                return Err(Error::format(ctx, format!("duplicate image id {image_id}")));
            }
            entries.push(StoreEntry {
                image_id,
                vehicle_id,
                camera_id: (camera >= 0).then_some(camera),
                values,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::format(ctx, e.to_string()))? != 0 {
            return Err(Error::format(ctx, "trailing bytes after last entry"));
        }
        Ok(Self {
            dim,
            entries,
            meta: StoreMeta::default(),
        })
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".meta.json");
        PathBuf::from(name)
    }

    /// Writes the store and its metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        let meta_path = Self::meta_path(path);
        fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))
    }

    /// Reads a store; the sidecar is optional.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = Self::read_from(&mut BufReader::new(file)).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            other => other,
        })?;
        let meta_path = Self::meta_path(path);
        if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            store.meta = serde_json::from_str(&text)
                .map_err(|e| Error::format(meta_path.display().to_string(), e.to_string()))?;
        }
        Ok(store)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format("feature store", format!("truncated: {e}")))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = u16::from_le_bytes(read_array(r)?) as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format("feature store", "string is not UTF-8"))
}
