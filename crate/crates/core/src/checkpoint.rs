//! Binary checkpoint container for parameter stores.
//!
//! Layout: 8-byte magic, u32 LE format version, u32 LE header length, a JSON
//! header describing the model kind and every layer (name, group, shape),
//! then each layer's weight matrix (row-major f64 LE) followed by its bias.
//! Floats are written bit-exactly, so save → load → save reproduces the file
//! byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamGroup, ParamStore};

const MAGIC: &[u8; 8] = b"AFUSE\0CK";
const VERSION: u32 = 1;

/// What a checkpoint contains; loaders reject mismatched kinds so a gating
/// network is never silently read as a classifier bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bank,
    Adafuse,
    Moe,
    Dynmm,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Bank => "bank",
            ModelKind::Adafuse => "adafuse",
            ModelKind::Moe => "moe",
            ModelKind::Dynmm => "dynmm",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDesc {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    layers: Vec<LayerDesc>,
}

pub fn save_checkpoint(path: &Path, kind: ModelKind, store: &ParamStore) -> Result<()> {
    let header = Header {
        kind,
        layers: store
            .layers
            .iter()
            .map(|l| LayerDesc {
                name: l.name.clone(),
                group: l.group,
                rows: l.w.rows,
                cols: l.w.cols,
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for layer in &store.layers {
        for v in &layer.w.data {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &layer.b {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_f64(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Load a checkpoint, verifying magic, version, and model kind. The returned
/// store has zeroed gradient accumulators.
pub fn load_checkpoint(path: &Path, expected: ModelKind) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    r.read_exact(&mut u32buf)?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.kind != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {} model, expected {}",
            header.kind.label(),
            expected.label()
        )));
    }
    let mut store = ParamStore::new();
    for desc in &header.layers {
        let id = store.add_layer(
            &desc.name,
            desc.group,
            desc.rows,
            desc.cols,
            &mut crate::rng::substream(0, "checkpoint-placeholder"),
        );
        let w = read_exact_f64(&mut r, desc.rows * desc.cols, &desc.name)?;
        let b = read_exact_f64(&mut r, desc.rows, &desc.name)?;
        let layer = store.layer_mut(id);
        layer.w = Matrix {
            rows: desc.rows,
            cols: desc.cols,
            data: w,
        };
        layer.b = b;
        layer.zero_grad();
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last layer".into()));
    }
    Ok(store)
}

/// Copy parameters from a loaded checkpoint into the leading layers of a
/// larger live store (e.g. a pretrained bank into a full policy assembly),
/// checking name and shape agreement layer by layer.
pub fn load_into_prefix(path: &Path, expected: ModelKind, store: &mut ParamStore) -> Result<()> {
    let loaded = load_checkpoint(path, expected)?;
    if loaded.layers.len() > store.layers.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} layers but target has only {}",
            loaded.layers.len(),
            store.layers.len()
        )));
    }
    for (i, src) in loaded.layers.iter().enumerate() {
        let dst = &mut store.layers[i];
        if src.name != dst.name || src.w.rows != dst.w.rows || src.w.cols != dst.w.cols {
            return Err(Error::Checkpoint(format!(
                "layer {i} mismatch: checkpoint {} ({}x{}), target {} ({}x{})",
                src.name, src.w.rows, src.w.cols, dst.name, dst.w.rows, dst.w.cols
            )));
        }
        dst.w.data.copy_from_slice(&src.w.data);
        dst.b.copy_from_slice(&src.b);
    }
    Ok(())
}
