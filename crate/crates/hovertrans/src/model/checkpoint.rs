//! Checkpoint container: `HVTC` magic, format version, JSON header
//! (config, training state, array index), then raw little-endian f64
//! payload. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{build_model, HoverTransNet, ModelConfig};

const MAGIC: &[u8; 4] = b"HVTC";
const FORMAT_VERSION: u32 = 1;

/// Training-state metadata carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

impl TrainState {
    pub fn fresh(seed: u64) -> Self {
        Self { seed, epoch: 0, step: 0, train_loss: None, val_loss: None }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    state: TrainState,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    decay: bool,
}

pub fn save_checkpoint(net: &HoverTransNet, state: &TrainState, path: &Path) -> Result<()> {
    let arrays: Vec<ArrayEntry> = net
        .store
        .iter()
        .map(|(_, p)| ArrayEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            decay: p.decay,
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: net.config.clone(),
        state: state.clone(),
        arrays,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Runtime(format!("checkpoint header: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for (_, p) in net.store.iter() {
        for &v in p.value.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(HoverTransNet, TrainState)> {
    let corrupt = |msg: &str| Error::Runtime(format!("corrupt checkpoint {}: {msg}", path.display()));
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(corrupt(&format!("unsupported format version {version}")));
    }
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| corrupt(&format!("header: {e}")))?;

    let mut net = build_model(&header.config, header.state.seed)?;
    if net.store.len() != header.arrays.len() {
        return Err(corrupt(&format!(
            "expected {} arrays, header lists {}",
            net.store.len(),
            header.arrays.len()
        )));
    }
    let ids: Vec<_> = net.store.iter().map(|(id, _)| id).collect();
    for (id, entry) in ids.into_iter().zip(&header.arrays) {
        {
            let param = net.store.get(id);
            if param.name != entry.name {
                return Err(corrupt(&format!(
                    "array order mismatch: expected {}, found {}",
                    param.name, entry.name
                )));
            }
            if param.value.shape() != entry.shape.as_slice() {
                return Err(corrupt(&format!("{}: shape mismatch", entry.name)));
            }
        }
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        net.store.get_mut(id).value = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| corrupt(&format!("{}: {e}", entry.name)))?;
    }
    if !net.store.all_finite() {
        return Err(corrupt("non-finite parameter values"));
    }
    Ok((net, header.state))
}
