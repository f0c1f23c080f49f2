//! Binary checkpoint layout:
//!
//! ```text
//! b"HPGANCKP"            8 bytes
//! version                u32 LE
//! header length          u64 LE
//! header                 JSON: config, tensor table, normalization
//! payload                f64 LE values, tensors in header order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainRun;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::networks::{build_models, ModelConfig, Models};

const MAGIC: &[u8; 8] = b"HPGANCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Upper bound on the header; guards against allocating from a corrupt length.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    network: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    normalization: Option<NormStats>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub models: Models,
    pub normalization: Option<NormStats>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint(models: &Models, normalization: Option<&NormStats>, mut out: impl Write) -> Result<()> {
    let tensors = models
        .stores()
        .iter()
        .flat_map(|(network, store)| {
            store.names().iter().zip(store.iter()).map(move |(name, p)| TensorEntry {
                network: network.to_string(),
                name: name.clone(),
                shape: p.value.shape().to_vec(),
            })
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: models.config.clone(),
        tensors,
        normalization: normalization.cloned(),
    })?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut payload = Vec::with_capacity(models.parameter_count() * 8);
    for (_, store) in models.stores() {
        for p in store.iter() {
            for v in p.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => corrupt(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_checkpoint(mut input: impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    read_exact(&mut input, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let mut len = [0u8; 8];
    read_exact(&mut input, &mut len, "header length")?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(corrupt(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len as usize];
    read_exact(&mut input, &mut header, "header")?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| corrupt(format!("header: {e}")))?;
    if let Some(stats) = &header.normalization {
        stats.validate()?;
    }

    // Initialization is overwritten below; the seed only fixes allocation.
    let mut models = build_models(&header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut entries = header.tensors.iter();
    for (network, store) in models.stores_mut() {
        for i in 0..store.len() {
            let entry = entries
                .next()
                .ok_or_else(|| corrupt(format!("tensor table ends before {network}")))?;
            let name = store.names()[i].clone();
            let p = store.get_mut(i);
            if entry.network != network || entry.name != name || entry.shape != p.value.shape() {
                return Err(corrupt(format!(
                    "tensor {}/{} {:?} does not match {network}/{name} {:?}",
                    entry.network,
                    entry.name,
                    entry.shape,
                    p.value.shape()
                )));
            }
            let mut raw = vec![0u8; p.value.len() * 8];
            read_exact(&mut input, &mut raw, "payload")?;
            for (v, bytes) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"));
            }
        }
    }
    if entries.next().is_some() {
        return Err(corrupt("tensor table lists extra tensors"));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        models,
        normalization: header.normalization,
    })
}

pub fn save_checkpoint(run: &TrainRun, normalization: Option<&NormStats>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(&run.models, normalization, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
