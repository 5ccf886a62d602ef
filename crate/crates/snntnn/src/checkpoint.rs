//! Versioned binary checkpoint carrying both networks, optimizer state, and
//! run history.
//!
//! Layout:
//! ```text
//! SNNTNN 1\n                  magic + format version
//! <TOML metadata block>       config, fingerprint, rng algorithm, epoch,
//!                             history, payload hash
//! ---payload---\n
//! u32 tensor count, then per tensor:
//!   u32 name length, name bytes,
//!   u32 ndim, u32 dims...,
//!   f32 data (little endian)
//! ```
//! The metadata records the SHA-256 of the payload; any payload corruption is
//! an integrity error. Files are written atomically (temp file + rename).

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RNG_ALGORITHM;
use crate::tensor::Tensor;
use crate::train::{hex_string, EpochRecord, GatedModel, TrainConfig, TrainState};

pub const MAGIC: &str = "SNNTNN";
pub const FORMAT_VERSION: u32 = 1;
const PAYLOAD_SEPARATOR: &str = "---payload---";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_fingerprint: String,
    pub rng_algorithm: String,
    pub epoch: usize,
    pub test_acc: Option<f64>,
    pub payload_sha256: String,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: GatedModel,
    pub state: TrainState,
}

/// Every tensor in the model plus optimizer velocities, in a stable order.
fn named_tensors(model: &GatedModel, state: &TrainState) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    for (k, layer) in model.tnn.layers.iter().enumerate() {
        out.push((format!("tnn.l{}.w", k), layer.weight.clone()));
        if let Some(b) = &layer.bias {
            out.push((format!("tnn.l{}.b", k), b.clone()));
        }
    }
    for (k, sw) in &model.switchers {
        for (name, t) in sw.named_params() {
            out.push((format!("snn.l{}.{}", k, name), (*t).clone()));
        }
    }
    for (i, v) in state.opt_tnn.velocities().iter().enumerate() {
        out.push((format!("opt.tnn.{}", i), Tensor::new(vec![v.len()], v.clone()).unwrap()));
    }
    for (i, v) in state.opt_snn.velocities().iter().enumerate() {
        out.push((format!("opt.snn.{}", i), Tensor::new(vec![v.len()], v.clone()).unwrap()));
    }
    out
}

fn encode_payload(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
    for (name, t) in tensors {
        buf.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        buf.extend_from_slice(name.as_bytes());
        buf.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
        for &d in t.shape() {
            buf.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &v in t.data() {
            buf.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    buf
}

fn decode_payload(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut cur = Cursor::new(bytes);
    let bad = |what: &str| Error::Integrity(format!("truncated payload reading {}", what));
    let count = cur.read_u32::<LittleEndian>().map_err(|_| bad("tensor count"))?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.read_u32::<LittleEndian>().map_err(|_| bad("name length"))? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name).map_err(|_| bad("name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
        let ndim = cur.read_u32::<LittleEndian>().map_err(|_| bad("ndim"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.read_u32::<LittleEndian>().map_err(|_| bad("dims"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cur.read_f32::<LittleEndian>().map_err(|_| bad(&name))?);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if cur.position() != bytes.len() as u64 {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after payload",
            bytes.len() as u64 - cur.position()
        )));
    }
    Ok(out)
}

pub fn save_checkpoint(
    model: &GatedModel,
    state: &TrainState,
    history: &[EpochRecord],
    test_acc: Option<f64>,
    path: &Path,
) -> Result<()> {
    let tensors = named_tensors(model, state);
    let payload = encode_payload(&tensors);
    let mut hasher = Sha256::new();
    hasher.update(&payload);
    let meta = CheckpointMeta {
        config_fingerprint: model.config.fingerprint(),
        rng_algorithm: RNG_ALGORITHM.to_string(),
        epoch: state.epoch,
        test_acc,
        payload_sha256: hex_string(&hasher.finalize()),
        config: model.config.clone(),
        history: history.to_vec(),
    };
    let meta_toml = toml::to_string(&meta)
        .map_err(|e| Error::Format(format!("metadata serialization: {}", e)))?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        writeln!(f, "{} {}", MAGIC, FORMAT_VERSION)?;
        f.write_all(meta_toml.as_bytes())?;
        writeln!(f, "{}", PAYLOAD_SEPARATOR)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let mut parts = header.split_whitespace();
    let magic = parts.next().unwrap_or("");
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected {:?}", magic, MAGIC)));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("missing format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {} (supported: {})",
            version, FORMAT_VERSION
        )));
    }
    let sep = format!("\n{}\n", PAYLOAD_SEPARATOR);
    let sep_pos = find_subsequence(&bytes[newline..], sep.as_bytes())
        .map(|p| p + newline)
        .ok_or_else(|| Error::Format("missing payload separator".into()))?;
    let meta_str = std::str::from_utf8(&bytes[newline + 1..sep_pos + 1])
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let meta: CheckpointMeta =
        toml::from_str(meta_str).map_err(|e| Error::Format(format!("metadata parse: {}", e)))?;
    let payload = &bytes[sep_pos + sep.len()..];
    let mut hasher = Sha256::new();
    hasher.update(payload);
    let digest = hex_string(&hasher.finalize());
    if digest != meta.payload_sha256 {
        return Err(Error::Integrity(format!(
            "payload hash mismatch: stored {}, actual {}",
            meta.payload_sha256, digest
        )));
    }
    let tensors = decode_payload(payload)?;

    let mut model = GatedModel::init(&meta.config)?;
    let mut state = TrainState::new(meta.config.momentum);
    state.epoch = meta.epoch;
    let mut vel_tnn: Vec<(usize, Vec<f32>)> = Vec::new();
    let mut vel_snn: Vec<(usize, Vec<f32>)> = Vec::new();
    for (name, tensor) in tensors {
        if let Some(idx) = name.strip_prefix("opt.tnn.") {
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Integrity(format!("bad velocity name {}", name)))?;
            vel_tnn.push((idx, tensor.into_data()));
            continue;
        }
        if let Some(idx) = name.strip_prefix("opt.snn.") {
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Integrity(format!("bad velocity name {}", name)))?;
            vel_snn.push((idx, tensor.into_data()));
            continue;
        }
        let slot = lookup_tensor(&mut model, &name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Integrity(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                name,
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    vel_tnn.sort_by_key(|(i, _)| *i);
    vel_snn.sort_by_key(|(i, _)| *i);
    state.opt_tnn.set_velocities(vel_tnn.into_iter().map(|(_, v)| v).collect());
    state.opt_snn.set_velocities(vel_snn.into_iter().map(|(_, v)| v).collect());
    Ok(Checkpoint { meta, model, state })
}

fn lookup_tensor<'a>(model: &'a mut GatedModel, name: &str) -> Result<&'a mut Tensor<f32>> {
    let missing = || Error::Integrity(format!("unknown tensor name {:?}", name));
    if let Some(rest) = name.strip_prefix("tnn.l") {
        let (idx, field) = rest.split_once('.').ok_or_else(missing)?;
        let idx: usize = idx.parse().map_err(|_| missing())?;
        let layer = model.tnn.layers.get_mut(idx).ok_or_else(missing)?;
        return match field {
            "w" => Ok(&mut layer.weight),
            "b" => layer.bias.as_mut().ok_or_else(missing),
            _ => Err(missing()),
        };
    }
    if let Some(rest) = name.strip_prefix("snn.l") {
        let (idx, param) = rest.split_once('.').ok_or_else(missing)?;
        let idx: usize = idx.parse().map_err(|_| missing())?;
        let sw = model
            .switchers
            .iter_mut()
            .find(|(k, _)| *k == idx)
            .map(|(_, s)| s)
            .ok_or_else(missing)?;
        let pos = sw
            .named_params()
            .iter()
            .position(|(n, _)| n == param)
            .ok_or_else(missing)?;
        return Ok(sw.params_mut().swap_remove(pos));
    }
    Err(missing())
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}
