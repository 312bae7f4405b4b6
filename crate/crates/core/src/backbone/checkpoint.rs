//! Versioned binary checkpoint container: magic bytes "PPCK", a format
//! version, the model spec as canonical JSON, then named parameter blobs
//! (name, shape extents as little-endian u64, 32-bit little-endian values).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::numkernel::{Scalar, Tensor};

use super::network::{build_network, ModelSpec, Network};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<S: Scalar>(path: &Path, net: &Network<S>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;

    let spec_json = serde_json::to_string(&net.spec)
        .map_err(|e| Error::Checkpoint(format!("spec serialization: {e}")))?;
    out.write_all(&(spec_json.len() as u64).to_le_bytes())?;
    out.write_all(spec_json.as_bytes())?;

    let mut blobs: Vec<(String, &Tensor<S>)> = Vec::new();
    net.visit("net", &mut |name, _, t| blobs.push((name, t)));
    out.write_all(&(blobs.len() as u64).to_le_bytes())?;
    for (name, tensor) in blobs {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
        for &extent in tensor.shape() {
            out.write_all(&(extent as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Rebuild the network from the stored spec and restore every tensor.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Network<S>> {
    let mut input = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic bytes {magic:?}; not a checkpoint file"
        )));
    }
    let mut ver = [0u8; 4];
    input.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }

    let spec_len = read_u64(&mut input)? as usize;
    let mut spec_bytes = vec![0u8; spec_len];
    input.read_exact(&mut spec_bytes)?;
    let spec: ModelSpec = serde_json::from_slice(&spec_bytes)
        .map_err(|e| Error::Checkpoint(format!("spec deserialization: {e}")))?;

    let blob_count = read_u64(&mut input)? as usize;
    let mut blobs: std::collections::HashMap<String, Tensor<S>> =
        std::collections::HashMap::with_capacity(blob_count);
    for _ in 0..blob_count {
        let name_len = read_u64(&mut input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?;
        let rank = read_u64(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut input)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            input.read_exact(&mut buf)?;
            data.push(S::from_f64(f32::from_le_bytes(buf) as f64));
        }
        blobs.insert(name, Tensor::new(shape, data)?);
    }

    let mut net: Network<S> = build_network(&spec, 0)?;
    let mut missing = Vec::new();
    net.visit_mut("net", &mut |name, _, tensor| {
        match blobs.remove(&name) {
            Some(stored) if stored.shape() == tensor.shape() => *tensor = stored,
            Some(stored) => missing.push(format!(
                "{name}: shape {:?} vs stored {:?}",
                tensor.shape(),
                stored.shape()
            )),
            None => missing.push(format!("{name}: absent from checkpoint")),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(missing.join("; ")));
    }
    if !blobs.is_empty() {
        let extra: Vec<String> = blobs.keys().cloned().collect();
        return Err(Error::Checkpoint(format!(
            "unused checkpoint tensors: {}",
            extra.join(", ")
        )));
    }
    Ok(net)
}
