//! Checkpoint container: a self-describing binary file holding the network
//! configuration, training position (epoch, step), every parameter tensor
//! by name, and optionally the ADAM moment buffers so training can resume
//! bit-for-bit.
//!
//! Layout: magic "MSBC", u32 version, a length-prefixed UTF-8 config block
//! of `key=value` lines, u32 entry count, entries of (length-prefixed name,
//! inline tensor), then one flag byte; if 1, each entry's ADAM m and v
//! tensors follow in the same order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{DecoderVariant, NetworkConfig};
use crate::params::{ParamKind, ParameterStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSBC";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps (the ADAM timestep).
    pub step: u64,
}

fn write_u32<W: Write>(out: &mut W, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    write_u32(out, s.len() as u32)?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(input: &mut R) -> Result<String> {
    let len = read_u32(input)? as usize;
    if len > 1 << 24 {
        return Err(Error::data(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::data("non-utf8 string in checkpoint".to_string()))
}

fn config_block(cp: &Checkpoint) -> String {
    let n = &cp.network;
    format!(
        "levels={}\nresblocks={}\nbase_channels={}\nmax_channels={}\n\
         decoder_variant={}\ndff={}\nrefinement_blocks={}\nepoch={}\nstep={}\n",
        n.levels,
        n.resblocks,
        n.base_channels,
        n.max_channels,
        n.decoder_variant,
        n.dff_enabled,
        n.refinement_blocks,
        cp.epoch,
        cp.step
    )
}

fn parse_config_block(block: &str) -> Result<Checkpoint> {
    let mut network = NetworkConfig::default();
    let mut epoch = 0u64;
    let mut step = 0u64;
    for line in block.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("malformed checkpoint config line {line:?}")))?;
        macro_rules! bad {
            () => {
                |_| Error::data(format!("bad value for {key}: {value:?}"))
            };
        }
        match key {
            "levels" => network.levels = value.parse().map_err(bad!())?,
            "resblocks" => network.resblocks = value.parse().map_err(bad!())?,
            "base_channels" => network.base_channels = value.parse().map_err(bad!())?,
            "max_channels" => network.max_channels = value.parse().map_err(bad!())?,
            "decoder_variant" => {
                network.decoder_variant = value
                    .parse::<DecoderVariant>()
                    .map_err(|e| Error::data(e.to_string()))?
            }
            "dff" => network.dff_enabled = value.parse().map_err(bad!())?,
            "refinement_blocks" => network.refinement_blocks = value.parse().map_err(bad!())?,
            "epoch" => epoch = value.parse().map_err(bad!())?,
            "step" => step = value.parse().map_err(bad!())?,
            other => {
                return Err(Error::data(format!(
                    "unknown checkpoint config key {other:?}"
                )))
            }
        }
    }
    Ok(Checkpoint {
        network,
        epoch,
        step,
    })
}

pub fn save(
    path: &Path,
    cp: &Checkpoint,
    store: &ParameterStore,
    include_adam: bool,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    out.write_all(MAGIC)?;
    write_u32(&mut out, VERSION)?;
    write_str(&mut out, &config_block(cp))?;
    write_u32(&mut out, store.len() as u32)?;
    for e in store.iter() {
        write_str(&mut out, &e.name)?;
        e.value.write_msbt(&mut out)?;
    }
    out.write_all(&[include_adam as u8])?;
    if include_adam {
        for e in store.iter() {
            e.adam_m.write_msbt(&mut out)?;
            e.adam_v.write_msbt(&mut out)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Load a checkpoint. The parameter store is rebuilt from the stored
/// network configuration, so registration order and kinds come from the
/// current code; every stored tensor must match its registered shape.
pub fn load(path: &Path) -> Result<(Checkpoint, ParameterStore)> {
    let file = File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{}: bad checkpoint magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cp = parse_config_block(&read_str(&mut input)?)?;

    let model = crate::network::Model::new(cp.network)?;
    let mut store = ParameterStore::new();
    model.register_params(&mut store)?;

    let count = read_u32(&mut input)? as usize;
    if count != store.len() {
        return Err(Error::data(format!(
            "checkpoint holds {count} tensors but the configuration registers {}",
            store.len()
        )));
    }
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut input)?;
        let tensor = Tensor::read_msbt(&mut input)?;
        let idx = store.index_of(&name).map_err(|_| {
            Error::data(format!("checkpoint tensor {name:?} is not a model parameter"))
        })?;
        let entry = store.entry_mut(idx);
        if !entry.value.same_shape(&tensor) {
            return Err(Error::data(format!(
                "checkpoint tensor {name:?} has shape {:?}, expected {:?}",
                tensor.shape(),
                entry.value.shape()
            )));
        }
        entry.value = tensor;
        names.push(idx);
    }
    let mut flag = [0u8; 1];
    input.read_exact(&mut flag)?;
    if flag[0] == 1 {
        for &idx in &names {
            let m = Tensor::read_msbt(&mut input)?;
            let v = Tensor::read_msbt(&mut input)?;
            let entry = store.entry_mut(idx);
            if !entry.value.same_shape(&m) || !entry.value.same_shape(&v) {
                return Err(Error::data(format!(
                    "optimizer state shape mismatch for {:?}",
                    entry.name
                )));
            }
            entry.adam_m = m;
            entry.adam_v = v;
        }
    }
    Ok((cp, store))
}

/// Load just the parameter kinds/shapes header info for inspection.
pub fn describe(path: &Path) -> Result<Vec<(String, ParamKind, [usize; 4])>> {
    let (_, store) = load(path)?;
    Ok(store
        .iter()
        .map(|e| (e.name.clone(), e.kind, e.value.shape()))
        .collect())
}
