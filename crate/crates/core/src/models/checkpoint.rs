//! Flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `"PLAB"`, version `u32`, layer count `u32`, then per layer `d_out u32`,
//! `d_in u32`, `has_norm u8`, followed by row-major `f64` values of
//! `W`, `b`, and `γ`, `β` when present.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{LayerParams, MlpSpec, ModelError, ParamSet};
use crate::seed;
use crate::spectral::PowerIterState;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PLAB";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(params: &ParamSet, out: &mut impl Write) -> Result<(), ModelError> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for layer in &params.layers {
        let (d_out, d_in) = layer.weight.shape();
        out.write_all(&(d_out as u32).to_le_bytes())?;
        out.write_all(&(d_in as u32).to_le_bytes())?;
        out.write_all(&[layer.gamma.is_some() as u8])?;
        let tensors = [Some(&layer.weight), Some(&layer.bias), layer.gamma.as_ref(), layer.beta.as_ref()];
        for m in tensors.into_iter().flatten() {
            for v in m.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<(), ModelError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut out)?;
    out.flush()?;
    Ok(())
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<(), ModelError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => ModelError::Truncated,
        _ => ModelError::Io(e),
    })
}

fn read_u32(input: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_matrix(input: &mut impl Read, rows: usize, cols: usize) -> Result<Matrix, ModelError> {
    let mut bytes = vec![0u8; rows * cols * 8];
    read_exact(input, &mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Matrix::new(rows, cols, data)?)
}

/// Reads a checkpoint. The result carries no initialization snapshot and
/// fresh power-iteration states.
pub fn read_checkpoint(input: &mut impl Read) -> Result<ParamSet, ModelError> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = read_u32(input)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let count = read_u32(input)? as usize;
    if count == 0 {
        return Err(ModelError::Inconsistent("zero layers".into()));
    }
    let mut layers = Vec::with_capacity(count);
    let mut norm_flags = Vec::with_capacity(count);
    for l in 0..count {
        let d_out = read_u32(input)? as usize;
        let d_in = read_u32(input)? as usize;
        let mut flag = [0u8];
        read_exact(input, &mut flag)?;
        let has_norm = match flag[0] {
            0 => false,
            1 => true,
            f => return Err(ModelError::Inconsistent(format!("layer {l} norm flag {f}"))),
        };
        let weight = read_matrix(input, d_out, d_in)?;
        let bias = read_matrix(input, 1, d_out)?;
        let (gamma, beta) = if has_norm {
            (Some(read_matrix(input, 1, d_out)?), Some(read_matrix(input, 1, d_out)?))
        } else {
            (None, None)
        };
        norm_flags.push(has_norm);
        layers.push(LayerParams {
            weight,
            bias,
            gamma,
            beta,
            power: PowerIterState::new(d_out, d_in, seed::derive(0, seed::tag::POWER, l as u64)),
        });
    }
    let hidden_norm = &norm_flags[..count - 1];
    let layer_norm = hidden_norm.first().copied().unwrap_or(false);
    if norm_flags[count - 1] || hidden_norm.iter().any(|&f| f != layer_norm) {
        return Err(ModelError::Inconsistent("layer-norm flags do not form an MLP".into()));
    }
    let spec = MlpSpec {
        input_dim: layers[0].fan_in(),
        hidden: layers[..count - 1].iter().map(LayerParams::width).collect(),
        output_dim: layers[count - 1].width(),
        layer_norm,
    };
    ParamSet::from_layers(spec, layers).map_err(|e| match e {
        ModelError::InvalidSpec(msg) => ModelError::Inconsistent(msg),
        other => other,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet, ModelError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
