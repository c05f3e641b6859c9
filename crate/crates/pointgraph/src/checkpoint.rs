//! Binary model checkpoints: a fixed header describing the architecture
//! followed by every parameter tensor in little-endian f64, so a round trip
//! is bit-exact.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::model::{GraphMode, ModelDims, ModelError, ModelParams, ModelWidths};
use crate::nn::{Layer, Mlp};

const MAGIC: &[u8; 4] = b"PGCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn fmt_err<T>(msg: &str) -> Result<T, CheckpointError> {
    Err(CheckpointError::Format(msg.to_string()))
}

fn write_mlp<W: Write>(out: &mut W, mlp: &Mlp) -> io::Result<()> {
    out.write_u32::<LittleEndian>(mlp.layers.len() as u32)?;
    for layer in &mlp.layers {
        out.write_u32::<LittleEndian>(layer.weight.nrows() as u32)?;
        out.write_u32::<LittleEndian>(layer.weight.ncols() as u32)?;
        for &x in layer.weight.iter() {
            out.write_f64::<LittleEndian>(x)?;
        }
        for &x in layer.bias.iter() {
            out.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

fn read_mlp(r: &mut &[u8]) -> Result<Mlp, CheckpointError> {
    let n_layers = r
        .read_u32::<LittleEndian>()
        .or_else(|_| fmt_err("truncated layer count"))? as usize;
    if n_layers == 0 || n_layers > 64 {
        return fmt_err("implausible layer count");
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let d_out = r.read_u32::<LittleEndian>().or_else(|_| fmt_err("truncated dims"))? as usize;
        let d_in = r.read_u32::<LittleEndian>().or_else(|_| fmt_err("truncated dims"))? as usize;
        if d_out == 0 || d_in == 0 || d_out > 1 << 20 || d_in > 1 << 20 {
            return fmt_err("implausible layer shape");
        }
        let mut weight = Array2::zeros((d_out, d_in));
        for x in weight.iter_mut() {
            *x = r.read_f64::<LittleEndian>().or_else(|_| fmt_err("truncated weights"))?;
        }
        let mut bias = Array1::zeros(d_out);
        for x in bias.iter_mut() {
            *x = r.read_f64::<LittleEndian>().or_else(|_| fmt_err("truncated bias"))?;
        }
        layers.push(Layer { weight, bias });
    }
    Ok(Mlp { layers })
}

/// Serialize a model to `path`.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), CheckpointError> {
    params.validate()?;
    let mut out = Vec::new();
    encode(&mut out, params).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
    fs::write(path, out).map_err(|source| CheckpointError::Io { path: path.into(), source })
}

fn encode<W: Write>(out: &mut W, params: &ModelParams) -> io::Result<()> {
    let d = params.dims;
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u8(match d.mode {
        GraphMode::Learned => 0,
        GraphMode::Baseline => 1,
    })?;
    for value in [
        d.t_blocks,
        d.k,
        d.d_graph,
        d.d_in,
        d.d_classes,
        d.widths.f_hidden,
        d.widths.node,
        d.widths.edge,
        d.widths.fusion,
        d.widths.pred_hidden,
    ] {
        out.write_u32::<LittleEndian>(value as u32)?;
    }
    write_mlp(out, &params.f)?;
    for t in 0..d.t_blocks {
        write_mlp(out, &params.e[t])?;
        write_mlp(out, &params.h[t])?;
    }
    write_mlp(out, &params.g)?;
    match &params.skip {
        None => out.write_u8(0)?,
        Some(skip) => {
            out.write_u8(1)?;
            out.write_u32::<LittleEndian>(skip.nrows() as u32)?;
            out.write_u32::<LittleEndian>(skip.ncols() as u32)?;
            for &x in skip.iter() {
                out.write_f64::<LittleEndian>(x)?;
            }
        }
    }
    write_mlp(out, &params.p)
}

/// Load and structurally validate a model from `path`.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    if r.read_exact(&mut magic).is_err() || &magic != MAGIC {
        return fmt_err("missing PGCK magic");
    }
    let version = r.read_u32::<LittleEndian>().or_else(|_| fmt_err("truncated version"))?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let mode = match r.read_u8().or_else(|_| fmt_err("truncated mode"))? {
        0 => GraphMode::Learned,
        1 => GraphMode::Baseline,
        other => return Err(CheckpointError::Format(format!("unknown mode byte {other}"))),
    };
    let mut fields = [0usize; 10];
    for slot in &mut fields {
        *slot = r.read_u32::<LittleEndian>().or_else(|_| fmt_err("truncated header"))? as usize;
    }
    let [t_blocks, k, d_graph, d_in, d_classes, f_hidden, node, edge, fusion, pred_hidden] = fields;
    if t_blocks > 64 {
        return fmt_err("implausible block count");
    }
    let dims = ModelDims {
        mode,
        d_in,
        d_graph,
        d_classes,
        t_blocks,
        k,
        widths: ModelWidths { f_hidden, node, edge, fusion, pred_hidden },
    };
    dims.validate()?;

    let f = read_mlp(&mut r)?;
    let mut h = Vec::with_capacity(t_blocks);
    let mut e = Vec::with_capacity(t_blocks);
    for _ in 0..t_blocks {
        e.push(read_mlp(&mut r)?);
        h.push(read_mlp(&mut r)?);
    }
    let g = read_mlp(&mut r)?;
    let skip = match r.read_u8().or_else(|_| fmt_err("truncated skip flag"))? {
        0 => None,
        1 => {
            let rows = r.read_u32::<LittleEndian>().or_else(|_| fmt_err("truncated skip dims"))? as usize;
            let cols = r.read_u32::<LittleEndian>().or_else(|_| fmt_err("truncated skip dims"))? as usize;
            if rows == 0 || cols == 0 || rows > 1 << 20 || cols > 1 << 20 {
                return fmt_err("implausible skip shape");
            }
            let mut m = Array2::zeros((rows, cols));
            for x in m.iter_mut() {
                *x = r.read_f64::<LittleEndian>().or_else(|_| fmt_err("truncated skip data"))?;
            }
            Some(m)
        }
        other => return Err(CheckpointError::Format(format!("unknown skip flag {other}"))),
    };
    let p = read_mlp(&mut r)?;
    if !r.is_empty() {
        return fmt_err("trailing bytes after parameters");
    }
    let params = ModelParams { dims, f, h, e, g, skip, p };
    params.validate()?;
    Ok(params)
}
