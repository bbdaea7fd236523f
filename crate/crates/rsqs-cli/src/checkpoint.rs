//! Binary checkpoint container for the four-network bundle.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "DUAL"
//! version  u16      currently 1
//! networks u16      always 4 here
//! per network:
//!   name     u16 length + UTF-8 bytes
//!   n_params u32     number of parameter tensors
//!   per parameter:
//!     rank   u16
//!     dims   rank × u32
//!     data   product(dims) × f64
//! ```
//!
//! Floats are stored as little-endian `f64`, so save/load round-trips
//! parameters bit for bit. Loading pours the stored values into a
//! freshly-initialised bundle and fails if any name, tensor count, or shape
//! disagrees with the architecture implied by the run configuration.

use std::fs;
use std::path::Path;

use crate::artifacts::write_atomic;
use crate::dataset_file::Reader;
use crate::error::{CliError, CliResult};
use rsqs_core::models::ModelBundle;
use rsqs_core::Tensor;

const MAGIC: &[u8; 4] = b"DUAL";
const VERSION: u16 = 1;

pub fn write_checkpoint(path: &Path, bundle: &ModelBundle) -> CliResult<()> {
    let nets = bundle.networks();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(nets.len() as u16).to_le_bytes());
    for (name, net) in nets {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let params = net.params();
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            let shape = p.shape();
            buf.extend_from_slice(&(shape.len() as u16).to_le_bytes());
            for &d in shape {
                if d > u32::MAX as usize {
                    return Err(CliError::Validation(format!("dimension {d} exceeds the u32 shape field")));
                }
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_atomic(path, &buf)
}

/// Load checkpoint values into `bundle` (which provides the architecture).
pub fn load_checkpoint(path: &Path, bundle: &mut ModelBundle) -> CliResult<()> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Validation(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut r = Reader { bytes: &bytes, pos: 0, what: "checkpoint" };
    if r.take(4)? != MAGIC {
        return Err(CliError::Validation(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CliError::Validation(format!("unsupported checkpoint version {version}")));
    }
    let n_nets = r.u16()? as usize;
    let mut nets = bundle.networks_mut();
    if n_nets != nets.len() {
        return Err(CliError::Validation(format!(
            "checkpoint has {n_nets} networks, expected {}",
            nets.len()
        )));
    }
    for (name, net) in nets.iter_mut() {
        let len = r.u16()? as usize;
        let stored = core::str::from_utf8(r.take(len)?)
            .map_err(|_| CliError::Validation("checkpoint network name is not UTF-8".into()))?;
        if stored != *name {
            return Err(CliError::Validation(format!(
                "checkpoint network {stored:?} where {name:?} was expected"
            )));
        }
        let n_params = r.u32()? as usize;
        let mut params = net.params_mut();
        if n_params != params.len() {
            return Err(CliError::Validation(format!(
                "network {name}: checkpoint has {n_params} parameter tensors, architecture has {}",
                params.len()
            )));
        }
        for (k, p) in params.iter_mut().enumerate() {
            let rank = r.u16()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if shape != p.shape() {
                return Err(CliError::Validation(format!(
                    "network {name} parameter {k}: checkpoint shape {:?} vs architecture {:?}",
                    shape,
                    p.shape()
                )));
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            **p = Tensor::from_vec(&shape, data)?;
        }
    }
    r.done()
}
