//! Binary dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "RSQS"
//! version u16      currently 1
//! n_items u32
//! height  u16
//! width   u16
//! items   n_items × (class u16, height·width × f32 pixels)
//! ```
//!
//! Pixels are stored as little-endian `f32`; reading then rewriting a file
//! reproduces it byte for byte. Items are written class-major (all of class
//! 0, then class 1, ...), and a file must mention every class from 0 to its
//! maximum at least once.

use std::fs;
use std::path::Path;

use crate::artifacts::write_atomic;
use crate::error::{CliError, CliResult};
use rsqs_core::data::{Dataset, SplitFractions};
use rsqs_core::Tensor;

const MAGIC: &[u8; 4] = b"RSQS";
const VERSION: u16 = 1;

pub fn write_dataset(path: &Path, ds: &Dataset) -> CliResult<()> {
    let n_items: usize = (0..ds.n_classes()).map(|c| ds.class_images(c).len()).sum();
    if n_items > u32::MAX as usize {
        return Err(CliError::Validation(format!("{n_items} items exceed the u32 item count")));
    }
    if ds.n_classes() > u16::MAX as usize + 1 {
        return Err(CliError::Validation(format!("{} classes exceed the u16 class id", ds.n_classes())));
    }
    if ds.height() > u16::MAX as usize || ds.width() > u16::MAX as usize {
        return Err(CliError::Validation(format!(
            "{}x{} images exceed the u16 size fields",
            ds.height(),
            ds.width()
        )));
    }
    let mut buf = Vec::with_capacity(14 + n_items * (2 + 4 * ds.height() * ds.width()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n_items as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.height() as u16).to_le_bytes());
    buf.extend_from_slice(&(ds.width() as u16).to_le_bytes());
    for class in 0..ds.n_classes() {
        for img in ds.class_images(class) {
            buf.extend_from_slice(&(class as u16).to_le_bytes());
            for &p in img.data() {
                buf.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
    }
    write_atomic(path, &buf)
}

/// Read a dataset file back. The class split is not part of the container,
/// so the caller supplies the fractions the run is configured with.
pub fn read_dataset(path: &Path, split: SplitFractions) -> CliResult<Dataset> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Validation(format!("cannot read dataset {}: {e}", path.display())))?;
    let mut r = Reader { bytes: &bytes, pos: 0, what: "dataset" };
    if r.take(4)? != MAGIC {
        return Err(CliError::Validation(format!("{} is not a dataset file (bad magic)", path.display())));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CliError::Validation(format!("unsupported dataset version {version}")));
    }
    let n_items = r.u32()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let mut by_class: Vec<Vec<Tensor>> = Vec::new();
    for _ in 0..n_items {
        let class = r.u16()? as usize;
        let mut pixels = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            pixels.push(r.f32()? as f64);
        }
        if class >= by_class.len() {
            by_class.resize_with(class + 1, Vec::new);
        }
        by_class[class].push(Tensor::from_vec(&[h, w], pixels)?);
    }
    r.done()?;
    Ok(Dataset::from_class_images(h, w, by_class, split)?)
}

/// 64-bit FNV-1a over a file's bytes; printed after writes so two runs can
/// be compared at a glance.
pub fn file_checksum(path: &Path) -> CliResult<u64> {
    let bytes = fs::read(path)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in &bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(h)
}

/// Bounds-checked little-endian cursor shared by the binary readers.
pub struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CliError::Validation(format!("truncated {} file", self.what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> CliResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> CliResult<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Error if any bytes remain unconsumed.
    pub fn done(&self) -> CliResult<()> {
        if self.pos != self.bytes.len() {
            return Err(CliError::Validation(format!(
                "{} file has {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
