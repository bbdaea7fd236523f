//! Artifact writing helpers.

use std::fs;
use std::path::Path;

use crate::error::CliResult;

/// Write `bytes` to `path` atomically: the content lands in a sibling
/// temporary file first and is renamed into place, so a crash mid-write
/// never leaves a half-written artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
