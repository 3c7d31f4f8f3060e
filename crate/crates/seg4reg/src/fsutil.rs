//! Small filesystem helpers shared by data tooling and checkpoints.

use std::path::Path;

use crate::error::Result;

/// Write-then-rename so partially written outputs never shadow valid files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
