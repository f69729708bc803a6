pub mod classify;
pub mod grid;
pub mod kernel_export;
pub mod regress;
pub mod verify;

use anyhow::{Context, Result};
use std::path::Path;

/// Write a serializable value as pretty JSON (the stable record format).
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("serializing JSON")?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Ensure the output directory exists and return it.
pub fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}
