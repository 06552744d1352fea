//! Persistence: checkpoints, images, CSV tables and selection documents.
//! Every writer is byte-deterministic for identical inputs.

pub mod checkpoint;
pub mod pgm;
pub mod selection;
pub mod tables;

use std::fs;
use std::path::Path;

use crate::error::Result;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use pgm::{pgm_bytes, pgm_bytes_range, read_pgm, tile_row, write_pgm};
pub use selection::{load_selection, save_selection, SelectionDoc};

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}
