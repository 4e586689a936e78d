//! Checkpoints, run configuration and CSV reports.

mod checkpoint;
mod config;
mod report;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use config::{BoundConfig, DataConfig, Generator, ModelSource, RunConfig};
pub use report::{
    bound_table, collapse_table, eval_table, fig1_curve_table, fig1_settings_table, fmt_num, share_table, stage_table,
    sweep_table, totals_table, train_log_table, CsvTable,
};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
