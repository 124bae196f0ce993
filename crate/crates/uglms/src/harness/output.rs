//! Plot-ready data files: ASCII, two whitespace-separated columns, newline
//! terminated, no header.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::Result;

/// Writes `(x, y)` rows to `dir/name`. Values print with six decimals,
/// which keeps reruns byte-identical.
pub fn write_columns<X: Display>(
    dir: &Path,
    name: &str,
    rows: impl IntoIterator<Item = (X, f64)>,
) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut out = BufWriter::new(File::create(&path)?);
    for (x, y) in rows {
        writeln!(out, "{x} {y:.6}")?;
    }
    out.flush()?;
    Ok(path)
}

/// Writes prebuilt lines to `dir/name`.
pub fn write_lines(
    dir: &Path,
    name: &str,
    lines: impl IntoIterator<Item = String>,
) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut out = BufWriter::new(File::create(&path)?);
    for line in lines {
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(path)
}

/// Creates the output directory, mapping failures to config errors so the
/// CLI exits with the I/O code.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}
