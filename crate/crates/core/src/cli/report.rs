//! CSV and JSON emission. Every CSV starts with one `#` schema line naming the
//! table, its version and the seed, followed by a header row.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub fn csv_bytes<R: Serialize>(table: &str, seed: u64, rows: &[R]) -> Result<Vec<u8>, CliError> {
    let mut buf = format!("# schema={table}/v{SCHEMA_VERSION} seed={seed} workload=synthetic\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for row in rows {
            w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(buf)
}

pub fn write_csv<R: Serialize>(dir: &Path, table: &str, seed: u64, rows: &[R]) -> Result<PathBuf, CliError> {
    write_file(dir, &format!("{table}.csv"), &csv_bytes(table, seed, rows)?)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    write_file(dir, &format!("{name}.json"), text.as_bytes())
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}
