use std::io::Write;
use std::path::Path;

use crate::error::{RadError, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| RadError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| RadError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| RadError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| RadError::io(path, e))?;
    tmp.persist(path).map_err(|e| RadError::io(path, e.error))?;
    Ok(())
}

/// Serialises each item as one JSON line.
pub fn to_jsonl<T: serde::Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| RadError::Contract(format!("serialisation failed: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| RadError::io(path, e))
}
