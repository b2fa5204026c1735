//! JSON Lines helpers shared by the dataset files.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn write<T: Serialize, W: Write>(items: &[T], mut w: W) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Skips blank lines; errors carry the 1-based line number.
pub fn read<T: DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| format!("line {}: {e}", i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}
