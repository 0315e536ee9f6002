use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SceneGenConfig, VectorScene};
use crate::error::{Error, Result};

pub const DATASET_SCHEMA: &str = "invdriver-scene";
pub const DATASET_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u64,
    config: SceneGenConfig,
}

/// Writes a JSON Lines dataset: one header record, then one scene per line.
pub fn write_dataset(path: &Path, cfg: &SceneGenConfig, scenes: &[VectorScene]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        schema: DATASET_SCHEMA.into(),
        version: DATASET_VERSION,
        config: cfg.clone(),
    };
    let mut put = |line: serde_json::Result<String>| -> Result<()> {
        let line = line.map_err(|e| Error::Input(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))
    };
    put(serde_json::to_string(&header))?;
    for s in scenes {
        put(serde_json::to_string(s))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by [`write_dataset`]. Line numbers in errors are
/// 1-based.
pub fn read_dataset(path: &Path) -> Result<(SceneGenConfig, Vec<VectorScene>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };

    let Some((_, first)) = lines.next() else {
        return Err(parse_err(1, "missing header record".into()));
    };
    let first = first.map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if value.get("schema").and_then(|s| s.as_str()) != Some(DATASET_SCHEMA) {
        return Err(parse_err(
            1,
            format!("header schema is not `{DATASET_SCHEMA}`"),
        ));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != DATASET_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| parse_err(1, e.to_string()))?;
    header.config.validate()?;

    let mut scenes = Vec::new();
    let mut blank_at = None;
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            blank_at.get_or_insert(i + 1);
            continue;
        }
        if let Some(b) = blank_at {
            return Err(parse_err(b, "blank line inside the dataset".into()));
        }
        let scene = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        scenes.push(scene);
    }
    Ok((header.config, scenes))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
