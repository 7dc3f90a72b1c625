//! Line-delimited JSON run logs. Every record is one object with a `kind`
//! field; the first record of a run is its resolved configuration.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub struct RunLog {
    out: Box<dyn Write>,
}

impl RunLog {
    pub fn to_file(path: &Path) -> io::Result<Self> {
        Ok(Self {
            out: Box::new(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn to_stderr() -> Self {
        Self {
            out: Box::new(io::stderr()),
        }
    }

    pub fn to_writer(w: impl Write + 'static) -> Self {
        Self { out: Box::new(w) }
    }

    pub fn record(&mut self, kind: &str, payload: &impl Serialize) -> io::Result<()> {
        let mut obj = Map::new();
        obj.insert("kind".into(), Value::String(kind.into()));
        match serde_json::to_value(payload).map_err(io::Error::other)? {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("value".into(), other);
            }
        }
        serde_json::to_writer(&mut self.out, &Value::Object(obj)).map_err(io::Error::other)?;
        self.out.write_all(b"\n")
    }

    /// Records a written file with its SHA-256 digest.
    pub fn artifact(&mut self, role: &str, path: &Path, bytes: &[u8]) -> io::Result<()> {
        self.record(
            "artifact",
            &serde_json::json!({ "role": role, "path": path.display().to_string(), "bytes": bytes.len(), "sha256": sha256_hex(bytes) }),
        )
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn read_records(path: &Path) -> io::Result<Vec<Value>> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok(out)
}
