//! Report envelopes, provenance and file helpers.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ood_audit::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(Error::file(path))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Input files a command read, recorded with their digests.
#[derive(Default)]
pub struct Provenance {
    inputs: Vec<Value>,
}

impl Provenance {
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(json!({
            "role": role,
            "path": path.display().to_string(),
            "sha256": sha256_file(path)?,
        }));
        Ok(())
    }

    fn to_value(&self, flags: Value) -> Value {
        json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "inputs": self.inputs,
            "flags": flags,
        })
    }
}

/// `{command, report, provenance, metadata}`; only `metadata` varies
/// between identical runs.
pub fn envelope<R: Serialize, F: Serialize>(command: &str, report: &R, flags: &F, prov: &Provenance) -> Result<Value> {
    let generated_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    Ok(json!({
        "command": command,
        "report": to_value(report)?,
        "provenance": prov.to_value(to_value(flags)?),
        "metadata": { "generated_at": generated_at },
    }))
}

pub fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::InvalidParameter(e.to_string()))
}

/// Destination for a command's primary output: a file or stdout.
pub fn sink(out: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(Error::file(p))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn write_json(value: &Value, out: Option<&PathBuf>) -> Result<()> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reads a JSON file, unwrapping the `report` field of an envelope.
pub fn read_report<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
    let mut v: Value =
        serde_json::from_str(&text).map_err(|e| Error::Syntax { line: e.line(), message: e.to_string() })?;
    if let Some(inner) = v.get_mut("report") {
        v = inner.take();
    }
    serde_json::from_value(v).map_err(|e| Error::Schema { line: 0, message: format!("{}: {e}", path.display()) })
}
