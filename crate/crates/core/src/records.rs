//! File formats: line-oriented JSON records and versioned JSON containers.
//!
//! Containers carry a leading `format_version` and a `kind` tag. Floats are
//! written in shortest round-trip form, so save -> load -> save is byte-exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format_version: u32,
    kind: String,
    payload: T,
}

pub fn to_container_string<T: Serialize>(kind: &str, payload: &T) -> Result<String> {
    let env = Envelope {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        payload,
    };
    serde_json::to_string(&env).map_err(|e| Error::Load(format!("serialize {kind}: {e}")))
}

pub fn from_container_str<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let env: Envelope<T> =
        serde_json::from_str(text).map_err(|e| Error::Load(format!("parse {kind}: {e}")))?;
    if env.format_version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "{kind}: unsupported format version {} (expected {FORMAT_VERSION})",
            env.format_version
        )));
    }
    if env.kind != kind {
        return Err(Error::Load(format!(
            "expected a {kind} container, found {}",
            env.kind
        )));
    }
    Ok(env.payload)
}

pub fn save_container<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let text = to_container_string(kind, payload)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_container<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_container_str(kind, &text)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
}

/// Writes a header line followed by one JSON object per record.
pub fn write_records<T: Serialize>(path: &Path, kind: &str, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
    };
    let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    emit(serde_json::to_string(&header).expect("header serializes"))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format {
            path: path.into(),
            msg: e.to_string(),
        })?;
        emit(line)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let fmt_err = |msg: String| Error::Format {
        path: path.into(),
        msg,
    };
    let first = lines
        .next()
        .ok_or_else(|| fmt_err("empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| fmt_err(e.to_string()))?;
    if header.format_version != FORMAT_VERSION || header.kind != kind {
        return Err(fmt_err(format!(
            "expected {kind} v{FORMAT_VERSION}, found {} v{}",
            header.kind, header.format_version
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| fmt_err(format!("line {}: {e}", i + 2)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        id: u32,
        value: f64,
    }

    #[test]
    fn container_rejects_wrong_kind() {
        let s = to_container_string("weights", &vec![1.0f64, 0.1]).unwrap();
        assert!(from_container_str::<Vec<f64>>("agent", &s).is_err());
        let back: Vec<f64> = from_container_str("weights", &s).unwrap();
        assert_eq!(back, vec![1.0, 0.1]);
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let recs = vec![Rec { id: 1, value: 0.1 + 0.2 }, Rec { id: 2, value: -3e-300 }];
        write_records(&p, "rec", &recs).unwrap();
        let back: Vec<Rec> = read_records(&p, "rec").unwrap();
        assert_eq!(back, recs);
        assert!(read_records::<Rec>(&p, "other").is_err());
    }
}
