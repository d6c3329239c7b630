//! Plain-text artifact helpers: JSON Lines, CSV headers, provenance stamps.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Provenance stamp carried by every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
}

impl ArtifactMeta {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            config_hash: config_hash.into(),
        }
    }

    /// First line of every CSV artifact.
    pub fn csv_comment(&self) -> String {
        format!(
            "# schema_version={},seed={},config_hash={}\n",
            self.schema_version, self.seed, self.config_hash
        )
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = read_text(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Writes one JSON record per line, preceded by the provenance stamp if given.
pub fn write_jsonl<T: Serialize>(path: &Path, meta: Option<&ArtifactMeta>, records: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut put = |line: String| -> Result<()> {
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    if let Some(m) = meta {
        put(serde_json::to_string(m)?)?;
    }
    for r in records {
        put(serde_json::to_string(r)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSON Lines file. A leading provenance stamp is returned separately.
///
/// Any malformed line (including a truncated last line) is reported with its
/// 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<ArtifactMeta>, Vec<T>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut meta = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: e.to_string(),
        };
        if lineno == 1 && line.contains("\"schema_version\"") {
            meta = Some(serde_json::from_str(&line).map_err(parse_err)?);
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(parse_err)?);
    }
    Ok((meta, out))
}

/// Non-comment lines of a CSV artifact, header first.
pub fn csv_lines(content: &str) -> impl Iterator<Item = &str> {
    content.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty())
}

/// Short hex digest used for config hashes.
pub fn digest_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(bytes);
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Rec {
        a: u32,
        b: f64,
    }

    #[test]
    fn jsonl_round_trip_with_meta() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/r.jsonl");
        let meta = ArtifactMeta::new(7, "abc");
        let recs = vec![Rec { a: 1, b: 0.1 + 0.2 }, Rec { a: 2, b: 1e-300 }];
        write_jsonl(&p, Some(&meta), &recs).unwrap();
        let (m, back): (_, Vec<Rec>) = read_jsonl(&p).unwrap();
        assert_eq!(m, Some(meta));
        assert_eq!(back, recs);
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        fs::write(&p, "{\"a\":1,\"b\":2.0}\n{\"a\":2,\"b\"").unwrap();
        match read_jsonl::<Rec>(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn permuted_fields_accepted_unknown_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        fs::write(&p, "{\"b\":2.5,\"a\":1}\n").unwrap();
        let (_, v): (_, Vec<Rec>) = read_jsonl(&p).unwrap();
        assert_eq!(v, vec![Rec { a: 1, b: 2.5 }]);
        fs::write(&p, "{\"a\":1,\"b\":2.5,\"c\":0}\n").unwrap();
        assert!(matches!(read_jsonl::<Rec>(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-17, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
