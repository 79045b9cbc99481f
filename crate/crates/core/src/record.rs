//! Versioned line-delimited record envelope shared by every artifact.
//!
//! A file is a header line followed by one JSON record per line:
//!
//! ```text
//! {"format":"markovpl","version":1,"kind":"corpus","meta":{...},"config":{...}}
//! {"id":"a","label":0,"channels":[[0.1,0.2],[0.3,0.4]]}
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const FORMAT: &str = "markovpl";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub kind: String,
    #[serde(default)]
    pub meta: Value,
    /// Provenance: the full run configuration that produced the file.
    #[serde(default)]
    pub config: Value,
}

impl Header {
    pub fn new(kind: &str, meta: Value, config: Value) -> Self {
        Header {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: kind.to_string(),
            meta,
            config,
        }
    }

    pub fn meta_as<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad `{}` header metadata: {e}", self.kind),
        })
    }
}

/// Raw lines of an envelope file, header already validated.
pub struct Envelope {
    pub header: Header,
    /// `(1-based line number, text)` for each non-blank record line.
    pub lines: Vec<(usize, String)>,
}

impl Envelope {
    pub fn records<R: DeserializeOwned>(&self) -> Result<Vec<R>> {
        self.lines
            .iter()
            .map(|(line, text)| {
                serde_json::from_str(text).map_err(|e| Error::Parse {
                    line: *line,
                    msg: e.to_string(),
                })
            })
            .collect()
    }
}

pub fn read_envelope(path: &Path, expected_kind: &str) -> Result<Envelope> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_envelope(BufReader::new(file), expected_kind).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_envelope<R: BufRead>(reader: R, expected_kind: &str) -> Result<Envelope> {
    let mut header = None;
    let mut lines = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| Error::io("<stream>", e))?;
        if text.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: Header = serde_json::from_str(&text).map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("expected a `{expected_kind}` header: {e}"),
            })?;
            if h.format != FORMAT {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown format `{}`", h.format),
                });
            }
            if h.version != VERSION {
                return Err(Error::Incompatible(format!(
                    "`{}` file has version {}, this build reads version {VERSION}",
                    h.kind, h.version
                )));
            }
            if h.kind != expected_kind {
                return Err(Error::Incompatible(format!(
                    "expected a `{expected_kind}` file, found `{}`",
                    h.kind
                )));
            }
            header = Some(h);
        } else {
            lines.push((line_no, text));
        }
    }
    let header = header.ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("empty file; expected a `{expected_kind}` header"),
    })?;
    Ok(Envelope { header, lines })
}

pub fn write_envelope<R: Serialize>(path: &Path, header: &Header, records: &[R]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    emit(&mut w, header, records).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn emit<W: Write, R: Serialize>(w: &mut W, header: &Header, records: &[R]) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
