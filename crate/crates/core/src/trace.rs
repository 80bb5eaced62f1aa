//! Run trace: one JSON object per line, `{t, event, src, dst, detail}`.
//!
//! Middleware protocol events and the cloud audit log share this schema.
//! The trace bytes are canonical, so their SHA-256 identifies a run.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub event: String,
    pub src: Option<String>,
    pub dst: Option<String>,
    pub detail: Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        t: f64,
        event: &str,
        src: Option<&dyn ToString>,
        dst: Option<&dyn ToString>,
        detail: Value,
    ) {
        self.records.push(TraceRecord {
            t,
            event: event.to_string(),
            src: src.map(|s| s.to_string()),
            dst: dst.map(|d| d.to_string()),
            detail,
        });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn events<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.event == name)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, serde_json::Error> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line.map_err(serde_json::Error::io)?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { records })
    }

    /// Hex SHA-256 of the JSON-lines encoding.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for r in &self.records {
            hasher.update(serde_json::to_vec(r).expect("trace records serialize"));
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}
