//! Univariate series and their JSON-lines file format.
//!
//! One object per line:
//! `{"id": str, "freq": str, "start": ISO-8601, "values": [number|null, ...]}`
//! where `null` marks a missing observation. Synthetic mixtures additionally
//! carry a `"provenance"` list naming the source series they were built from.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    pub freq: String,
    pub start: String,
    pub values: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, freq: impl Into<String>, start: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Self {
            id: id.into(),
            freq: freq.into(),
            start: start.into(),
            values,
            provenance: Vec::new(),
        }
    }

    /// Series with no missing values.
    pub fn from_values(id: impl Into<String>, values: &[f64]) -> Self {
        Self::new(id, "H", DEFAULT_START, values.iter().copied().map(Some).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.values.is_empty() {
            return Err("series has no values".into());
        }
        if let Some(i) = self.values.iter().position(|v| matches!(v, Some(x) if !x.is_finite())) {
            return Err(format!("value {i} is not finite"));
        }
        Ok(())
    }
}

pub const DEFAULT_START: &str = "2000-01-01T00:00:00";

/// Parses one line; `line_no` is 1-based and only used in messages.
pub fn parse_series_line(line: &str, line_no: usize) -> Result<TimeSeries> {
    let s: TimeSeries = serde_json::from_str(line)
        .map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
    s.validate()
        .map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
    Ok(s)
}

/// Streams series from a JSON-lines reader, skipping blank lines.
pub struct JsonlReader<R> {
    inner: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> JsonlReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            line_no: 0,
            buf: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for JsonlReader<R> {
    type Item = Result<TimeSeries>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            self.line_no += 1;
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(Error::Data(format!("line {}: {e}", self.line_no)))),
            }
            let line = self.buf.trim();
            if line.is_empty() {
                continue;
            }
            return Some(parse_series_line(line, self.line_no));
        }
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<TimeSeries>> {
    JsonlReader::new(text.as_bytes()).collect()
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<TimeSeries>> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    JsonlReader::new(BufReader::new(file)).collect()
}

pub fn write_jsonl<'a>(path: impl AsRef<Path>, series: impl IntoIterator<Item = &'a TimeSeries>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in series {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
