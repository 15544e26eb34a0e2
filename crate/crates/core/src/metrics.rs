//! JSON-lines metric records, kept in memory and optionally streamed to a file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Default)]
pub struct Metrics {
    out: Option<(BufWriter<File>, std::path::PathBuf)>,
    records: Vec<Value>,
}

impl Metrics {
    /// In-memory only.
    pub fn new() -> Self {
        Self::default()
    }

    /// Also appends every record as one JSON line to `path`.
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: Some((BufWriter::new(f), path)),
            records: Vec::new(),
        })
    }

    pub fn log(&mut self, record: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(record)?;
        if let Some((w, path)) = &mut self.out {
            serde_json::to_writer(&mut *w, &v)?;
            w.write_all(b"\n").map_err(|e| Error::io(path.clone(), e))?;
            w.flush().map_err(|e| Error::io(path.clone(), e))?;
        }
        self.records.push(v);
        Ok(())
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }
}
