//! CSV output with a fixed header and a fingerprint column on every row.

use std::fs::File;
use std::path::Path;

use anyhow::{Context, Result};

/// Floats are written with Rust's shortest round-trip formatting, so equal
/// values always produce equal text.
pub fn num(v: f64) -> String {
    v.to_string()
}

pub struct Table {
    w: csv::Writer<File>,
    fingerprint: String,
    width: usize,
}

impl Table {
    /// Create `path` and write `fingerprint` followed by `header`.
    pub fn create(path: &Path, fingerprint: &str, header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        let mut h = vec!["fingerprint"];
        h.extend_from_slice(header);
        w.write_record(&h)?;
        Ok(Table { w, fingerprint: fingerprint.to_string(), width: header.len() })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.row_with(&self.fingerprint.clone(), fields)
    }

    /// Row tagged with a different fingerprint, for tables whose rows come
    /// from several configs.
    pub fn row_with(&mut self, fingerprint: &str, fields: &[String]) -> Result<()> {
        assert_eq!(fields.len(), self.width, "row width does not match header");
        self.w.write_field(fingerprint)?;
        self.w.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}
