//! Minimal text-table helpers: `", "`-separated rows under a
//! `# <name> version 1.0` header line.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::DatastoreError;

pub const SEPARATOR: &str = ", ";

/// Formats a real with 17 significant digits, enough to round-trip any `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn header(name: &str) -> String {
    format!("# {name} version 1.0\n")
}

/// Accumulates rows for one table file.
pub struct TableWriter {
    buf: String,
}

impl TableWriter {
    pub fn new(name: &str) -> Self {
        Self { buf: header(name) }
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for f in fields {
            if !first {
                self.buf.push_str(SEPARATOR);
            }
            first = false;
            self.buf.push_str(f.as_ref());
        }
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<(), DatastoreError> {
        write_file(path, self.buf.as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatastoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DatastoreError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| DatastoreError::io(path, e))
}

/// One parsed data row together with its 1-based line number.
pub struct Row<'a> {
    pub file: &'a Path,
    pub line: usize,
    pub fields: Vec<&'a str>,
}

impl Row<'_> {
    pub fn error(&self, reason: impl Into<String>) -> DatastoreError {
        DatastoreError::MalformedCsv {
            file: self.file.to_path_buf(),
            line: self.line,
            reason: reason.into(),
        }
    }

    pub fn expect_len(&self, allowed: &[usize]) -> Result<(), DatastoreError> {
        if allowed.contains(&self.fields.len()) {
            Ok(())
        } else {
            Err(self.error(format!(
                "expected {:?} fields, found {}",
                allowed,
                self.fields.len()
            )))
        }
    }

    pub fn str(&self, i: usize) -> Result<&str, DatastoreError> {
        match self.fields.get(i) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(self.error(format!("missing field {i}"))),
        }
    }

    pub fn parse<T: FromStr>(&self, i: usize) -> Result<T, DatastoreError> {
        let s = self.str(i)?;
        s.parse()
            .map_err(|_| self.error(format!("cannot parse field {i} (`{s}`)")))
    }

    pub fn real(&self, i: usize) -> Result<f64, DatastoreError> {
        let v: f64 = self.parse(i)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.error(format!("non-finite value in field {i}")))
        }
    }
}

/// File contents and the path they were read from.
pub struct Table {
    pub path: PathBuf,
    pub text: String,
}

impl Table {
    pub fn read(path: &Path) -> Result<Option<Self>, DatastoreError> {
        match fs::read_to_string(path) {
            Ok(text) => Ok(Some(Self { path: path.to_path_buf(), text })),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(DatastoreError::io(path, e)),
        }
    }

    /// Data rows, skipping comments and blank lines.
    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> {
        self.text.lines().enumerate().filter_map(|(i, line)| {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                return None;
            }
            Some(Row {
                file: &self.path,
                line: i + 1,
                fields: trimmed.split(',').map(str::trim).collect(),
            })
        })
    }
}
