//! Small CSV and checksum helpers shared by the loaders and writers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// A header-addressed CSV reader that reports errors by file, line and field name.
pub struct CsvTable {
    file: String,
    headers: csv::StringRecord,
    reader: csv::Reader<BufReader<File>>,
}

pub struct CsvRow<'a> {
    file: &'a str,
    headers: &'a csv::StringRecord,
    record: csv::StringRecord,
    pub line: u64,
}

impl CsvTable {
    pub fn open(path: &Path, required: &[&str]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(BufReader::new(file));
        let headers = reader.headers()?.clone();
        let name = path.display().to_string();
        for col in required {
            if !headers.iter().any(|h| h == *col) {
                return Err(Error::Malformed {
                    file: name,
                    line: 1,
                    field: (*col).to_string(),
                    message: "missing column in header".into(),
                });
            }
        }
        Ok(Self {
            file: name,
            headers,
            reader,
        })
    }

    pub fn file(&self) -> &str {
        &self.file
    }

    /// Calls `f` for every data row, in file order.
    pub fn for_each<F>(&mut self, mut f: F) -> Result<()>
    where
        F: FnMut(&CsvRow<'_>) -> Result<()>,
    {
        let mut record = csv::StringRecord::new();
        loop {
            let more = self.reader.read_record(&mut record).map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::Malformed {
                    file: self.file.clone(),
                    line,
                    field: "<row>".into(),
                    message: e.to_string(),
                }
            })?;
            if !more {
                return Ok(());
            }
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let row = CsvRow {
                file: &self.file,
                headers: &self.headers,
                record: record.clone(),
                line,
            };
            f(&row)?;
        }
    }
}

impl CsvRow<'_> {
    pub fn file(&self) -> &str {
        self.file
    }

    pub fn str(&self, field: &str) -> Result<&str> {
        let idx = self
            .headers
            .iter()
            .position(|h| h == field)
            .ok_or_else(|| self.malformed(field, "missing column"))?;
        self.record
            .get(idx)
            .ok_or_else(|| self.malformed(field, "missing value"))
    }

    pub fn parse<T>(&self, field: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.str(field)?;
        raw.parse::<T>()
            .map_err(|e| self.malformed(field, &format!("cannot parse `{raw}`: {e}")))
    }

    pub fn date(&self, field: &str) -> Result<NaiveDate> {
        let raw = self.str(field)?;
        NaiveDate::parse_from_str(raw, DATE_FORMAT)
            .map_err(|e| self.malformed(field, &format!("bad ISO-8601 date `{raw}`: {e}")))
    }

    pub fn malformed(&self, field: &str, message: &str) -> Error {
        Error::Malformed {
            file: self.file.to_string(),
            line: self.line,
            field: field.to_string(),
            message: message.to_string(),
        }
    }
}

pub fn create_csv(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().from_writer(BufWriter::new(file)))
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    file.write_all(contents.as_bytes())
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn format_date(date: NaiveDate) -> String {
    date.format(DATE_FORMAT).to_string()
}
