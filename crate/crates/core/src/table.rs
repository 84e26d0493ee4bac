//! Delimiter-separated table reading and writing.
//!
//! Every input and output of the crate is a header-led table. Readers look up
//! columns by exact, case-sensitive header name and report the line and field
//! of the first malformed value.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Field delimiter used for tables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    #[default]
    Csv,
    Tsv,
}

impl TableFormat {
    pub fn delimiter(self) -> u8 {
        match self {
            TableFormat::Csv => b',',
            TableFormat::Tsv => b'\t',
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Tsv => "tsv",
        }
    }

    /// Picks the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("tab") => TableFormat::Tsv,
            _ => TableFormat::Csv,
        }
    }
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "tsv" => Ok(TableFormat::Tsv),
            other => Err(Error::Argument(format!("unknown table format '{other}'"))),
        }
    }
}

/// A parsed table: header plus string rows, each tagged with its source line.
#[derive(Debug, Clone)]
pub struct RawTable {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

impl RawTable {
    pub fn read<R: Read>(reader: R, format: TableFormat) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(format.delimiter())
            .trim(csv::Trim::All)
            .flexible(true)
            .comment(Some(b'#'))
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            if record.iter().all(str::is_empty) {
                continue;
            }
            rows.push((line, record.iter().map(str::to_string).collect()));
        }
        Ok(RawTable { header, rows })
    }

    pub fn read_path(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        Self::read(file, TableFormat::from_path(path))
    }

    /// Column index of a required field.
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            field: name.to_string(),
            message: "missing column in header".into(),
        })
    }

    pub fn optional_column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> {
        self.rows.iter().map(|(line, values)| Row {
            line: *line,
            values,
            header: &self.header,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One data row with typed accessors.
pub struct Row<'a> {
    pub line: usize,
    values: &'a [String],
    header: &'a [String],
}

impl Row<'_> {
    fn err(&self, col: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            field: self.header.get(col).cloned().unwrap_or_default(),
            message: message.into(),
        }
    }

    pub fn str(&self, col: usize) -> Result<&str> {
        match self.values.get(col).map(String::as_str) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(self.err(col, "missing value")),
        }
    }

    pub fn opt_str(&self, col: Option<usize>) -> Option<&str> {
        col.and_then(|c| self.values.get(c))
            .map(String::as_str)
            .filter(|v| !v.is_empty())
    }

    pub fn parse<T: FromStr>(&self, col: usize) -> Result<T> {
        let raw = self.str(col)?;
        raw.parse().map_err(|_| self.err(col, format!("cannot parse '{raw}'")))
    }

    pub fn parse_opt<T: FromStr>(&self, col: Option<usize>) -> Result<Option<T>> {
        match (col, self.opt_str(col)) {
            (Some(c), Some(raw)) => raw
                .parse()
                .map(Some)
                .map_err(|_| self.err(c, format!("cannot parse '{raw}'"))),
            _ => Ok(None),
        }
    }
}

/// An in-memory output table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: impl Into<String>, header: &[&str]) -> Self {
        Table {
            name: name.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<I, S>(&mut self, row: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        let row: Vec<String> = row.into_iter().map(|v| v.to_string()).collect();
        debug_assert_eq!(row.len(), self.header.len(), "row width in {}", self.name);
        self.rows.push(row);
    }

    pub fn write<W: Write>(&self, writer: W, format: TableFormat) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .delimiter(format.delimiter())
            .from_writer(writer);
        wtr.write_record(&self.header)?;
        for row in &self.rows {
            wtr.write_record(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_string(&self, format: TableFormat) -> Result<String> {
        let mut buf = Vec::new();
        self.write(&mut buf, format)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Writes to `dir/<name>.<ext>` through a temporary file so readers never
    /// see a partially written table.
    pub fn write_to_dir(&self, dir: &Path, format: TableFormat) -> Result<std::path::PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.{}", self.name, format.extension()));
        write_atomic(&path, self.to_string(format)?.as_bytes())?;
        Ok(path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Formats an optional float, writing an empty cell for `None`.
pub fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
