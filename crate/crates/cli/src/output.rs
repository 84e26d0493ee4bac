use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::Result;
use netmfd::table::{RawTable, Table, TableFormat};
use netmfd::Error;
use serde_json::Value;

use crate::{FormatArg, Global};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinSet(pub BTreeSet<u32>);

/// Parses `0-5,8,10-11` into a set of bin indices.
pub fn parse_bins(text: &str) -> std::result::Result<BinSet, String> {
    let mut set = BTreeSet::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| s.trim().parse::<u32>().map_err(|e| format!("bad bin '{s}': {e}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty bin range '{part}'"));
                }
                set.extend(a..=b);
            }
            None => {
                set.insert(num(part)?);
            }
        }
    }
    if set.is_empty() {
        return Err("no bins given".into());
    }
    Ok(BinSet(set))
}

/// Parses `1=12,2=22` style maps.
pub fn parse_pairs<V: std::str::FromStr>(text: &str, what: &str) -> Result<BTreeMap<u32, V>> {
    let mut map = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parsed = part
            .split_once('=')
            .and_then(|(k, v)| Some((k.trim().parse::<u32>().ok()?, v.trim().parse::<V>().ok()?)));
        let Some((k, v)) = parsed else {
            return Err(Error::Argument(format!("{what}: expected `class=value`, got '{part}'")).into());
        };
        if map.insert(k, v).is_some() {
            return Err(Error::Argument(format!("{what}: class {k} given twice")).into());
        }
    }
    Ok(map)
}

/// Where tables and JSON documents go.
pub struct Output {
    dir: Option<PathBuf>,
    format: TableFormat,
}

impl Output {
    pub fn new(global: &Global) -> Self {
        let format = match global.format {
            FormatArg::Csv => TableFormat::Csv,
            FormatArg::Tsv => TableFormat::Tsv,
        };
        Output {
            dir: global.output_dir.clone(),
            format,
        }
    }

    pub fn format(&self) -> TableFormat {
        self.format
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// The command's main table: a file under the output directory, or stdout.
    pub fn main_table(&self, table: &Table) -> Result<()> {
        match &self.dir {
            Some(dir) => {
                let path = table.write_to_dir(dir, self.format)?;
                eprintln!("wrote {}", path.display());
            }
            None => print!("{}", table.to_string(self.format)?),
        }
        Ok(())
    }

    /// A secondary table, written only when there is an output directory.
    pub fn side_table(&self, table: &Table) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = table.write_to_dir(dir, self.format)?;
            eprintln!("wrote {}", path.display());
        }
        Ok(())
    }

    /// A JSON document: `<dir>/<name>.json`, or stdout.
    pub fn json(&self, name: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        match &self.dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("{name}.json"));
                let tmp = path.with_extension("partial");
                std::fs::write(&tmp, text)?;
                std::fs::rename(&tmp, &path)?;
                eprintln!("wrote {}", path.display());
            }
            None => print!("{text}"),
        }
        Ok(())
    }
}

/// `(bin_index, value)` pairs of one column of a per-bin estimate table,
/// optionally limited to rows of one `method`.
pub fn read_series(path: &Path, column: &str, method: Option<&str>) -> Result<Vec<(u32, f64)>> {
    let table = RawTable::read_path(path)?;
    let bin = table.column("bin_index")?;
    let value = table.column(column)?;
    let method_col = table.optional_column("method");
    if let (Some(m), None) = (method, method_col) {
        return Err(Error::Validation(format!("{}: no method column to select '{m}'", path.display())).into());
    }
    let mut methods = BTreeSet::new();
    let mut out = Vec::new();
    for row in table.rows() {
        let row_method = row.opt_str(method_col);
        if let Some(rm) = row_method {
            methods.insert(rm.to_string());
        }
        if method.is_some() && row_method != method {
            continue;
        }
        out.push((row.parse(bin)?, row.parse(value)?));
    }
    if method.is_none() && methods.len() > 1 {
        let list: Vec<_> = methods.into_iter().collect();
        return Err(Error::Validation(format!(
            "{} mixes methods {}; pick one with --method",
            path.display(),
            list.join(", ")
        ))
        .into());
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("{}: no rows selected", path.display())).into());
    }
    Ok(out)
}
