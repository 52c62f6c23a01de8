//! JSON and JSON Lines plumbing plus the record, topology and signal
//! constraint files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use lanetwin_core::domain::{IntersectionTopology, SimulationRecord};
use lanetwin_core::signal::SignalConstraints;
use lanetwin_core::template::topologies;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::json(path, None, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::json(path, None, e))?;
    writeln!(w).and_then(|()| w.flush()).map_err(|e| Error::io(path, e))
}

/// One compact JSON document per line.
pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::json(path, None, e))?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Non-blank lines of a JSON Lines file with 1-based line numbers.
pub fn jsonl_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn parse_line<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::json(path, Some(line), e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    jsonl_lines(path)?.iter().map(|(n, l)| parse_line(path, *n, l)).collect()
}

pub fn write_records(path: &Path, records: &[SimulationRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Records are validated as they are read; errors carry the line number.
pub fn read_records(path: &Path) -> Result<Vec<SimulationRecord>> {
    let mut out = Vec::new();
    for (n, line) in jsonl_lines(path)? {
        let r: SimulationRecord = parse_line(path, n, &line)?;
        r.validate().map_err(|e| Error::format(path, format!("line {n}: {e}")))?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_topology(path: &Path) -> Result<IntersectionTopology> {
    read_json(path)
}

pub fn write_topology(path: &Path, topo: &IntersectionTopology) -> Result<()> {
    write_json(path, topo)
}

/// A topology file path, or `builtin:<name>` for one of the shipped
/// topologies (`builtin:all` expands to every one of them).
pub fn resolve_topologies(spec: &str) -> Result<Vec<IntersectionTopology>> {
    match spec.strip_prefix("builtin:") {
        Some("all") => Ok(topologies::all()),
        Some(name) => topologies::by_name(name)
            .map(|t| vec![t])
            .ok_or_else(|| Error::Config(format!("unknown built-in topology `{name}`"))),
        None => read_topology(Path::new(spec)).map(|t| vec![t]),
    }
}

pub fn read_constraints(path: &Path) -> Result<SignalConstraints> {
    let c: SignalConstraints = read_json(path)?;
    c.validate()?;
    Ok(c)
}
