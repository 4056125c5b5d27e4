//! Instance CSV files.
//!
//! ```text
//! # capacity=30
//! id,x,y,demand
//! 0,0.5,0.5,
//! 1,0.1,0.9,15
//! ```
//!
//! Row `id 0` is the depot and leaves `demand` empty; supplier demands are
//! divided by the declared capacity (1 when the comment is absent). Other
//! `#` lines are ignored.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qroute_core::env::Instance;

use crate::{Error, Result};

/// Parses instance CSV text; `path` only labels errors.
pub fn parse_instance(text: &str, path: &Path) -> Result<Instance> {
    let err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut capacity = 1.0;
    for (i, l) in text.lines().enumerate() {
        if let Some(v) = l.trim().strip_prefix('#').and_then(|c| c.trim().strip_prefix("capacity=")) {
            capacity = v
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|c| c.is_finite() && *c > 0.0)
                .ok_or_else(|| err(i as u64 + 1, format!("capacity must be a positive number, got {v:?}")))?;
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "x", "y", "demand"] {
        return Err(err(
            headers.position().map_or(1, |p| p.line()),
            format!("header must be id,x,y,demand, got {}", headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut depot = None;
    let mut rows: Vec<(u64, [f64; 2], f64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let num = |k: usize, what: &str| -> Result<f64> {
            record[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("{what} {:?} is not a finite number", &record[k])))
        };
        let id: u64 = record[0]
            .parse()
            .map_err(|_| err(line, format!("id {:?} is not a non-negative integer", &record[0])))?;
        let xy = [num(1, "x")?, num(2, "y")?];
        if id == 0 {
            if depot.is_some() {
                return Err(err(line, "second depot row".into()));
            }
            if !record[3].is_empty() {
                return Err(err(line, "depot row must leave demand empty".into()));
            }
            depot = Some(xy);
            continue;
        }
        if rows.iter().any(|r| r.0 == id) {
            return Err(err(line, format!("duplicate id {id}")));
        }
        let d = num(3, "demand")?;
        if d <= 0.0 {
            return Err(err(line, format!("demand must be positive, got {d}")));
        }
        rows.push((id, xy, d / capacity));
    }
    let depot = depot.ok_or_else(|| err(0, "missing depot row (id 0)".into()))?;
    rows.sort_by_key(|r| r.0);
    let suppliers = rows.iter().map(|r| r.1).collect();
    let demands = rows.iter().map(|r| r.2).collect();
    Ok(Instance::new(depot, suppliers, demands)?)
}

pub fn load_instance(path: &Path) -> Result<Instance> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_instance(&text, path)
}

/// CSV text of `instance` with capacity 1; parsing it gives the same
/// instance back.
pub fn render_instance(instance: &Instance) -> String {
    let mut s = String::from("# capacity=1\nid,x,y,demand\n");
    let [x, y] = instance.depot();
    let _ = writeln!(s, "0,{x},{y},");
    for (i, ([x, y], d)) in instance.suppliers().iter().zip(instance.demands()).enumerate() {
        let _ = writeln!(s, "{},{x},{y},{d}", i + 1);
    }
    s
}

pub fn write_instance(path: &Path, instance: &Instance) -> Result<()> {
    std::fs::write(path, render_instance(instance)).map_err(Error::io(path))
}

/// File name of the `index`-th generated instance.
pub fn instance_file_name(index: usize) -> String {
    format!("instance_{index:04}.csv")
}

/// `paths` with directories replaced by their `*.csv` files in name order.
pub fn expand_instance_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(Error::io(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("no instance files given".into()));
    }
    Ok(out)
}
