//! Architecture reports: one row per model state with hidden size, FFN
//! width, attention heads, head dim, layer count and parameter count.
//!
//! Per-layer widths print as a single number when every layer agrees and as
//! a `;`-separated list otherwise.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::PruneTrace;

pub const COLUMNS: [&str; 7] = ["name", "hidden", "ffn", "heads", "head_dim", "layers", "params"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchRow {
    pub name: String,
    pub hidden: usize,
    pub ffn: Vec<usize>,
    pub heads: Vec<usize>,
    pub head_dim: usize,
    pub layers: usize,
    pub params: Option<usize>,
}

impl ArchRow {
    pub fn from_config(name: &str, cfg: &ModelConfig) -> Self {
        Self {
            name: name.to_string(),
            hidden: cfg.hidden,
            ffn: cfg.ffn.clone(),
            heads: cfg.heads.clone(),
            head_dim: cfg.head_dim,
            layers: cfg.n_layers(),
            params: Some(cfg.parameter_count()),
        }
    }

    pub fn cells(&self) -> [String; 7] {
        [
            self.name.clone(),
            self.hidden.to_string(),
            compact(&self.ffn),
            compact(&self.heads),
            self.head_dim.to_string(),
            self.layers.to_string(),
            self.params.map_or(String::new(), |p| p.to_string()),
        ]
    }

    pub fn from_cells(cells: &[&str]) -> Result<Self> {
        if cells.len() != COLUMNS.len() {
            return Err(Error::Report(format!("expected {} fields, got {}", COLUMNS.len(), cells.len())));
        }
        let num = |i: usize| -> Result<usize> {
            cells[i]
                .trim()
                .parse()
                .map_err(|_| Error::Report(format!("bad {} value {:?}", COLUMNS[i], cells[i])))
        };
        let layers = num(5)?;
        let list = |i: usize| -> Result<Vec<usize>> {
            let xs: Vec<usize> = cells[i]
                .split(';')
                .map(|x| x.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Report(format!("bad {} value {:?}", COLUMNS[i], cells[i])))?;
            match xs.len() {
                1 => Ok(vec![xs[0]; layers]),
                n if n == layers => Ok(xs),
                n => Err(Error::Report(format!("{} lists {n} layers, expected {layers}", COLUMNS[i]))),
            }
        };
        let params = match cells[6].trim() {
            "" => None,
            _ => Some(num(6)?),
        };
        Ok(Self {
            name: cells[0].to_string(),
            hidden: num(1)?,
            ffn: list(2)?,
            heads: list(3)?,
            head_dim: num(4)?,
            layers,
            params,
        })
    }
}

fn compact(xs: &[usize]) -> String {
    match xs.first() {
        Some(&x) if xs.iter().all(|&y| y == x) => x.to_string(),
        _ => xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"),
    }
}

/// One row per prune event, using the post-prune dimensions.
pub fn rows_from_trace(trace: &PruneTrace, head_dim: usize) -> Vec<ArchRow> {
    trace
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| ArchRow {
            name: format!("prune{}@{}", i + 1, r.step),
            hidden: r.hidden,
            ffn: r.ffn.clone(),
            heads: r.heads.clone(),
            head_dim,
            layers: r.heads.len(),
            params: Some(r.params),
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[ArchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record(r.cells())?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv(rows: &[ArchRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Report(e.to_string()))
}

pub fn read_csv(text: &str) -> Result<Vec<ArchRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(Error::Report(format!("unexpected header {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            ArchRow::from_cells(&rec.iter().collect::<Vec<_>>())
        })
        .collect()
}

/// Whitespace-aligned table with the same cells as the CSV rendering.
pub fn render_table(rows: &[ArchRow]) -> String {
    let cells: Vec<[String; 7]> = rows.iter().map(ArchRow::cells).collect();
    let mut widths = COLUMNS.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len().max(1));
        }
    }
    let line = |row: &[String]| {
        row.iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                let c = if c.is_empty() { "-" } else { c.as_str() };
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&COLUMNS.map(String::from));
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

/// Parses [`render_table`] output back into rows.
pub fn parse_table(text: &str) -> Result<Vec<ArchRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if header != COLUMNS {
        return Err(Error::Report(format!("unexpected header {header:?}")));
    }
    lines
        .map(|l| {
            let cells: Vec<&str> = l
                .split_whitespace()
                .map(|c| if c == "-" { "" } else { c })
                .collect();
            ArchRow::from_cells(&cells)
        })
        .collect()
}
