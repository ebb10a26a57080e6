//! Prune-trace CSV. The first ten columns are the summary (per-type
//! saliency, chosen type, hidden size, mean heads and FFN width, parameter
//! count); `heads`, `ffn` and `selection` carry the per-layer detail needed
//! to rebuild the trace exactly.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::groups::GroupType;
use crate::trainer::{PruneTrace, TraceRow};

pub const COLUMNS: [&str; 13] = [
    "step", "tokens", "s_attn", "s_ffn", "s_stem", "chosen", "m", "mean_h", "mean_n", "params", "heads", "ffn",
    "selection",
];

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

/// Writes the trace after re-checking that parameter counts strictly
/// decrease.
pub fn write_csv<W: Write>(trace: &PruneTrace, out: W) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::Trace("trace has no prune events".into()));
    }
    trace.validate()?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in &trace.rows {
        w.write_record([
            r.step.to_string(),
            r.tokens.to_string(),
            opt(r.s_attn),
            opt(r.s_ffn),
            opt(r.s_stem),
            r.chosen.as_str().to_string(),
            r.hidden.to_string(),
            r.mean_heads().to_string(),
            r.mean_ffn().to_string(),
            r.params.to_string(),
            join(&r.heads),
            join(&r.ffn),
            join(&r.selection),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv(trace: &PruneTrace) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(trace, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Trace(e.to_string()))
}

pub fn export(trace: &PruneTrace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(trace, std::io::BufWriter::new(file))
}

pub fn read_csv(text: &str) -> Result<PruneTrace> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(Error::Trace(format!("unexpected header {header:?}")));
    }
    let mut trace = PruneTrace::default();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |col: usize| Error::Trace(format!("row {}: bad {} value {:?}", line + 1, COLUMNS[col], &rec[col]));
        let num = |col: usize| rec[col].parse::<u64>().map_err(|_| bad(col));
        let float = |col: usize| -> Result<Option<f64>> {
            match &rec[col] {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad(col)),
            }
        };
        let list = |col: usize| -> Result<Vec<usize>> {
            rec[col]
                .split(';')
                .map(|x| x.parse().map_err(|_| bad(col)))
                .collect()
        };
        let row = TraceRow {
            step: num(0)? as usize,
            tokens: num(1)?,
            s_attn: float(2)?,
            s_ffn: float(3)?,
            s_stem: float(4)?,
            chosen: GroupType::parse(&rec[5]).ok_or_else(|| bad(5))?,
            hidden: num(6)? as usize,
            params: num(9)? as usize,
            heads: list(10)?,
            ffn: list(11)?,
            selection: list(12)?,
        };
        if float(7)? != Some(row.mean_heads()) {
            return Err(bad(7));
        }
        if float(8)? != Some(row.mean_ffn()) {
            return Err(bad(8));
        }
        trace.rows.push(row);
    }
    trace.validate()?;
    Ok(trace)
}

pub fn import(path: &Path) -> Result<PruneTrace> {
    read_csv(&std::fs::read_to_string(path)?)
}

/// Lossless JSON form kept next to a run's checkpoint.
pub fn save_json(trace: &PruneTrace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), trace)?;
    Ok(())
}

pub fn load_json(path: &Path) -> Result<PruneTrace> {
    let file = std::fs::File::open(path)?;
    let trace: PruneTrace = serde_json::from_reader(std::io::BufReader::new(file))?;
    trace.validate()?;
    Ok(trace)
}

/// Per-step training metrics as CSV.
pub fn write_metrics<W: Write>(metrics: &[crate::trainer::StepMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "tokens", "loss", "lr", "params"])?;
    for m in metrics {
        w.write_record([
            m.step.to_string(),
            m.tokens.to_string(),
            m.loss.to_string(),
            m.lr.to_string(),
            m.params.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
