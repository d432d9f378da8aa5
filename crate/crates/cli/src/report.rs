use std::fs;
use std::path::{Path, PathBuf};

use tbq_core::stats::log_log_slope;
use tbq_core::{Error, Result};

use crate::run::num;

/// Plot series emitted when both columns are present: file suffix, x, y.
const SERIES: [(&str, &str, &str); 3] = [("eps_decay", "eps", "freq"), ("r_decay", "r", "freq"), ("coverage", "point", "coverage")];

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        self.rows.iter().map(|r| r[i].trim().parse::<f64>().ok()).collect()
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn merge(inputs: &[PathBuf]) -> Result<Table> {
    let mut table: Option<Table> = None;
    for p in inputs {
        let text = fs::read_to_string(p).map_err(|e| Error::invalid(format!("cannot read {}: {e}", p.display())))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::invalid(format!("{} has no header row", p.display())))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        if let Some(bad) = rows.iter().position(|r| r.len() != header.len()) {
            return Err(Error::invalid(format!("{} row {} has {} fields, header has {}", p.display(), bad + 1, rows[bad].len(), header.len())));
        }
        match &mut table {
            None => table = Some(Table { header, rows }),
            Some(t) if t.header == header => t.rows.extend(rows),
            Some(t) => {
                return Err(Error::invalid(format!(
                    "schema mismatch: {} has columns [{}], expected [{}]",
                    p.display(),
                    header.join(","),
                    t.header.join(",")
                )))
            }
        }
    }
    Ok(table.unwrap_or(Table { header: Vec::new(), rows: Vec::new() }))
}

/// Merged table, per-column summary and plot series, keyed by output path.
pub fn build(inputs: &[PathBuf], out: &Path) -> Result<Vec<(PathBuf, String)>> {
    let t = merge(inputs)?;
    let mut files = Vec::new();

    let mut merged = String::new();
    if !t.header.is_empty() {
        merged += &t.header.join(",");
        merged.push('\n');
        for r in &t.rows {
            merged += &r.join(",");
            merged.push('\n');
        }
    }
    files.push((out.to_path_buf(), merged));

    // the slope column holds the log-log fit of freq against eps
    let slope = match (t.column("eps"), t.column("freq")) {
        (Some(x), Some(y)) => log_log_slope(&x, &y),
        _ => None,
    };
    let mut summary = String::from("column,count,mean,min,max,loglog_slope\n");
    for name in &t.header {
        let Some(v) = t.column(name) else { continue };
        if v.is_empty() {
            continue;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = match slope {
            Some(s) if name == "freq" => num(s),
            _ => String::new(),
        };
        summary += &format!("{name},{},{},{},{},{s}\n", v.len(), num(mean), num(lo), num(hi));
    }
    files.push((sibling(out, "summary"), summary));

    for (suffix, xn, yn) in SERIES {
        if let (Some(x), Some(y)) = (t.column(xn), t.column(yn)) {
            let mut s = String::from("x,y\n");
            for (a, b) in x.iter().zip(&y) {
                s += &format!("{},{}\n", num(*a), num(*b));
            }
            files.push((sibling(out, suffix), s));
        }
    }
    Ok(files)
}
