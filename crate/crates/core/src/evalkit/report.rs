use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// One measured value: method x loss x privileged source x seed x metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub method: String,
    pub loss: String,
    /// Privileged pair source (`none`, `oracle`, `translator`, ...).
    pub privileged: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    fn row_label(&self) -> String {
        format!("{} / {} / {}", self.method, self.loss, self.privileged)
    }
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().enumerate().map(|(i, row)| row.map_err(|e| Error::MalformedRow { row: i + 1, reason: e.to_string() })).collect()
}

/// Metrics where smaller is better.
pub fn lower_is_better(metric: &str) -> bool {
    metric.ends_with("drop") || metric.ends_with("mae") || metric.ends_with("loss")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub best: bool,
}

/// Mean (sample std) over seeds, one row per method/loss/privileged label
/// in order of first appearance and one column per metric.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<String>,
    pub metrics: Vec<String>,
    pub cells: Vec<Vec<Option<Cell>>>,
}

pub fn summarize(rows: &[ResultRow], metrics: &[String]) -> Result<SummaryTable> {
    if rows.is_empty() {
        return Err(Error::Config("no results to report".into()));
    }
    let mut labels: Vec<String> = Vec::new();
    for r in rows {
        let l = r.row_label();
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    let mut cells: Vec<Vec<Option<Cell>>> = labels
        .iter()
        .map(|l| {
            metrics
                .iter()
                .map(|m| {
                    let v: Vec<f64> = rows.iter().filter(|r| &r.row_label() == l && &r.metric == m).map(|r| r.value).collect();
                    if v.is_empty() {
                        return None;
                    }
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    let std = if v.len() > 1 {
                        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
                    } else {
                        0.0
                    };
                    Some(Cell { mean, std, n: v.len(), best: false })
                })
                .collect()
        })
        .collect();
    for (j, m) in metrics.iter().enumerate() {
        let lower = lower_is_better(m);
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in cells.iter().enumerate() {
            if let Some(c) = &row[j] {
                let better = match best {
                    None => true,
                    Some((_, b)) => (lower && c.mean < b) || (!lower && c.mean > b),
                };
                if better {
                    best = Some((i, c.mean));
                }
            }
        }
        if let Some((i, _)) = best {
            cells[i][j].as_mut().unwrap().best = true;
        }
    }
    Ok(SummaryTable { rows: labels, metrics: metrics.to_vec(), cells })
}

impl SummaryTable {
    /// Markdown table; best cells in bold.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| method / loss / privileged | {} |\n", self.metrics.join(" | "));
        s += &format!("|---|{}\n", "---|".repeat(self.metrics.len()));
        for (label, row) in self.rows.iter().zip(&self.cells) {
            let cells: Vec<String> = row
                .iter()
                .map(|c| match c {
                    None => "-".to_string(),
                    Some(c) if c.best => format!("**{:.4} ({:.4})**", c.mean, c.std),
                    Some(c) => format!("{:.4} ({:.4})", c.mean, c.std),
                })
                .collect();
            s += &format!("| {label} | {} |\n", cells.join(" | "));
        }
        s
    }
}

/// Metric names in order of first appearance.
pub fn metric_names(rows: &[ResultRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.metric) {
            out.push(r.metric.clone());
        }
    }
    out
}

/// Main table (metrics without a `class:` prefix) followed by the per-class
/// accuracy breakdown when present.
pub fn report_markdown(rows: &[ResultRow]) -> Result<String> {
    let names = metric_names(rows);
    let (per_class, main): (Vec<String>, Vec<String>) = names.into_iter().partition(|m| m.starts_with("class:"));
    let mut out = String::from("## Results\n\nMean over seeds, sample standard deviation in parentheses; best per column in bold.\n\n");
    out += &summarize(rows, &main)?.to_markdown();
    if !per_class.is_empty() {
        out += "\n## Per-class probe accuracy\n\n";
        out += &summarize(rows, &per_class)?.to_markdown();
    }
    Ok(out)
}
