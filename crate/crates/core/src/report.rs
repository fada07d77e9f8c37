//! Results tables: one line per dataset, mechanism, rate and metric, one
//! column per method, averaged over runs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::io::write_text;
use crate::metrics::ResultRow;

const METRIC_ORDER: [&str; 4] = ["MAE", "RMSE", "S-MAE", "LFE"];
const METHOD_ORDER: [&str; 3] = ["Mean", "Lerp", "LSCD"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    /// Sample standard deviation over runs, 0 for a single run.
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub dataset: String,
    pub mechanism: String,
    pub rate: f64,
    pub metric: String,
    /// Aligned with [`Table::methods`].
    pub cells: Vec<Option<Cell>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub methods: Vec<String>,
    pub rows: Vec<TableRow>,
}

fn rank(order: &[&str], name: &str) -> usize {
    order.iter().position(|m| *m == name).unwrap_or(order.len())
}

pub fn aggregate(rows: &[ResultRow]) -> Table {
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    methods.sort_by_key(|m| rank(&METHOD_ORDER, m));

    let mut keys: Vec<(String, String, f64, String)> = Vec::new();
    for r in rows {
        let key = (r.dataset.clone(), r.mechanism.clone(), r.rate, r.metric.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.sort_by(|a, b| {
        (&a.0, &a.1)
            .cmp(&(&b.0, &b.1))
            .then(a.2.total_cmp(&b.2))
            .then(rank(&METRIC_ORDER, &a.3).cmp(&rank(&METRIC_ORDER, &b.3)))
    });

    let rows = keys
        .into_iter()
        .map(|(dataset, mechanism, rate, metric)| {
            let cells = methods
                .iter()
                .map(|method| {
                    let vals: Vec<f64> = rows
                        .iter()
                        .filter(|r| {
                            r.dataset == dataset && r.mechanism == mechanism && r.rate == rate && r.metric == metric && &r.method == method
                        })
                        .map(|r| r.value)
                        .collect();
                    cell(&vals)
                })
                .collect();
            TableRow { dataset, mechanism, rate, metric, cells }
        })
        .collect();
    Table { methods, rows }
}

fn cell(vals: &[f64]) -> Option<Cell> {
    let n = vals.len();
    if n == 0 {
        return None;
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Cell { mean, std, runs: n })
}

pub fn to_csv(table: &Table) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset".to_string(), "mechanism".into(), "rate".into(), "metric".into()];
    for m in &table.methods {
        header.push(m.clone());
        header.push(format!("{m}_std"));
    }
    header.push("runs".into());
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![r.dataset.clone(), r.mechanism.clone(), r.rate.to_string(), r.metric.clone()];
        for c in &r.cells {
            match c {
                Some(c) => {
                    rec.push(c.mean.to_string());
                    rec.push(c.std.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        rec.push(r.cells.iter().flatten().map(|c| c.runs).max().unwrap_or(0).to_string());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::error::Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn to_markdown(table: &Table) -> String {
    let mut s = String::from("| Dataset | Mechanism | Rate | Metric |");
    for m in &table.methods {
        let _ = write!(s, " {m} |");
    }
    s.push_str("\n|---|---|---|---|");
    s.push_str(&"---|".repeat(table.methods.len()));
    s.push('\n');
    for r in &table.rows {
        let _ = write!(s, "| {} | {} | {} | {} |", r.dataset, r.mechanism, r.rate, r.metric);
        for c in &r.cells {
            match c {
                Some(c) if c.runs > 1 => {
                    let _ = write!(s, " {:.4} ± {:.4} |", c.mean, c.std);
                }
                Some(c) => {
                    let _ = write!(s, " {:.4} |", c.mean);
                }
                None => s.push_str(" |"),
            }
        }
        s.push('\n');
    }
    s
}

/// Writes `report.csv` and `report.md` into `dir`.
pub fn write_report(dir: &Path, rows: &[ResultRow]) -> Result<Table> {
    let table = aggregate(rows);
    write_text(&dir.join("report.csv"), &to_csv(&table)?)?;
    write_text(&dir.join("report.md"), &to_markdown(&table))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run: &str, method: &str, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            run_id: run.into(),
            dataset: "sines".into(),
            mechanism: "mcar".into(),
            rate: 0.5,
            method: method.into(),
            metric: metric.into(),
            value,
        }
    }

    #[test]
    fn averages_runs_and_orders_columns() {
        let rows = vec![
            row("a", "LSCD", "RMSE", 1.0),
            row("a", "Mean", "MAE", 2.0),
            row("b", "Mean", "MAE", 4.0),
            row("a", "LSCD", "MAE", 1.0),
        ];
        let t = aggregate(&rows);
        assert_eq!(t.methods, ["Mean", "LSCD"]);
        assert_eq!(t.rows.iter().map(|r| r.metric.as_str()).collect::<Vec<_>>(), ["MAE", "RMSE"]);
        let mae = t.rows[0].cells[0].unwrap();
        assert_eq!((mae.mean, mae.runs), (3.0, 2));
        assert!((mae.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(t.rows[1].cells[0], None);
        let md = to_markdown(&t);
        assert!(md.contains("| sines | mcar | 0.5 | MAE | 3.0000 ± 1.4142 | 1.0000 |"), "{md}");
    }
}
