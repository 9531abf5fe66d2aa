use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ResultRow, ResultsTable, TimingSeries};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 10] = [
    "dataset",
    "method",
    "beta",
    "lambda",
    "alpha",
    "sigma",
    "fold",
    "seed",
    "accuracy",
    "train_seconds",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::invalid(format!("unknown report format `{other}`"))),
        }
    }
}

/// Mean over the folds and seeds of one (dataset, method, noise) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: String,
    pub beta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub cells: usize,
    pub accuracy: f64,
    pub train_seconds: f64,
}

impl SummaryRow {
    fn key(&self) -> (&str, &str, u64, u64, u64, u64) {
        (
            &self.dataset,
            &self.method,
            self.beta.to_bits(),
            self.lambda.to_bits(),
            self.alpha.to_bits(),
            self.sigma.to_bits(),
        )
    }

    fn method_label(&self) -> String {
        match self.method.as_str() {
            "dropout" => format!("dropout (beta={})", self.beta),
            "robust" => format!("robust (lambda={})", self.lambda),
            "combined" => format!("combined (beta={}, lambda={})", self.beta, self.lambda),
            m => m.to_string(),
        }
    }
}

/// Groups rows in order of first appearance and averages each group.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for r in rows {
        let probe = SummaryRow {
            dataset: r.dataset.clone(),
            method: r.method.clone(),
            beta: r.beta,
            lambda: r.lambda,
            alpha: r.alpha,
            sigma: r.sigma,
            cells: 0,
            accuracy: 0.0,
            train_seconds: 0.0,
        };
        let i = match out.iter().position(|s| s.key() == probe.key()) {
            Some(i) => i,
            None => {
                out.push(probe);
                out.len() - 1
            }
        };
        out[i].cells += 1;
        out[i].accuracy += r.accuracy;
        out[i].train_seconds += r.train_seconds;
    }
    for s in &mut out {
        s.accuracy /= s.cells as f64;
        s.train_seconds /= s.cells as f64;
    }
    out
}

fn to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.method.clone(),
            r.beta.to_string(),
            r.lambda.to_string(),
            r.alpha.to_string(),
            r.sigma.to_string(),
            r.fold.to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.accuracy),
            format!("{:.3}", r.train_seconds),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// One table per dataset and sigma: methods as rows, alphas as columns,
/// mean accuracy in percent.
fn to_markdown(rows: &[ResultRow]) -> String {
    let summary = summarize(rows);
    let mut sections: Vec<(String, u64)> = Vec::new();
    for s in &summary {
        let k = (s.dataset.clone(), s.sigma.to_bits());
        if !sections.contains(&k) {
            sections.push(k);
        }
    }
    let mut out = String::new();
    for (dataset, sigma_bits) in sections {
        let part: Vec<&SummaryRow> = summary
            .iter()
            .filter(|s| s.dataset == dataset && s.sigma.to_bits() == sigma_bits)
            .collect();
        let mut alphas: Vec<f64> = Vec::new();
        let mut methods: Vec<String> = Vec::new();
        for s in &part {
            if !alphas.iter().any(|a| a.to_bits() == s.alpha.to_bits()) {
                alphas.push(s.alpha);
            }
            let label = s.method_label();
            if !methods.contains(&label) {
                methods.push(label);
            }
        }
        alphas.sort_by(f64::total_cmp);
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "### {dataset} (sigma={})\n", f64::from_bits(sigma_bits));
        out.push_str("| method |");
        for a in &alphas {
            let _ = write!(out, " alpha={a} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(alphas.len()));
        out.push('\n');
        for m in &methods {
            let _ = write!(out, "| {m} |");
            for a in &alphas {
                let cell = part
                    .iter()
                    .find(|s| &s.method_label() == m && s.alpha.to_bits() == a.to_bits())
                    .map_or_else(|| "-".to_string(), |s| format!("{:.1}", 100.0 * s.accuracy));
                let _ = write!(out, " {cell} |");
            }
            out.push('\n');
        }
    }
    out
}

/// Writes the table's rows. CSV keeps every raw row; Markdown shows the
/// per-method means.
pub fn write_results(table: &ResultsTable, path: &Path, format: ReportFormat) -> Result<()> {
    if table.rows.is_empty() {
        return Err(Error::invalid("no results to write"));
    }
    let text = match format {
        ReportFormat::Csv => to_csv(&table.rows)?,
        ReportFormat::Markdown => to_markdown(&table.rows),
    };
    fs::write(path, text)?;
    Ok(())
}

/// Timing series as CSV, one row per method and epoch.
pub fn timing_csv(series: &[TimingSeries]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record([
        "method",
        "beta",
        "lambda",
        "epoch",
        "epoch_seconds",
        "cumulative_seconds",
        "train_accuracy",
        "test_accuracy",
    ])?;
    for s in series {
        for p in &s.points {
            w.write_record([
                s.method.name().to_string(),
                s.method.beta().to_string(),
                s.method.lambda().to_string(),
                p.epoch.to_string(),
                format!("{:.3}", p.epoch_seconds),
                format!("{:.3}", p.cumulative_seconds),
                format!("{:.6}", p.train_accuracy),
                format!("{:.6}", p.test_accuracy),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Reads rows written by [`write_results`] in CSV form.
pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::parse(path, 1, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}
