//! Aggregation of report rows across iteration counts.

use std::collections::BTreeMap;
use std::path::Path;

use super::experiment::ReportRow;
use crate::error::{Error, Result};

pub const SUMMARY_HEADER: [&str; 13] = [
    "source",
    "target",
    "variant",
    "centralized",
    "strategy",
    "defense",
    "seed",
    "r_y",
    "r_cb",
    "r_cr",
    "iters",
    "mean_fooling_rate",
    "std_fooling_rate",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// Every column up to and including `r_cr`, as written in the report.
    pub key: Vec<String>,
    pub iters: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Groups rows that differ only in T and reports mean ± std of their
/// fooling rates. Output is sorted by key.
pub fn aggregate_over_iters(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<Vec<String>, Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows {
        let rec = r.to_record();
        // drop experiment_id and iters
        let key: Vec<String> = rec[1..7].iter().chain(&rec[8..12]).cloned().collect();
        groups.entry(key).or_default().push((r.iters, r.fooling_rate));
    }
    groups
        .into_iter()
        .map(|(key, mut vals)| {
            vals.sort_by_key(|v| v.0);
            let n = vals.len() as f64;
            let mean = vals.iter().map(|v| v.1).sum::<f64>() / n;
            let var = vals.iter().map(|v| (v.1 - mean).powi(2)).sum::<f64>() / n;
            SummaryRow {
                key,
                iters: vals.iter().map(|v| v.0).collect(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

pub fn summary_bytes(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        let mut rec = r.key.clone();
        rec.push(r.iters.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";"));
        rec.push(format!("{:.6}", r.mean));
        rec.push(format!("{:.6}", r.std));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    std::fs::write(path, summary_bytes(rows)?)?;
    Ok(())
}
