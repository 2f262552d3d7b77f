use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub pruning_rate: f64,
    pub flops: u64,
    pub params: u64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub map: Option<f64>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// Plain-text table: FLOPs in M, params in K, AP columns in percent.
pub fn format_table(rows: &[TableRow]) -> String {
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<label_w$}  {:>12}  {:>9}  {:>10}  {:>6}  {:>6}  {:>6}  {:>6}",
        "Model", "Pruning Rate", "Flops (M)", "Params (K)", "AP-s", "AP-m", "AP-l", "mAP"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<label_w$}  {:>12.2}  {:>9.2}  {:>10.2}  {:>6}  {:>6}  {:>6}  {:>6}",
            r.label,
            r.pruning_rate,
            r.flops as f64 / 1e6,
            r.params as f64 / 1e3,
            pct(r.ap_small),
            pct(r.ap_medium),
            pct(r.ap_large),
            pct(r.map)
        );
    }
    out
}
