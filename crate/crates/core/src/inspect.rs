//! Parameter and storage figures for network configurations, relative to
//! the full-size ReCoNet reference.

use std::fmt::Write;

use crate::stylenet::{param_count, reconet_reference_count, size_of_params, ArchConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeRow {
    pub config: ArchConfig,
    pub params: u64,
    /// Parameters rounded to the nearest thousand.
    pub params_k: u64,
    /// `100 * params / reference params`.
    pub pct_params: f64,
    /// Binary megabytes of `f32` weights.
    pub megabytes: f64,
    /// Ratio of the two-decimal MB figures, in percent.
    pub pct_size: f64,
}

pub fn round_to(v: f64, decimals: i32) -> f64 {
    let k = 10f64.powi(decimals);
    (v * k).round() / k
}

pub fn reference_megabytes() -> f64 {
    size_of_params(reconet_reference_count()).megabytes
}

pub fn size_row(config: ArchConfig) -> SizeRow {
    let params = param_count(&config);
    let reference = reconet_reference_count();
    let megabytes = size_of_params(params).megabytes;
    SizeRow {
        config,
        params,
        params_k: (params + 500) / 1000,
        pct_params: 100.0 * params as f64 / reference as f64,
        megabytes,
        pct_size: 100.0 * round_to(megabytes, 2) / round_to(reference_megabytes(), 2),
    }
}

pub fn size_table() -> Vec<SizeRow> {
    ArchConfig::size_study().into_iter().map(size_row).collect()
}

pub fn format_rows(rows: &[SizeRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6} {:>5} {:>9} {:>9} {:>7} {:>10} {:>8} {:>7}",
        "alpha", "beta", "variant", "params", "k", "% params", "MB", "% size"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>6.3} {:>5.2} {:>9} {:>9} {:>6}k {:>10.2} {:>8.2} {:>7.2}",
            r.config.alpha(),
            r.config.beta(),
            r.config.variant().to_string(),
            r.params,
            r.params_k,
            r.pct_params,
            r.megabytes,
            r.pct_size
        );
    }
    let reference = reconet_reference_count();
    let _ = writeln!(
        out,
        "reference: {} params, {:.2} MB",
        reference,
        reference_megabytes()
    );
    out
}
