//! Per-epoch metrics records and the append-only CSV contract.
//!
//! Header: `epoch,split,cls_loss,aux_loss,total_loss,accuracy,flip_rate,lr,wall_seconds`.
//! Numeric fields are locale-independent decimals rounded to 6 significant
//! digits. An optional trailing `flip_rate_vs_pretrain` column is appended
//! when the run is configured to track flips against the pretrain snapshot.

use crate::error::{LnsError, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub cls_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub accuracy: f64,
    pub flip_rate: f64,
    pub lr: f64,
    pub wall_seconds: f64,
    pub flip_rate_vs_pretrain: Option<f64>,
}

pub const CSV_HEADER: &str =
    "epoch,split,cls_loss,aux_loss,total_loss,accuracy,flip_rate,lr,wall_seconds";

/// Round to 6 significant digits and render without exponent for the value
/// ranges metrics take (plain `%g`-style decimals).
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else { "inf".into() };
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let rounded = format!("{v:.decimals$}");
    // trim trailing zeros but keep at least one digit
    if rounded.contains('.') {
        let t = rounded.trim_end_matches('0').trim_end_matches('.');
        t.to_string()
    } else {
        rounded
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    with_pretrain_column: bool,
    header_written: bool,
}

impl MetricsWriter {
    pub fn new(path: &Path, with_pretrain_column: bool) -> Self {
        MetricsWriter {
            path: path.to_path_buf(),
            with_pretrain_column,
            header_written: path.exists(),
        }
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<()> {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| LnsError::io(self.path.display().to_string(), e))?;
        let mut line = String::new();
        if !self.header_written {
            line.push_str(CSV_HEADER);
            if self.with_pretrain_column {
                line.push_str(",flip_rate_vs_pretrain");
            }
            line.push('\n');
            self.header_written = true;
        }
        line.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.split,
            format_sig6(r.cls_loss),
            format_sig6(r.aux_loss),
            format_sig6(r.total_loss),
            format_sig6(r.accuracy),
            format_sig6(r.flip_rate),
            format_sig6(r.lr),
            format_sig6(r.wall_seconds),
        ));
        if self.with_pretrain_column {
            line.push(',');
            line.push_str(&format_sig6(r.flip_rate_vs_pretrain.unwrap_or(0.0)));
        }
        line.push('\n');
        file.write_all(line.as_bytes())
            .map_err(|e| LnsError::io(self.path.display().to_string(), e))
    }
}

/// Parse a metrics CSV back into records (used by tests and the selftest).
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| LnsError::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| LnsError::msg("empty metrics file"))?;
    let with_pretrain = header.ends_with(",flip_rate_vs_pretrain");
    let base_cols = CSV_HEADER.split(',').count();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let want = base_cols + usize::from(with_pretrain);
        if fields.len() != want {
            return Err(LnsError::msg(format!(
                "metrics row {} has {} fields, want {want}",
                i + 2,
                fields.len()
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| LnsError::msg(format!("bad metrics number `{s}`: {e}")))
        };
        out.push(MetricsRecord {
            epoch: fields[0]
                .parse()
                .map_err(|e| LnsError::msg(format!("bad epoch `{}`: {e}", fields[0])))?,
            split: fields[1].to_string(),
            cls_loss: f(fields[2])?,
            aux_loss: f(fields[3])?,
            total_loss: f(fields[4])?,
            accuracy: f(fields[5])?,
            flip_rate: f(fields[6])?,
            lr: f(fields[7])?,
            wall_seconds: f(fields[8])?,
            flip_rate_vs_pretrain: if with_pretrain { Some(f(fields[9])?) } else { None },
        });
    }
    Ok(out)
}
