//! Windowed aggregation and CSV output.
//!
//! Numbers are written with six significant digits in the style of C's
//! `%.6g`, independent of locale. Every sink tracks the last window it
//! wrote and refuses to write the same (or an earlier) window twice.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

/// Placeholder for values that do not exist in a window.
pub const GAP: &str = "NA";

pub const MOBILITY_HEADER: &[&str] = &["t", "veh", "s", "x", "y", "speed", "accel", "gap_front", "mode"];
pub const CHANNEL_HEADER: &[&str] = &["t", "veh", "los", "d3d", "pl_db", "shadow_db", "rsrp_dbm", "snr_db"];
pub const CHANNEL_1S_HEADER: &[&str] =
    &["t", "veh", "samples", "avg_rsrp", "min_rsrp", "max_rsrp", "avg_rsrp_shadow_free", "avg_snr", "los_frac"];
pub const LINK_HEADER: &[&str] = &["t", "veh", "dir", "avg_mcs", "avg_bler", "retx_count", "tx_ok", "tx_drop"];
pub const APP_HEADER: &[&str] = &["t", "veh", "from", "seq", "delay_ms", "mode"];
pub const LEGS_HEADER: &[&str] = &["t", "veh", "from", "seq", "ul_ms", "dl_ms"];

/// `%.6g`: six significant digits, trailing zeros removed, exponent form
/// below 1e-4 or from 1e6 up.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    // Round to 6 significant digits first; the exponent of the rounded
    // value decides the notation, exactly as printf does.
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| GAP.to_string(), fmt_num)
}

/// Count, sum and range of a set of samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub count: u64,
    pub sum: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn push(&mut self, x: f64) {
        if self.count == 0 {
            self.min = x;
            self.max = x;
        } else {
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
        self.count += 1;
        self.sum += x;
    }

    pub fn merge(&mut self, o: &Summary) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *o;
            return;
        }
        self.count += o.count;
        self.sum += o.sum;
        self.min = self.min.min(o.min);
        self.max = self.max.max(o.max);
    }

    /// Arithmetic mean, clamped into `[min, max]` against rounding; `None`
    /// for an empty window.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.sum / self.count as f64).clamp(self.min, self.max))
    }
}

pub fn aggregate(samples: &[f64]) -> Summary {
    let mut s = Summary::default();
    for &x in samples {
        s.push(x);
    }
    s
}

/// Per-vehicle channel statistics for one window. dB values are averaged
/// in the dB domain.
#[derive(Clone, Copy, Debug, Default)]
pub struct ChannelWindow {
    pub rsrp: Summary,
    pub rsrp_shadow_free: Summary,
    pub snr: Summary,
    pub los: u64,
}

impl ChannelWindow {
    pub fn push(&mut self, rsrp: f64, rsrp_shadow_free: f64, snr: f64, los: bool) {
        self.rsrp.push(rsrp);
        self.rsrp_shadow_free.push(rsrp_shadow_free);
        self.snr.push(snr);
        self.los += los as u64;
    }

    pub fn merge(&mut self, o: &ChannelWindow) {
        self.rsrp.merge(&o.rsrp);
        self.rsrp_shadow_free.merge(&o.rsrp_shadow_free);
        self.snr.merge(&o.snr);
        self.los += o.los;
    }

    pub fn row(&self, t: f64, veh: &str) -> Vec<String> {
        let n = self.rsrp.count;
        vec![
            fmt_num(t),
            veh.to_string(),
            n.to_string(),
            fmt_opt(self.rsrp.mean()),
            fmt_opt((n > 0).then_some(self.rsrp.min)),
            fmt_opt((n > 0).then_some(self.rsrp.max)),
            fmt_opt(self.rsrp_shadow_free.mean()),
            fmt_opt(self.snr.mean()),
            fmt_opt((n > 0).then(|| self.los as f64 / n as f64)),
        ]
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("window {window} already written to {file} (last was {last})")]
    DuplicateWindow { file: String, window: u64, last: u64 },
    #[error("row has {got} fields, {file} expects {want}")]
    RowWidth { file: String, got: usize, want: usize },
    #[error("writing {file}: {source}")]
    Io { file: String, source: io::Error },
}

/// One CSV file with a fixed header. Rows are grouped into windows that
/// are written in a single call.
pub struct CsvSink {
    name: String,
    width: usize,
    out: BufWriter<File>,
    last_window: Option<u64>,
    rows: u64,
}

impl CsvSink {
    pub fn create(dir: &Path, name: &str, header: &[&str]) -> Result<CsvSink, MetricsError> {
        let io_err = |source| MetricsError::Io { file: name.to_string(), source };
        let file = File::create(dir.join(name)).map_err(io_err)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", header.join(",")).map_err(io_err)?;
        Ok(CsvSink { name: name.to_string(), width: header.len(), out, last_window: None, rows: 0 })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    /// Append all rows of window `window` (an increasing index, e.g. the
    /// step number at the window end).
    pub fn write_window(&mut self, window: u64, rows: &[Vec<String>]) -> Result<(), MetricsError> {
        if let Some(last) = self.last_window {
            if window <= last {
                return Err(MetricsError::DuplicateWindow { file: self.name.clone(), window, last });
            }
        }
        let mut buf = String::new();
        for row in rows {
            if row.len() != self.width {
                return Err(MetricsError::RowWidth { file: self.name.clone(), got: row.len(), want: self.width });
            }
            buf.push_str(&row.join(","));
            buf.push('\n');
        }
        self.out
            .write_all(buf.as_bytes())
            .map_err(|source| MetricsError::Io { file: self.name.clone(), source })?;
        self.last_window = Some(window);
        self.rows += rows.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64, MetricsError> {
        self.out.flush().map_err(|source| MetricsError::Io { file: self.name.clone(), source })?;
        Ok(self.rows)
    }
}
