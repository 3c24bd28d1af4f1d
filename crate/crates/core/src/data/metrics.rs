//! Per-sweep / per-chunk metrics as CSV:
//! `phase,step,elbo,train_rmse,test_rmse,D,K,wall_ms`. Missing values are empty
//! fields; floats use the shortest round-trip representation.

use std::io::Write;

use crate::error::Result;

pub const METRICS_HEADER: &str = "phase,step,elbo,train_rmse,test_rmse,D,K,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub phase: String,
    pub step: u64,
    pub elbo: Option<f64>,
    pub train_rmse: Option<f64>,
    pub test_rmse: Option<f64>,
    pub d: usize,
    pub k: usize,
    pub wall_ms: Option<u128>,
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.phase,
            self.step,
            opt(&self.elbo),
            opt(&self.train_rmse),
            opt(&self.test_rmse),
            self.d,
            self.k,
            opt(&self.wall_ms)
        )
    }
}

/// Writes the header on creation and flushes after every row.
pub struct MetricsWriter<W: Write> {
    out: W,
    timing: bool,
}

impl<W: Write> MetricsWriter<W> {
    /// With `timing` off the wall_ms column stays empty, making files from
    /// identical runs byte-identical.
    pub fn new(mut out: W, timing: bool) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { out, timing })
    }

    /// Continues an existing metrics file: no header is written.
    pub fn append(out: W, timing: bool) -> Self {
        MetricsWriter { out, timing }
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if self.timing {
            writeln!(self.out, "{}", row.to_csv())?;
        } else {
            let row = MetricsRow { wall_ms: None, ..row.clone() };
            writeln!(self.out, "{}", row.to_csv())?;
        }
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
