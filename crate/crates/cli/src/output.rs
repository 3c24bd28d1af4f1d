//! Output files and small input formats local to the CLI.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use hemf::data::{MetricsRow, MetricsWriter};
use hemf::HemfError;
use serde_json::Value;

/// `LO,HI` prediction clip range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRange(pub f64, pub f64);

impl FromStr for ClipRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
        let lo: f64 = lo.trim().parse().map_err(|_| format!("bad lower bound {lo:?}"))?;
        let hi: f64 = hi.trim().parse().map_err(|_| format!("bad upper bound {hi:?}"))?;
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(format!("empty range {lo},{hi}"));
        }
        Ok(ClipRange(lo, hi))
    }
}

pub fn clip(range: Option<ClipRange>) -> Option<(f64, f64)> {
    range.map(|ClipRange(lo, hi)| (lo, hi))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Metrics rows to a file, or nowhere when no path was given.
pub struct MetricsSink(Option<MetricsWriter<BufWriter<File>>>);

impl MetricsSink {
    /// With `append` set, rows are added to an existing non-empty file without
    /// a second header.
    pub fn open(path: Option<&Path>, timing: bool, append: bool) -> Result<Self> {
        let Some(path) = path else {
            return Ok(MetricsSink(None));
        };
        let continuing = append && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        let writer = if continuing {
            let f = OpenOptions::new()
                .append(true)
                .open(path)
                .with_context(|| format!("opening {}", path.display()))?;
            MetricsWriter::append(BufWriter::new(f), timing)
        } else {
            MetricsWriter::new(create(path)?, timing)?
        };
        Ok(MetricsSink(Some(writer)))
    }

    pub fn write(&mut self, row: MetricsRow) -> hemf::Result<()> {
        match &mut self.0 {
            Some(w) => w.write(&row),
            None => Ok(()),
        }
    }
}

/// Pretty JSON to `path`, or to stdout.
pub fn write_summary(path: Option<&Path>, summary: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = io::stdout().lock();
            writeln!(out, "{text}")?;
            Ok(())
        }
    }
}

/// `user,item` lines; further fields are ignored, `#` lines and blanks skipped.
pub fn parse_pairs(text: &str) -> hemf::Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        match (fields.next(), fields.next()) {
            (Some(u), Some(i)) if !u.is_empty() && !i.is_empty() => pairs.push((u.to_owned(), i.to_owned())),
            _ => return Err(HemfError::Parse { line: k + 1, msg: "expected user,item".into() }),
        }
    }
    if pairs.is_empty() {
        return Err(HemfError::Empty("no user,item pairs".into()));
    }
    Ok(pairs)
}
