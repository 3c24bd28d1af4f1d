//! Rating file grammars.
//!
//! - `csv`: `user,item,rating[,timestamp]` (tab-separated when a line has no comma)
//! - `double_colon`: `user::item::rating::timestamp`
//! - `per_item_files`: blocks starting with `item_id:` followed by `user,rating,date`
//!   lines; the path may be one such file or a directory of them
//!
//! Blank lines and lines starting with `#` are skipped, as is a first line whose
//! rating field is a word (a header). Ids are remapped to dense indices in order
//! of first appearance. A repeated pair keeps the rating with the later
//! timestamp, or the later line when timestamps tie or are missing.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{HemfError, Result};
use crate::ratings::{Rating, SparseRatings};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingFormat {
    Csv,
    DoubleColon,
    PerItemFiles,
}

impl FromStr for RatingFormat {
    type Err = HemfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(RatingFormat::Csv),
            "double_colon" | "double-colon" => Ok(RatingFormat::DoubleColon),
            "per_item_files" | "per-item-files" => Ok(RatingFormat::PerItemFiles),
            other => Err(HemfError::InvalidConfig(format!(
                "unknown rating format {other:?} (csv, double_colon, per_item_files)"
            ))),
        }
    }
}

/// External id to dense index, in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut map = IdMap::new();
        for id in ids {
            if map.index.contains_key(&id) {
                return Err(HemfError::Domain(format!("duplicate id {id:?}")));
            }
            map.intern(&id);
        }
        Ok(map)
    }

    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&k) = self.index.get(id) {
            return k;
        }
        let k = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), k);
        k
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, k: usize) -> Option<&str> {
        self.ids.get(k).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Parsed ratings with the id maps that produced their indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ratings: SparseRatings,
    pub users: IdMap,
    pub items: IdMap,
}

struct Parsed {
    user: String,
    item: String,
    value: f64,
    timestamp: Option<i64>,
    line: usize,
}

fn parse_value(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| HemfError::Parse { line, msg: format!("rating {field:?} is not a number") })?;
    if !v.is_finite() {
        return Err(HemfError::Parse { line, msg: format!("rating {field:?} is not finite") });
    }
    Ok(v)
}

fn parse_timestamp(field: &str, line: usize) -> Result<i64> {
    let f = field.trim();
    if let Ok(t) = f.parse::<i64>() {
        return Ok(t);
    }
    // YYYY-MM-DD
    let parts: Vec<&str> = f.split('-').collect();
    if parts.len() == 3 && parts.iter().all(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit())) {
        let y: i64 = parts[0].parse().unwrap_or(0);
        let m: i64 = parts[1].parse().unwrap_or(0);
        let d: i64 = parts[2].parse().unwrap_or(0);
        return Ok(y * 10_000 + m * 100 + d);
    }
    Err(HemfError::Parse { line, msg: format!("timestamp {field:?} is neither an integer nor YYYY-MM-DD") })
}

fn non_empty(field: &str, what: &str, line: usize) -> Result<String> {
    let f = field.trim();
    if f.is_empty() {
        return Err(HemfError::Parse { line, msg: format!("empty {what} id") });
    }
    Ok(f.to_owned())
}

fn looks_like_header(rating_field: &str) -> bool {
    let f = rating_field.trim();
    !f.is_empty() && f.chars().all(|c| c.is_ascii_alphabetic() || c == '_')
}

fn is_skipped(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

fn parse_flat(text: &str, format: RatingFormat, out: &mut Vec<Parsed>) -> Result<()> {
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if is_skipped(raw) {
            continue;
        }
        let fields: Vec<&str> = match format {
            RatingFormat::Csv if raw.contains(',') => raw.split(',').collect(),
            RatingFormat::Csv => raw.split('\t').collect(),
            _ => raw.split("::").collect(),
        };
        let expected = match format {
            RatingFormat::Csv => 3..=4,
            _ => 4..=4,
        };
        if fields.len() >= 3 && line == 1 && looks_like_header(fields[2]) {
            continue;
        }
        if !expected.contains(&fields.len()) {
            return Err(HemfError::Parse {
                line,
                msg: format!("expected {} fields, found {}", expected_desc(format), fields.len()),
            });
        }
        out.push(Parsed {
            user: non_empty(fields[0], "user", line)?,
            item: non_empty(fields[1], "item", line)?,
            value: parse_value(fields[2], line)?,
            timestamp: fields.get(3).map(|f| parse_timestamp(f, line)).transpose()?,
            line,
        });
    }
    Ok(())
}

fn expected_desc(format: RatingFormat) -> &'static str {
    match format {
        RatingFormat::Csv => "3 or 4",
        RatingFormat::DoubleColon => "4",
        RatingFormat::PerItemFiles => "3",
    }
}

/// Line numbers restart per file; the caller adds file context to errors.
fn parse_per_item(text: &str, out: &mut Vec<Parsed>) -> Result<()> {
    let mut item: Option<String> = None;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if is_skipped(raw) {
            continue;
        }
        let t = raw.trim();
        if let Some(id) = t.strip_suffix(':') {
            item = Some(non_empty(id, "item", line)?);
            continue;
        }
        let Some(current) = &item else {
            return Err(HemfError::Parse { line, msg: "rating line before any `item_id:` header".into() });
        };
        let fields: Vec<&str> = t.split(',').collect();
        if fields.len() != 3 {
            return Err(HemfError::Parse { line, msg: format!("expected 3 fields, found {}", fields.len()) });
        }
        out.push(Parsed {
            user: non_empty(fields[0], "user", line)?,
            item: current.clone(),
            value: parse_value(fields[1], line)?,
            timestamp: Some(parse_timestamp(fields[2], line)?),
            line,
        });
    }
    Ok(())
}

fn assemble(parsed: Vec<Parsed>, mut users: IdMap, mut items: IdMap) -> Result<Dataset> {
    if parsed.is_empty() {
        return Err(HemfError::Empty("no ratings found".into()));
    }
    let mut kept: HashMap<(usize, usize), usize> = HashMap::new();
    let mut slots: Vec<(Rating, Option<i64>)> = Vec::new();
    for p in parsed {
        let u = users.intern(&p.user);
        let i = items.intern(&p.item);
        let rating = Rating::new(u, i, p.value);
        match kept.get(&(u, i)) {
            Some(&k) => {
                let (_, old_ts) = slots[k];
                let replace = match (old_ts, p.timestamp) {
                    (Some(a), Some(b)) => b >= a,
                    _ => true,
                };
                if replace {
                    slots[k] = (rating, p.timestamp);
                }
                log::debug!("line {}: duplicate pair ({}, {})", p.line, p.user, p.item);
            }
            None => {
                kept.insert((u, i), slots.len());
                slots.push((rating, p.timestamp));
            }
        }
    }
    let entries = slots.into_iter().map(|(r, _)| r).collect();
    let ratings = SparseRatings::new(users.len(), items.len(), entries)?;
    Ok(Dataset { ratings, users, items })
}

pub fn parse_str(text: &str, format: RatingFormat) -> Result<Dataset> {
    parse_str_with(text, format, IdMap::new(), IdMap::new())
}

fn parse_str_with(text: &str, format: RatingFormat, users: IdMap, items: IdMap) -> Result<Dataset> {
    let mut parsed = Vec::new();
    match format {
        RatingFormat::PerItemFiles => parse_per_item(text, &mut parsed)?,
        _ => parse_flat(text, format, &mut parsed)?,
    }
    assemble(parsed, users, items)
}

pub fn parse_ratings(path: &Path, format: RatingFormat) -> Result<Dataset> {
    parse_ratings_with(path, format, IdMap::new(), IdMap::new())
}

/// Parses with pre-existing id maps (e.g. a test file against the training ids);
/// unseen ids are appended.
pub fn parse_ratings_with(path: &Path, format: RatingFormat, users: IdMap, items: IdMap) -> Result<Dataset> {
    let with_path = |e: HemfError| e.context(path.display().to_string());
    if format == RatingFormat::PerItemFiles && path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| with_path(e.into()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut parsed = Vec::new();
        for f in &files {
            let text = fs::read_to_string(f).map_err(|e| HemfError::from(e).context(f.display().to_string()))?;
            parse_per_item(&text, &mut parsed).map_err(|e| e.context(f.display().to_string()))?;
        }
        return assemble(parsed, users, items).map_err(with_path);
    }
    let text = fs::read_to_string(path).map_err(|e| with_path(e.into()))?;
    parse_str_with(&text, format, users, items).map_err(with_path)
}

/// Writes `user,item,rating` lines with external ids, readable back as csv.
pub fn write_ratings<W: Write>(ratings: &SparseRatings, users: &IdMap, items: &IdMap, mut out: W) -> Result<()> {
    for e in ratings.entries() {
        let user = users.id(e.user).ok_or(HemfError::IndexOutOfRange { what: "user", index: e.user, len: users.len() })?;
        let item = items.id(e.item).ok_or(HemfError::IndexOutOfRange { what: "item", index: e.item, len: items.len() })?;
        writeln!(out, "{user},{item},{}", e.value)?;
    }
    out.flush()?;
    Ok(())
}
