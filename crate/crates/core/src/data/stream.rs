//! Chunked rating streams.
//!
//! Chunk files hold `user_id,item_id,rating[,prev_rating]` records; a blank line
//! ends a chunk. `prev_rating` marks a revision and must match the stored rating.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::parse::IdMap;
use crate::error::{HemfError, Result};
use crate::online::{ChunkEntry, EntryKind, RatingChunk};
use crate::ratings::SparseRatings;

/// Seeded permutation of `train` cut into consecutive chunks of `chunk_size`
/// (the last may be shorter). All entries are new.
pub fn chunk_stream(train: &SparseRatings, chunk_size: usize, seed: u64) -> Result<Vec<RatingChunk>> {
    if chunk_size == 0 {
        return Err(HemfError::InvalidConfig("chunk_size must be >= 1".into()));
    }
    let mut entries = train.entries().to_vec();
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(entries.chunks(chunk_size).map(|c| RatingChunk::fresh(c.iter().copied())).collect())
}

/// One chunk-file record before id resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEntry {
    pub user: String,
    pub item: String,
    pub value: f64,
    pub previous: Option<f64>,
    pub line: usize,
}

impl RawEntry {
    /// Interns the ids and labels the entry against what has been observed;
    /// without `prev_rating` an already observed pair becomes a revision.
    pub fn resolve(&self, users: &mut IdMap, items: &mut IdMap, observed: &SparseRatings) -> ChunkEntry {
        let user = users.intern(&self.user);
        let item = items.intern(&self.item);
        let kind = match (self.previous, observed.get(user, item)) {
            (Some(previous), _) | (None, Some(previous)) => EntryKind::Revision { previous },
            (None, None) => EntryKind::New,
        };
        ChunkEntry { user, item, value: self.value, kind }
    }
}

fn number(field: &str, what: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| HemfError::Parse { line, msg: format!("{what} {field:?} is not a number") })?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(HemfError::Parse { line, msg: format!("{what} {field:?} is not finite") })
    }
}

/// Splits a chunk file into chunks of raw records. Runs of blank lines count
/// as one separator; `#` lines are comments.
pub fn parse_chunk_stream(text: &str) -> Result<Vec<Vec<RawEntry>>> {
    let mut chunks = Vec::new();
    let mut current = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let t = raw.trim();
        if t.starts_with('#') {
            continue;
        }
        if t.is_empty() {
            if !current.is_empty() {
                chunks.push(std::mem::take(&mut current));
            }
            continue;
        }
        let fields: Vec<&str> = t.split(',').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(HemfError::Parse { line, msg: format!("expected 3 or 4 fields, found {}", fields.len()) });
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(HemfError::Parse { line, msg: "empty id".into() });
        }
        current.push(RawEntry {
            user: user.to_owned(),
            item: item.to_owned(),
            value: number(fields[2], "rating", line)?,
            previous: fields.get(3).map(|f| number(f, "previous rating", line)).transpose()?,
            line,
        });
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    Ok(chunks)
}

/// Writes chunks with external ids, one blank line after each chunk.
pub fn write_chunk_stream<W: Write>(chunks: &[RatingChunk], users: &IdMap, items: &IdMap, mut out: W) -> Result<()> {
    for chunk in chunks {
        for e in &chunk.entries {
            let user = users.id(e.user).ok_or(HemfError::IndexOutOfRange { what: "user", index: e.user, len: users.len() })?;
            let item = items.id(e.item).ok_or(HemfError::IndexOutOfRange { what: "item", index: e.item, len: items.len() })?;
            match e.kind {
                EntryKind::New => writeln!(out, "{user},{item},{}", e.value)?,
                EntryKind::Revision { previous } => writeln!(out, "{user},{item},{},{previous}", e.value)?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratings::Rating;

    fn entries(n: usize) -> SparseRatings {
        SparseRatings::from_entries((0..n).map(|k| Rating::new(k % 13, k / 13, k as f64)).collect()).unwrap()
    }

    #[test]
    fn chunk_lengths() {
        let r = entries(100);
        let chunks = chunk_stream(&r, 30, 1).unwrap();
        assert_eq!(chunks.iter().map(RatingChunk::len).collect::<Vec<_>>(), vec![30, 30, 30, 10]);
        assert_eq!(chunk_stream(&r, 500, 1).unwrap().len(), 1);
        assert!(chunk_stream(&r, 0, 1).is_err());
    }

    #[test]
    fn chunks_partition_the_permutation() {
        let r = entries(77);
        let chunks = chunk_stream(&r, 10, 4).unwrap();
        let mut values: Vec<f64> = chunks.iter().flat_map(|c| c.entries.iter().map(|e| e.value)).collect();
        assert!(chunks.iter().all(|c| c.entries.iter().all(|e| e.kind == EntryKind::New)));
        assert_ne!(values, (0..77).map(|k| k as f64).collect::<Vec<_>>());
        values.sort_by(f64::total_cmp);
        assert_eq!(values, (0..77).map(|k| k as f64).collect::<Vec<_>>());
        assert_eq!(chunk_stream(&r, 10, 4).unwrap(), chunks);
    }

    #[test]
    fn chunk_file_round_trip() {
        let text = "a,x,3\nb,y,4\n\n\na,x,5,3\n# note\nc,x,1\n";
        let raw = parse_chunk_stream(text).unwrap();
        assert_eq!(raw.len(), 2);
        assert_eq!(raw[1][0].previous, Some(3.0));

        let (mut users, mut items) = (IdMap::new(), IdMap::new());
        let mut observed = SparseRatings::empty(0, 0);
        let mut chunks = Vec::new();
        for c in &raw {
            let entries: Vec<_> = c.iter().map(|e| e.resolve(&mut users, &mut items, &observed)).collect();
            for e in &entries {
                observed.upsert(e.user, e.item, e.value);
            }
            chunks.push(RatingChunk { entries });
        }
        assert_eq!(chunks[1].entries[0].kind, EntryKind::Revision { previous: 3.0 });

        let mut buf = Vec::new();
        write_chunk_stream(&chunks, &users, &items, &mut buf).unwrap();
        let again = parse_chunk_stream(std::str::from_utf8(&buf).unwrap()).unwrap();
        let strip = |v: &Vec<Vec<RawEntry>>| {
            v.iter()
                .map(|c| c.iter().map(|e| (e.user.clone(), e.item.clone(), e.value, e.previous)).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&again), strip(&raw));
    }

    #[test]
    fn malformed_records() {
        let e = parse_chunk_stream("a,x,3\na,x\n").unwrap_err();
        assert!(matches!(e, HemfError::Parse { line: 2, .. }));
        let e = parse_chunk_stream("a,x,3,zz\n").unwrap_err();
        assert!(matches!(e, HemfError::Parse { line: 1, .. }));
    }
}
