//! Coordinate-list rating matrix over dense user/item index spaces.

use std::collections::HashMap;

use crate::error::{HemfError, Result};
use crate::model::Side;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

impl Rating {
    pub fn new(user: usize, item: usize, value: f64) -> Self {
        Rating { user, item, value }
    }
}

/// Observed entries Ω with per-user and per-item adjacency.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRatings {
    n_users: usize,
    n_items: usize,
    entries: Vec<Rating>,
    by_user: Vec<Vec<usize>>,
    by_item: Vec<Vec<usize>>,
    index: HashMap<(usize, usize), usize>,
}

impl SparseRatings {
    pub fn empty(n_users: usize, n_items: usize) -> Self {
        SparseRatings {
            n_users,
            n_items,
            entries: Vec::new(),
            by_user: vec![Vec::new(); n_users],
            by_item: vec![Vec::new(); n_items],
            index: HashMap::new(),
        }
    }

    /// Builds a snapshot, rejecting duplicate pairs, out-of-range indices and
    /// non-finite values.
    pub fn new(n_users: usize, n_items: usize, entries: Vec<Rating>) -> Result<Self> {
        let mut out = Self::empty(n_users, n_items);
        for (k, e) in entries.into_iter().enumerate() {
            if e.user >= n_users {
                return Err(HemfError::IndexOutOfRange { what: "user", index: e.user, len: n_users });
            }
            if e.item >= n_items {
                return Err(HemfError::IndexOutOfRange { what: "item", index: e.item, len: n_items });
            }
            if !e.value.is_finite() {
                return Err(HemfError::Domain(format!("entry {k} has non-finite rating")));
            }
            if out.index.contains_key(&(e.user, e.item)) {
                return Err(HemfError::Domain(format!(
                    "duplicate pair (user {}, item {})",
                    e.user, e.item
                )));
            }
            out.push_unchecked(e);
        }
        Ok(out)
    }

    /// Sizes the index spaces to the largest indices present.
    pub fn from_entries(entries: Vec<Rating>) -> Result<Self> {
        let n_users = entries.iter().map(|e| e.user + 1).max().unwrap_or(0);
        let n_items = entries.iter().map(|e| e.item + 1).max().unwrap_or(0);
        Self::new(n_users, n_items, entries)
    }

    fn push_unchecked(&mut self, e: Rating) {
        let k = self.entries.len();
        self.by_user[e.user].push(k);
        self.by_item[e.item].push(k);
        self.index.insert((e.user, e.item), k);
        self.entries.push(e);
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_entities(&self, side: Side) -> usize {
        match side {
            Side::User => self.n_users,
            Side::Item => self.n_items,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Rating] {
        &self.entries
    }

    pub fn get(&self, user: usize, item: usize) -> Option<f64> {
        self.index.get(&(user, item)).map(|&k| self.entries[k].value)
    }

    /// `(other-side index, rating)` pairs of one entity.
    pub fn neighbors(&self, side: Side, entity: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (list, pick): (&[usize], fn(&Rating) -> usize) = match side {
            Side::User => (
                self.by_user.get(entity).map_or(&[][..], |v| v.as_slice()),
                |e| e.item,
            ),
            Side::Item => (
                self.by_item.get(entity).map_or(&[][..], |v| v.as_slice()),
                |e| e.user,
            ),
        };
        list.iter().map(move |&k| {
            let e = &self.entries[k];
            (pick(e), e.value)
        })
    }

    pub fn degree(&self, side: Side, entity: usize) -> usize {
        match side {
            Side::User => self.by_user.get(entity).map_or(0, Vec::len),
            Side::Item => self.by_item.get(entity).map_or(0, Vec::len),
        }
    }

    /// Grows the index spaces; never shrinks.
    pub fn grow(&mut self, n_users: usize, n_items: usize) {
        if n_users > self.n_users {
            self.by_user.resize(n_users, Vec::new());
            self.n_users = n_users;
        }
        if n_items > self.n_items {
            self.by_item.resize(n_items, Vec::new());
            self.n_items = n_items;
        }
    }

    /// Inserts or overwrites one entry, growing index spaces as needed.
    /// Returns the previous rating when the pair was already observed.
    pub fn upsert(&mut self, user: usize, item: usize, value: f64) -> Option<f64> {
        if let Some(&k) = self.index.get(&(user, item)) {
            let old = self.entries[k].value;
            self.entries[k].value = value;
            return Some(old);
        }
        self.grow(user + 1, item + 1);
        self.push_unchecked(Rating::new(user, item, value));
        None
    }

    /// Same entries with user and item roles swapped.
    pub fn transposed(&self) -> SparseRatings {
        let entries = self
            .entries
            .iter()
            .map(|e| Rating::new(e.item, e.user, e.value))
            .collect();
        SparseRatings::new(self.n_items, self.n_users, entries).expect("transpose preserves validity")
    }

    /// Subset by entry positions, keeping the index spaces.
    pub fn select(&self, positions: &[usize]) -> SparseRatings {
        let mut out = Self::empty(self.n_users, self.n_items);
        for &k in positions {
            out.push_unchecked(self.entries[k]);
        }
        out
    }
}
