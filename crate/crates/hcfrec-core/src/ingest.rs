//! Ratings ingestion: parsing, dedup, activity filtering, chronological
//! splitting, and sparse matrix assembly.
//!
//! The pipeline is `parse_ratings -> dedupe_keep_last -> filter_min_ratings ->
//! chrono_split -> SplitDataset::from_splits`. Every stage is deterministic:
//! identical input bytes produce identical splits, index assignments, and
//! matrices.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

/// One (user, item, rating, timestamp) record.
#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    /// Raw 1..=5 rating; scaling to [0,1] happens at the encoder input.
    pub rating: f64,
    /// Unix seconds, non-negative.
    pub timestamp: i64,
}

/// Input record layout: four fields per line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatingsFormat {
    /// Tab-separated `user<TAB>item<TAB>rating<TAB>timestamp` (MovieLens).
    Tsv4,
    /// Comma-separated `user,item,rating,timestamp` (Amazon ratings dumps).
    Csv4,
}

impl RatingsFormat {
    fn delimiter(self) -> char {
        match self {
            RatingsFormat::Tsv4 => '\t',
            RatingsFormat::Csv4 => ',',
        }
    }
}

impl core::str::FromStr for RatingsFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsv4" => Ok(RatingsFormat::Tsv4),
            "csv4" => Ok(RatingsFormat::Csv4),
            other => Err(alloc::format!("unknown ratings format `{other}` (expected tsv4 or csv4)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParseError {
    /// Wrong field count, empty key, or an unparsable/invalid number.
    Malformed { line: usize, reason: String },
    /// Rating parsed but lies outside [1, 5].
    RatingOutOfRange { line: usize, value: f64 },
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseError::Malformed { line, reason } => write!(f, "line {line}: {reason}"),
            ParseError::RatingOutOfRange { line, value } => {
                write!(f, "line {line}: rating {value} outside [1, 5]")
            }
        }
    }
}

/// Parses a whole ratings file. Empty lines are skipped; reported line numbers
/// are 1-based over the raw input.
pub fn parse_ratings(input: &str, format: RatingsFormat) -> Result<Vec<Interaction>, ParseError> {
    let delim = format.delimiter();
    let mut out = Vec::new();
    for (idx, raw) in input.split('\n').enumerate() {
        let line = idx + 1;
        let text = raw.strip_suffix('\r').unwrap_or(raw);
        if text.is_empty() {
            continue;
        }
        let mut fields = text.split(delim);
        let (user, item, rating_s, ts_s) =
            match (fields.next(), fields.next(), fields.next(), fields.next(), fields.next()) {
                (Some(u), Some(i), Some(r), Some(t), None) => (u, i, r, t),
                _ => {
                    return Err(ParseError::Malformed {
                        line,
                        reason: "expected exactly 4 fields".to_string(),
                    })
                }
            };
        if user.is_empty() || item.is_empty() {
            return Err(ParseError::Malformed { line, reason: "empty user or item key".to_string() });
        }
        let rating: f64 = rating_s.parse().map_err(|_| ParseError::Malformed {
            line,
            reason: alloc::format!("unparsable rating `{rating_s}`"),
        })?;
        if !rating.is_finite() {
            return Err(ParseError::Malformed { line, reason: "non-finite rating".to_string() });
        }
        if !(1.0..=5.0).contains(&rating) {
            return Err(ParseError::RatingOutOfRange { line, value: rating });
        }
        let timestamp: i64 = ts_s.parse().map_err(|_| ParseError::Malformed {
            line,
            reason: alloc::format!("unparsable timestamp `{ts_s}`"),
        })?;
        if timestamp < 0 {
            return Err(ParseError::Malformed { line, reason: "negative timestamp".to_string() });
        }
        out.push(Interaction { user: user.to_string(), item: item.to_string(), rating, timestamp });
    }
    Ok(out)
}

/// Keeps, for every (user, item) pair, only the interaction with the greatest
/// timestamp; timestamp ties keep the latest input position. Survivors stay in
/// input order.
pub fn dedupe_keep_last(items: Vec<Interaction>) -> Vec<Interaction> {
    let mut winner: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for (pos, it) in items.iter().enumerate() {
        match winner.get_mut(&(it.user.as_str(), it.item.as_str())) {
            Some(best) => {
                // `pos` is always later than `*best`, so >= implements the tie rule.
                if it.timestamp >= items[*best].timestamp {
                    *best = pos;
                }
            }
            None => {
                winner.insert((it.user.as_str(), it.item.as_str()), pos);
            }
        }
    }
    let keep: BTreeSet<usize> = winner.into_values().collect();
    items
        .into_iter()
        .enumerate()
        .filter_map(|(pos, it)| keep.contains(&pos).then_some(it))
        .collect()
}

/// Iteratively removes users with fewer than `min_count` interactions, then
/// items with fewer than `min_count`, repeating until a pass removes nothing.
/// Relative order of the survivors is preserved.
pub fn filter_min_ratings(mut items: Vec<Interaction>, min_count: usize) -> Vec<Interaction> {
    assert!(min_count >= 1, "min_count must be at least 1");
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for it in &items {
                let key = if pass == 0 { it.user.as_str() } else { it.item.as_str() };
                *counts.entry(key).or_insert(0) += 1;
            }
            let low: BTreeSet<&str> =
                counts.iter().filter(|(_, &c)| c < min_count).map(|(&k, _)| k).collect();
            if low.is_empty() {
                continue;
            }
            changed = true;
            let low: BTreeSet<String> = low.into_iter().map(|s| s.to_string()).collect();
            items.retain(|it| {
                let key = if pass == 0 { it.user.as_str() } else { it.item.as_str() };
                !low.contains(key)
            });
        }
        if !changed {
            return items;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitError {
    /// Fewer than 3 interactions cannot populate three splits.
    TooFewInteractions { n: usize },
    ZeroRatioSum,
}

impl fmt::Display for SplitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitError::TooFewInteractions { n } => {
                write!(f, "cannot split {n} interactions into three parts")
            }
            SplitError::ZeroRatioSum => write!(f, "split ratios sum to zero"),
        }
    }
}

/// Chronologically ordered train/validation/test interaction lists.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitInteractions {
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

/// Sorts ascending by timestamp (ties keep input order) and cuts at the count
/// boundaries `floor(n * r_train / sum)` and `floor(n * (r_train + r_val) / sum)`.
pub fn chrono_split(
    mut items: Vec<Interaction>,
    ratios: (u32, u32, u32),
) -> Result<SplitInteractions, SplitError> {
    let n = items.len();
    if n < 3 {
        return Err(SplitError::TooFewInteractions { n });
    }
    let (r1, r2, r3) = ratios;
    let sum = r1 as u64 + r2 as u64 + r3 as u64;
    if sum == 0 {
        return Err(SplitError::ZeroRatioSum);
    }
    items.sort_by_key(|it| it.timestamp);
    let b1 = (n as u64 * r1 as u64 / sum) as usize;
    let b2 = (n as u64 * (r1 as u64 + r2 as u64) / sum) as usize;
    let test = items.split_off(b2);
    let val = items.split_off(b1);
    Ok(SplitInteractions { train: items, val, test })
}

/// String id <-> contiguous index dictionaries, assigned in first-appearance
/// order over the sequence they were built from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IndexMapping {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: BTreeMap<String, u32>,
    item_index: BTreeMap<String, u32>,
}

impl IndexMapping {
    fn from_interactions<'a>(items: impl Iterator<Item = &'a Interaction>) -> Self {
        let mut m = IndexMapping::default();
        for it in items {
            let next = m.user_ids.len() as u32;
            m.user_index.entry(it.user.clone()).or_insert_with(|| {
                m.user_ids.push(it.user.clone());
                next
            });
            let next = m.item_ids.len() as u32;
            m.item_index.entry(it.item.clone()).or_insert_with(|| {
                m.item_ids.push(it.item.clone());
                next
            });
        }
        m
    }

    /// Mapping for data that arrives already indexed (no original ids).
    pub fn anonymous(n_users: usize, n_items: usize) -> Self {
        let user_ids: Vec<String> = (0..n_users).map(|u| u.to_string()).collect();
        let item_ids: Vec<String> = (0..n_items).map(|i| i.to_string()).collect();
        let user_index = user_ids.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        let item_index = item_ids.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        IndexMapping { user_ids, item_ids, user_index, item_index }
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_index(&self, id: &str) -> Option<u32> {
        self.user_index.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<u32> {
        self.item_index.get(id).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MatrixError {
    Duplicate { user: u32, item: u32 },
    IndexOutOfBounds { user: u32, item: u32 },
}

impl fmt::Display for MatrixError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixError::Duplicate { user, item } => {
                write!(f, "duplicate entry for user {user}, item {item}")
            }
            MatrixError::IndexOutOfBounds { user, item } => {
                write!(f, "entry ({user}, {item}) outside matrix bounds")
            }
        }
    }
}

/// Sparse ratings matrix with both row (per-user) and column (per-item)
/// adjacency, entries sorted by the opposite index.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingMatrix {
    n_users: usize,
    n_items: usize,
    rows: Vec<Vec<(u32, f64)>>,
    cols: Vec<Vec<(u32, f64)>>,
    nnz: usize,
}

impl RatingMatrix {
    /// Builds from already-indexed entries. Bounds and duplicates are checked.
    pub fn from_indexed(
        n_users: usize,
        n_items: usize,
        entries: &[(u32, u32, f64)],
    ) -> Result<Self, MatrixError> {
        let mut rows: Vec<Vec<(u32, f64)>> = alloc::vec![Vec::new(); n_users];
        let mut cols: Vec<Vec<(u32, f64)>> = alloc::vec![Vec::new(); n_items];
        for &(u, i, r) in entries {
            if u as usize >= n_users || i as usize >= n_items {
                return Err(MatrixError::IndexOutOfBounds { user: u, item: i });
            }
            rows[u as usize].push((i, r));
            cols[i as usize].push((u, r));
        }
        for (u, row) in rows.iter_mut().enumerate() {
            row.sort_by_key(|&(i, _)| i);
            if row.windows(2).any(|w| w[0].0 == w[1].0) {
                let dup = row.windows(2).find(|w| w[0].0 == w[1].0).unwrap()[0].0;
                return Err(MatrixError::Duplicate { user: u as u32, item: dup });
            }
        }
        for col in cols.iter_mut() {
            col.sort_by_key(|&(u, _)| u);
        }
        Ok(RatingMatrix { n_users, n_items, rows, cols, nnz: entries.len() })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    /// (item, rating) entries of one user, sorted by item index.
    pub fn row(&self, user: u32) -> &[(u32, f64)] {
        &self.rows[user as usize]
    }

    /// (user, rating) entries of one item, sorted by user index.
    pub fn col(&self, item: u32) -> &[(u32, f64)] {
        &self.cols[item as usize]
    }

    pub fn has_entry(&self, user: u32, item: u32) -> bool {
        self.rows[user as usize].binary_search_by_key(&item, |&(i, _)| i).is_ok()
    }

    /// Fraction of absent cells, as a percentage.
    pub fn sparsity_pct(&self) -> f64 {
        let cells = self.n_users as f64 * self.n_items as f64;
        if cells == 0.0 {
            return 0.0;
        }
        (1.0 - self.nnz as f64 / cells) * 100.0
    }
}

/// Builds a matrix and its dictionaries from one interaction list, assigning
/// indices in first-appearance order.
pub fn build_matrix(items: &[Interaction]) -> Result<(IndexMapping, RatingMatrix), MatrixError> {
    let mapping = IndexMapping::from_interactions(items.iter());
    let entries: Vec<(u32, u32, f64)> = items
        .iter()
        .map(|it| {
            (mapping.user_index(&it.user).unwrap(), mapping.item_index(&it.item).unwrap(), it.rating)
        })
        .collect();
    let matrix = RatingMatrix::from_indexed(mapping.n_users(), mapping.n_items(), &entries)?;
    Ok((mapping, matrix))
}

/// Train/validation/test matrices over one shared index space.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub mapping: IndexMapping,
    pub train: RatingMatrix,
    pub val: RatingMatrix,
    pub test: RatingMatrix,
}

impl SplitDataset {
    /// Assigns indices by first appearance over the chronological order
    /// (train, then val, then test) and builds the three matrices with the
    /// full dimensions.
    pub fn from_splits(splits: &SplitInteractions) -> Result<Self, MatrixError> {
        let all = splits.train.iter().chain(&splits.val).chain(&splits.test);
        let mapping = IndexMapping::from_interactions(all);
        let (nu, ni) = (mapping.n_users(), mapping.n_items());
        let index = |list: &[Interaction]| -> Vec<(u32, u32, f64)> {
            list.iter()
                .map(|it| {
                    (
                        mapping.user_index(&it.user).unwrap(),
                        mapping.item_index(&it.item).unwrap(),
                        it.rating,
                    )
                })
                .collect()
        };
        let train = RatingMatrix::from_indexed(nu, ni, &index(&splits.train))?;
        let val = RatingMatrix::from_indexed(nu, ni, &index(&splits.val))?;
        let test = RatingMatrix::from_indexed(nu, ni, &index(&splits.test))?;
        Ok(SplitDataset { mapping, train, val, test })
    }

    /// Assembles from already-indexed entry lists (prepared datasets).
    pub fn from_indexed(
        n_users: usize,
        n_items: usize,
        train: &[(u32, u32, f64)],
        val: &[(u32, u32, f64)],
        test: &[(u32, u32, f64)],
    ) -> Result<Self, MatrixError> {
        Ok(SplitDataset {
            mapping: IndexMapping::anonymous(n_users, n_items),
            train: RatingMatrix::from_indexed(n_users, n_items, train)?,
            val: RatingMatrix::from_indexed(n_users, n_items, val)?,
            test: RatingMatrix::from_indexed(n_users, n_items, test)?,
        })
    }

    pub fn n_users(&self) -> usize {
        self.train.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items()
    }
}
