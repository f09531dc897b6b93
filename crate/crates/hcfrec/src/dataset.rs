//! Prepared dataset directories: the output of the preprocessing pipeline
//! and the input of training and evaluation.
//!
//! Layout: `meta` (flat key=value: counts and split settings) plus
//! `train.csv`, `val.csv`, `test.csv`, each `user_index,item_index,rating`
//! with a header row. Ratings stay on the raw 1..=5 scale.

use std::fmt;
use std::fs;
use std::path::Path;

use hcfrec_core::ingest::{
    chrono_split, dedupe_keep_last, filter_min_ratings, parse_ratings, RatingsFormat,
    SplitDataset,
};

use crate::config::parse_config;

pub const SPLIT_RATIOS: (u32, u32, u32) = (5, 2, 3);

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    /// Malformed raw ratings input.
    Parse(String),
    /// Preprocessing left nothing to split (or too little).
    Empty(String),
    /// A prepared directory whose files do not fit together.
    Invalid(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "{e}"),
            DataError::Parse(msg) => write!(f, "{msg}"),
            DataError::Empty(msg) => write!(f, "{msg}"),
            DataError::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// Table-style summary of a prepared dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrepareStats {
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    pub sparsity_pct: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Full preprocessing pipeline: parse, keep the last rating per pair, filter
/// low-activity users/items to a fixed point, split 5:2:3 chronologically,
/// and write the prepared directory.
pub fn prepare(
    input: &Path,
    format: RatingsFormat,
    min_ratings: usize,
    out: &Path,
) -> Result<PrepareStats, DataError> {
    let raw = fs::read_to_string(input)
        .map_err(|e| DataError::Parse(format!("cannot read {}: {e}", input.display())))?;
    let parsed = parse_ratings(&raw, format).map_err(|e| DataError::Parse(e.to_string()))?;
    let deduped = dedupe_keep_last(parsed);
    let filtered = filter_min_ratings(deduped, min_ratings);
    if filtered.is_empty() {
        return Err(DataError::Empty(format!(
            "no interactions survive the min-ratings filter ({min_ratings})"
        )));
    }
    let splits =
        chrono_split(filtered, SPLIT_RATIOS).map_err(|e| DataError::Empty(e.to_string()))?;
    let ds = SplitDataset::from_splits(&splits).map_err(|e| DataError::Invalid(e.to_string()))?;
    write_prepared(out, &ds, min_ratings)?;
    Ok(stats_of(&ds))
}

pub fn stats_of(ds: &SplitDataset) -> PrepareStats {
    let ratings = ds.train.nnz() + ds.val.nnz() + ds.test.nnz();
    let cells = ds.n_users() * ds.n_items();
    let sparsity_pct = if cells == 0 {
        0.0
    } else {
        100.0 * (1.0 - ratings as f64 / cells as f64)
    };
    PrepareStats {
        users: ds.n_users(),
        items: ds.n_items(),
        ratings,
        sparsity_pct,
        train: ds.train.nnz(),
        val: ds.val.nnz(),
        test: ds.test.nnz(),
    }
}

fn entries_csv(m: &hcfrec_core::ingest::RatingMatrix) -> String {
    let mut out = String::from("user_index,item_index,rating\n");
    for u in 0..m.n_users() as u32 {
        for &(i, r) in m.row(u) {
            out.push_str(&format!("{u},{i},{r}\n"));
        }
    }
    out
}

pub fn write_prepared(out: &Path, ds: &SplitDataset, min_ratings: usize) -> Result<(), DataError> {
    fs::create_dir_all(out)?;
    let meta = format!(
        "n_users = {}\nn_items = {}\nn_train = {}\nn_val = {}\nn_test = {}\nratios = {}:{}:{}\nmin_ratings = {}\n",
        ds.n_users(),
        ds.n_items(),
        ds.train.nnz(),
        ds.val.nnz(),
        ds.test.nnz(),
        SPLIT_RATIOS.0,
        SPLIT_RATIOS.1,
        SPLIT_RATIOS.2,
        min_ratings
    );
    fs::write(out.join("meta"), meta)?;
    fs::write(out.join("train.csv"), entries_csv(&ds.train))?;
    fs::write(out.join("val.csv"), entries_csv(&ds.val))?;
    fs::write(out.join("test.csv"), entries_csv(&ds.test))?;
    Ok(())
}

fn read_entries(path: &Path, n_users: usize, n_items: usize) -> Result<Vec<(u32, u32, f64)>, DataError> {
    let text = fs::read_to_string(path)
        .map_err(|e| DataError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "user_index,item_index,rating")) => {}
        other => {
            return Err(DataError::Invalid(format!(
                "{}: expected the entry header, got {:?}",
                path.display(),
                other.map(|(_, l)| l)
            )))
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = || DataError::Invalid(format!("{} line {}: bad entry row", path.display(), idx + 1));
        let mut fields = line.split(',');
        let u: u32 = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let i: u32 = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let r: f64 = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if fields.next().is_some() {
            return Err(bad());
        }
        if u as usize >= n_users || i as usize >= n_items {
            return Err(DataError::Invalid(format!(
                "{} line {}: index ({u}, {i}) outside ({n_users}, {n_items})",
                path.display(),
                idx + 1
            )));
        }
        out.push((u, i, r));
    }
    Ok(out)
}

/// Loads a directory written by [`write_prepared`].
pub fn load_prepared(dir: &Path) -> Result<SplitDataset, DataError> {
    let meta_path = dir.join("meta");
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|e| DataError::Invalid(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta = parse_config(&meta_text).map_err(|e| DataError::Invalid(e.to_string()))?;
    let get_count = |key: &str| -> Result<usize, DataError> {
        meta.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DataError::Invalid(format!("meta: missing or bad `{key}`")))
    };
    let n_users = get_count("n_users")?;
    let n_items = get_count("n_items")?;
    let train = read_entries(&dir.join("train.csv"), n_users, n_items)?;
    let val = read_entries(&dir.join("val.csv"), n_users, n_items)?;
    let test = read_entries(&dir.join("test.csv"), n_users, n_items)?;
    SplitDataset::from_indexed(n_users, n_items, &train, &val, &test)
        .map_err(|e| DataError::Invalid(e.to_string()))
}
