//! Rating-log ingestion, binarization into an implicit-feedback matrix,
//! leave-one-out splitting and negative sampling.

mod load;
mod matrix;
mod partition;
mod sampling;
mod split;

pub use load::{k_core_filter, load_ratings, parse_ratings, RatingFormat};
pub use matrix::{binarize, InteractionMatrix};
pub use partition::popularity_partition;
pub use sampling::{sample_training_instances, TrainingInstances};
pub use split::{drop_ineligible_users, leave_one_out_split, SplitDataset};

use std::collections::HashMap;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset is empty")]
    Empty,
    #[error("split error for user {user}: {msg}")]
    Split { user: String, msg: String },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("split manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Invalid(String),
}

/// One explicit rating event.
#[derive(Clone, Debug, PartialEq)]
pub struct Rating {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// Deduplicated rating log; at most one record per (user, item) pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawRatings {
    records: Vec<Rating>,
}

impl RawRatings {
    /// Collapses duplicate pairs onto the latest-timestamp record (a later
    /// line wins a timestamp tie). A pair keeps the position of its first
    /// occurrence.
    pub fn from_records(records: Vec<Rating>) -> Result<Self, DatasetError> {
        let mut slot: HashMap<(String, String), usize> = HashMap::with_capacity(records.len());
        // A replaced duplicate leaves a hole so the survivor sits at its own line position.
        let mut out: Vec<Option<Rating>> = Vec::with_capacity(records.len());
        for r in records {
            if r.timestamp < 0 {
                return Err(DatasetError::Invalid(format!(
                    "negative timestamp {} for user {} item {}",
                    r.timestamp, r.user, r.item
                )));
            }
            if !(r.rating >= 0.0) {
                return Err(DatasetError::Invalid(format!(
                    "rating {} for user {} item {} is not a non-negative number",
                    r.rating, r.user, r.item
                )));
            }
            let key = (r.user.clone(), r.item.clone());
            if let Some(&pos) = slot.get(&key) {
                let kept = out[pos].as_ref().map_or(i64::MIN, |k| k.timestamp);
                if r.timestamp < kept {
                    continue;
                }
                out[pos] = None;
            }
            slot.insert(key, out.len());
            out.push(Some(r));
        }
        Ok(Self {
            records: out.into_iter().flatten().collect(),
        })
    }

    pub fn records(&self) -> &[Rating] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_users(&self) -> usize {
        let mut users: Vec<&str> = self.records.iter().map(|r| r.user.as_str()).collect();
        users.sort_unstable();
        users.dedup();
        users.len()
    }

    pub fn num_items(&self) -> usize {
        let mut items: Vec<&str> = self.records.iter().map(|r| r.item.as_str()).collect();
        items.sort_unstable();
        items.dedup();
        items.len()
    }

    /// Keeps records whose user and item both satisfy the predicate.
    pub fn retain(&self, mut keep: impl FnMut(&Rating) -> bool) -> Self {
        Self {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// Records whose (user, item) pair is an interaction of `m`.
    pub fn restrict_to(&self, m: &InteractionMatrix) -> Self {
        self.retain(|r| match (m.user_id(&r.user), m.item_id(&r.item)) {
            (Some(u), Some(i)) => m.contains(u, i),
            _ => false,
        })
    }
}
