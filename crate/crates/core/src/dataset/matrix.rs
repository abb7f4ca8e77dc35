use std::collections::HashMap;

use super::{DatasetError, RawRatings};

/// Binary user-item matrix `Y` with compressed row and column access.
///
/// Rows are users, columns are items; every stored entry is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    user_tokens: Vec<String>,
    item_tokens: Vec<String>,
    user_index: HashMap<String, u32>,
    item_index: HashMap<String, u32>,
    row_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    col_ptr: Vec<usize>,
    col_idx: Vec<u32>,
}

fn compress(len: usize, pairs: impl Iterator<Item = (u32, u32)> + Clone) -> (Vec<usize>, Vec<u32>) {
    let mut counts = vec![0usize; len + 1];
    for (a, _) in pairs.clone() {
        counts[a as usize + 1] += 1;
    }
    for k in 1..=len {
        counts[k] += counts[k - 1];
    }
    let mut fill = counts.clone();
    let mut idx = vec![0u32; counts[len]];
    for (a, b) in pairs {
        idx[fill[a as usize]] = b;
        fill[a as usize] += 1;
    }
    for k in 0..len {
        idx[counts[k]..counts[k + 1]].sort_unstable();
    }
    (counts, idx)
}

impl InteractionMatrix {
    /// Builds a matrix from dense `(user, item)` pairs. Duplicate pairs are
    /// rejected, as are users without interactions.
    pub fn from_pairs(
        user_tokens: Vec<String>,
        item_tokens: Vec<String>,
        pairs: &[(u32, u32)],
    ) -> Result<Self, DatasetError> {
        let (m, n) = (user_tokens.len(), item_tokens.len());
        if m == 0 || n == 0 || pairs.is_empty() {
            return Err(DatasetError::Empty);
        }
        if let Some(&(u, i)) = pairs.iter().find(|&&(u, i)| u as usize >= m || i as usize >= n) {
            return Err(DatasetError::Invalid(format!("pair ({u}, {i}) outside {m} x {n}")));
        }
        let (row_ptr, row_idx) = compress(m, pairs.iter().copied());
        for u in 0..m {
            let row = &row_idx[row_ptr[u]..row_ptr[u + 1]];
            if row.is_empty() {
                return Err(DatasetError::Invalid(format!(
                    "user {} has no interactions",
                    user_tokens[u]
                )));
            }
            if row.windows(2).any(|w| w[0] == w[1]) {
                return Err(DatasetError::Invalid(format!(
                    "duplicate interaction for user {}",
                    user_tokens[u]
                )));
            }
        }
        let (col_ptr, col_idx) = compress(n, pairs.iter().map(|&(u, i)| (i, u)));
        let user_index = user_tokens
            .iter()
            .enumerate()
            .map(|(k, t)| (t.clone(), k as u32))
            .collect();
        let item_index = item_tokens
            .iter()
            .enumerate()
            .map(|(k, t)| (t.clone(), k as u32))
            .collect();
        Ok(Self {
            user_tokens,
            item_tokens,
            user_index,
            item_index,
            row_ptr,
            row_idx,
            col_ptr,
            col_idx,
        })
    }

    /// Number of users (M).
    pub fn num_users(&self) -> usize {
        self.user_tokens.len()
    }

    /// Number of items (N).
    pub fn num_items(&self) -> usize {
        self.item_tokens.len()
    }

    /// Number of observed interactions, `|Y+|`.
    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// `1 - |Y+| / (M N)`.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.nnz() as f64 / (self.num_users() as f64 * self.num_items() as f64)
    }

    /// Sorted item indices of user `u` (the ones of `Y_{u*}`).
    pub fn row(&self, u: u32) -> &[u32] {
        let u = u as usize;
        &self.row_idx[self.row_ptr[u]..self.row_ptr[u + 1]]
    }

    /// Sorted user indices of item `i` (the ones of `Y_{*i}`).
    pub fn col(&self, i: u32) -> &[u32] {
        let i = i as usize;
        &self.col_idx[self.col_ptr[i]..self.col_ptr[i + 1]]
    }

    pub fn contains(&self, u: u32, i: u32) -> bool {
        self.row(u).binary_search(&i).is_ok()
    }

    pub fn item_count(&self, i: u32) -> usize {
        self.col(i).len()
    }

    pub fn user_token(&self, u: u32) -> &str {
        &self.user_tokens[u as usize]
    }

    pub fn item_token(&self, i: u32) -> &str {
        &self.item_tokens[i as usize]
    }

    pub fn user_tokens(&self) -> &[String] {
        &self.user_tokens
    }

    pub fn item_tokens(&self) -> &[String] {
        &self.item_tokens
    }

    pub fn user_id(&self, token: &str) -> Option<u32> {
        self.user_index.get(token).copied()
    }

    pub fn item_id(&self, token: &str) -> Option<u32> {
        self.item_index.get(token).copied()
    }

    /// All interactions as `(user, item)` in row-major order.
    pub fn pairs(&self) -> Vec<(u32, u32)> {
        (0..self.num_users() as u32)
            .flat_map(|u| self.row(u).iter().map(move |&i| (u, i)))
            .collect()
    }

    /// Dense 0/1 row of user `u`, length N.
    pub fn dense_row(&self, u: u32) -> Vec<f32> {
        let mut out = vec![0.0; self.num_items()];
        for &i in self.row(u) {
            out[i as usize] = 1.0;
        }
        out
    }

    /// Dense 0/1 column of item `i`, length M.
    pub fn dense_col(&self, i: u32) -> Vec<f32> {
        let mut out = vec![0.0; self.num_users()];
        for &u in self.col(i) {
            out[u as usize] = 1.0;
        }
        out
    }
}

/// `y_ui = 1` iff the pair occurs in the log. Users and items get dense
/// indices in order of first appearance.
pub fn binarize(raw: &RawRatings) -> Result<InteractionMatrix, DatasetError> {
    if raw.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut users: HashMap<&str, u32> = HashMap::new();
    let mut items: HashMap<&str, u32> = HashMap::new();
    let mut user_tokens = Vec::new();
    let mut item_tokens = Vec::new();
    let mut pairs = Vec::with_capacity(raw.len());
    for r in raw.records() {
        let u = *users.entry(r.user.as_str()).or_insert_with(|| {
            user_tokens.push(r.user.clone());
            user_tokens.len() as u32 - 1
        });
        let i = *items.entry(r.item.as_str()).or_insert_with(|| {
            item_tokens.push(r.item.clone());
            item_tokens.len() as u32 - 1
        });
        pairs.push((u, i));
    }
    InteractionMatrix::from_pairs(user_tokens, item_tokens, &pairs)
}
