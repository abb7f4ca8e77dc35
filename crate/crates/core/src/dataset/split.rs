use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{binarize, DatasetError, InteractionMatrix, RawRatings};

/// Leave-one-out split: train matrix, one held-out positive per user and a
/// fixed list of sampled test negatives per user.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    train: InteractionMatrix,
    test_items: Vec<u32>,
    test_negatives: Vec<Vec<u32>>,
    seed: u64,
    num_test_negatives: usize,
}

impl SplitDataset {
    pub fn train(&self) -> &InteractionMatrix {
        &self.train
    }

    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    pub fn test_positive(&self, u: u32) -> u32 {
        self.test_items[u as usize]
    }

    pub fn test_negatives(&self, u: u32) -> &[u32] {
        &self.test_negatives[u as usize]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_test_negatives(&self) -> usize {
        self.num_test_negatives
    }

    /// The held-out positive followed by the user's test negatives.
    pub fn candidates(&self, u: u32) -> Vec<u32> {
        let mut c = Vec::with_capacity(1 + self.num_test_negatives);
        c.push(self.test_positive(u));
        c.extend_from_slice(self.test_negatives(u));
        c
    }

    /// Train interactions plus the held-out positives.
    pub fn reassemble(&self) -> InteractionMatrix {
        let mut pairs = self.train.pairs();
        pairs.extend(self.test_items.iter().enumerate().map(|(u, &i)| (u as u32, i)));
        InteractionMatrix::from_pairs(
            self.train.user_tokens().to_vec(),
            self.train.item_tokens().to_vec(),
            &pairs,
        )
        .expect("train plus test positives is a valid matrix")
    }

    /// Writes the text manifest: a `M N seed num_test_negatives` header, then
    /// one `u test_item neg...` line per user.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {} {}",
            self.num_users(),
            self.num_items(),
            self.seed,
            self.num_test_negatives
        );
        for u in 0..self.num_users() {
            let _ = write!(out, "{} {}", u, self.test_items[u]);
            for &j in &self.test_negatives[u] {
                let _ = write!(out, " {j}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.manifest()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rebuilds a split from its manifest and the full interaction matrix it
    /// was drawn from.
    pub fn from_manifest(text: &str, full: &InteractionMatrix) -> Result<Self, DatasetError> {
        let bad = |msg: String| DatasetError::Manifest(msg);
        let mut lines = text.lines();
        let header: Vec<u64> = lines
            .next()
            .ok_or_else(|| bad("missing header".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad header token {t:?}"))))
            .collect::<Result<_, _>>()?;
        let [m, n, seed, k] = header[..] else {
            return Err(bad(format!("header needs 4 integers, found {}", header.len())));
        };
        let (m, n, k) = (m as usize, n as usize, k as usize);
        if m != full.num_users() || n != full.num_items() {
            return Err(bad(format!(
                "manifest is {m} x {n}, matrix is {} x {}",
                full.num_users(),
                full.num_items()
            )));
        }
        let mut test_items = vec![u32::MAX; m];
        let mut test_negatives = vec![Vec::new(); m];
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<u32> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(format!("line {}: bad token {t:?}", lineno + 2))))
                .collect::<Result<_, _>>()?;
            if vals.len() != k + 2 {
                return Err(bad(format!(
                    "line {}: expected {} integers, found {}",
                    lineno + 2,
                    k + 2,
                    vals.len()
                )));
            }
            let u = vals[0] as usize;
            if u >= m || test_items[u] != u32::MAX {
                return Err(bad(format!("line {}: bad or repeated user {u}", lineno + 2)));
            }
            if vals[1..].iter().any(|&i| i as usize >= n) {
                return Err(bad(format!("line {}: item index out of range", lineno + 2)));
            }
            test_items[u] = vals[1];
            test_negatives[u] = vals[2..].to_vec();
        }
        if let Some(u) = test_items.iter().position(|&t| t == u32::MAX) {
            return Err(bad(format!("no line for user {u}")));
        }
        for u in 0..m {
            let uu = u as u32;
            if !full.contains(uu, test_items[u]) {
                return Err(bad(format!("user {u}: test item is not an interaction")));
            }
            if test_negatives[u].iter().any(|&j| full.contains(uu, j)) {
                return Err(bad(format!("user {u}: a test negative is an interaction")));
            }
        }
        let train = remove_pairs(full, &test_items)?;
        Ok(Self {
            train,
            test_items,
            test_negatives,
            seed,
            num_test_negatives: k,
        })
    }
}

fn remove_pairs(full: &InteractionMatrix, test_items: &[u32]) -> Result<InteractionMatrix, DatasetError> {
    let pairs: Vec<(u32, u32)> = full
        .pairs()
        .into_iter()
        .filter(|&(u, i)| test_items[u as usize] != i)
        .collect();
    InteractionMatrix::from_pairs(full.user_tokens().to_vec(), full.item_tokens().to_vec(), &pairs)
}

/// Holds out each user's latest interaction and samples `num_test_negatives`
/// distinct unobserved items per user, all from one seeded stream.
///
/// Timestamp ties go to the record listed later in the log, then to the
/// larger item index.
pub fn leave_one_out_split(
    m: &InteractionMatrix,
    raw: &RawRatings,
    num_test_negatives: usize,
    seed: u64,
) -> Result<SplitDataset, DatasetError> {
    let users = m.num_users();
    let items = m.num_items();
    let mut latest: Vec<Option<(i64, usize, u32)>> = vec![None; users];
    for (line, r) in raw.records().iter().enumerate() {
        let (Some(u), Some(i)) = (m.user_id(&r.user), m.item_id(&r.item)) else {
            continue;
        };
        if !m.contains(u, i) {
            continue;
        }
        let slot = &mut latest[u as usize];
        if slot.is_none_or(|best| (r.timestamp, line, i) > best) {
            *slot = Some((r.timestamp, line, i));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_items = Vec::with_capacity(users);
    let mut test_negatives = Vec::with_capacity(users);
    for u in 0..users as u32 {
        let row = m.row(u);
        let err = |msg: String| DatasetError::Split {
            user: m.user_token(u).to_string(),
            msg,
        };
        if row.len() < 2 {
            return Err(err(format!(
                "needs at least 2 interactions, has {}; the train row would be empty",
                row.len()
            )));
        }
        let unobserved = items - row.len();
        if unobserved < num_test_negatives {
            return Err(err(format!(
                "only {unobserved} unobserved items, {num_test_negatives} test negatives requested"
            )));
        }
        let (_, _, test_item) =
            latest[u as usize].ok_or_else(|| err("no timestamped record for this user".into()))?;
        test_items.push(test_item);

        let pool = complement(row, items);
        let picks = rand::seq::index::sample(&mut rng, pool.len(), num_test_negatives);
        test_negatives.push(picks.iter().map(|k| pool[k]).collect());
    }
    let train = remove_pairs(m, &test_items)?;
    Ok(SplitDataset {
        train,
        test_items,
        test_negatives,
        seed,
        num_test_negatives,
    })
}

fn complement(sorted_row: &[u32], items: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(items - sorted_row.len());
    let mut it = sorted_row.iter().peekable();
    for j in 0..items as u32 {
        if it.peek() == Some(&&j) {
            it.next();
        } else {
            out.push(j);
        }
    }
    out
}

/// Drops users that cannot be split (fewer than 2 interactions or fewer than
/// `num_test_negatives` unobserved items), iterating because removals shrink
/// the item set. Returns the kept log and the number of dropped users.
pub fn drop_ineligible_users(raw: &RawRatings, num_test_negatives: usize) -> (RawRatings, usize) {
    let original_users = raw.num_users();
    let mut current = raw.clone();
    loop {
        if current.is_empty() {
            return (current, original_users);
        }
        let num_items = current.num_items();
        let mut per_user: HashMap<&str, usize> = HashMap::new();
        for r in current.records() {
            *per_user.entry(r.user.as_str()).or_default() += 1;
        }
        let keep = |c: usize| c >= 2 && num_items - c >= num_test_negatives;
        if per_user.values().all(|&c| keep(c)) {
            let kept = current.num_users();
            return (current, original_users - kept);
        }
        current = current.retain(|r| keep(per_user[r.user.as_str()]));
    }
}

impl SplitDataset {
    /// Convenience: binarize, then split.
    pub fn from_raw(raw: &RawRatings, num_test_negatives: usize, seed: u64) -> Result<Self, DatasetError> {
        let m = binarize(raw)?;
        leave_one_out_split(&m, raw, num_test_negatives, seed)
    }
}
