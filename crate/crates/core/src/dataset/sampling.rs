use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, SplitDataset};

/// Labelled `(user, item)` pairs for one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstances {
    pub users: Vec<u32>,
    pub items: Vec<u32>,
    pub labels: Vec<f32>,
    pub rho: usize,
}

impl TrainingInstances {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1.0).count()
    }
}

/// Every train positive once with label 1, each followed by `rho` negatives
/// drawn uniformly from the items the user has not interacted with in the
/// train matrix. Negatives of one positive are distinct whenever the user has
/// at least `rho` unobserved items; otherwise they repeat and a warning is
/// logged.
pub fn sample_training_instances(
    split: &SplitDataset,
    rho: usize,
    epoch_seed: u64,
) -> Result<TrainingInstances, DatasetError> {
    if rho == 0 {
        return Err(DatasetError::Sampling("negative sample ratio must be at least 1".into()));
    }
    let train = split.train();
    let n = train.num_items() as u32;
    let total = train.nnz() * (rho + 1);
    let mut out = TrainingInstances {
        users: Vec::with_capacity(total),
        items: Vec::with_capacity(total),
        labels: Vec::with_capacity(total),
        rho,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut group: Vec<u32> = Vec::with_capacity(rho);
    for u in 0..train.num_users() as u32 {
        let row = train.row(u);
        let unobserved = n as usize - row.len();
        if unobserved == 0 {
            return Err(DatasetError::Sampling(format!(
                "user {} has interacted with every item; no negatives to sample",
                train.user_token(u)
            )));
        }
        let distinct = unobserved >= rho;
        if !distinct {
            log::warn!(
                "user {} has {unobserved} unobserved items < rho = {rho}; sampling with replacement",
                train.user_token(u)
            );
        }
        for &i in row {
            out.users.push(u);
            out.items.push(i);
            out.labels.push(1.0);
            group.clear();
            while group.len() < rho {
                let j = rng.random_range(0..n);
                if row.binary_search(&j).is_ok() || (distinct && group.contains(&j)) {
                    continue;
                }
                group.push(j);
            }
            for &j in &group {
                out.users.push(u);
                out.items.push(j);
                out.labels.push(0.0);
            }
        }
    }
    Ok(out)
}
