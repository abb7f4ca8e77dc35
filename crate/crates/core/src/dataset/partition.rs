use std::collections::HashMap;

use super::{DatasetError, InteractionMatrix};

/// Splits the item set into `levels` contiguous popularity bands (ascending
/// interaction count, ties by item index) of near-equal size, the larger
/// bands being the most popular ones. Each band becomes a sub-matrix holding
/// every interaction with its items; users and items are reindexed densely in
/// their original relative order, and users left without interactions are
/// dropped.
pub fn popularity_partition(m: &InteractionMatrix, levels: usize) -> Result<Vec<InteractionMatrix>, DatasetError> {
    let n = m.num_items();
    if levels == 0 || n < levels {
        return Err(DatasetError::Invalid(format!(
            "cannot cut {n} items into {levels} popularity levels"
        )));
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by_key(|&i| (m.item_count(i), i));

    let base = n / levels;
    let extra = n % levels;
    let mut out = Vec::with_capacity(levels);
    let mut start = 0;
    for level in 0..levels {
        let size = base + usize::from(level >= levels - extra);
        let mut band = order[start..start + size].to_vec();
        start += size;
        band.sort_unstable();
        out.push(sub_matrix(m, &band)?);
    }
    Ok(out)
}

fn sub_matrix(m: &InteractionMatrix, items: &[u32]) -> Result<InteractionMatrix, DatasetError> {
    let item_pos: HashMap<u32, u32> = items.iter().enumerate().map(|(k, &i)| (i, k as u32)).collect();
    let mut users: Vec<u32> = items.iter().flat_map(|&i| m.col(i).iter().copied()).collect();
    users.sort_unstable();
    users.dedup();
    let mut pairs = Vec::new();
    for (new_u, &u) in users.iter().enumerate() {
        for i in m.row(u) {
            if let Some(&k) = item_pos.get(i) {
                pairs.push((new_u as u32, k));
            }
        }
    }
    InteractionMatrix::from_pairs(
        users.iter().map(|&u| m.user_token(u).to_string()).collect(),
        items.iter().map(|&i| m.item_token(i).to_string()).collect(),
        &pairs,
    )
}
