use super::StDataset;
use crate::error::{Error, Result};

/// The `k` spots nearest to `spot_index` by Euclidean distance on their
/// coordinates, excluding the query itself. Sorted by `(distance, index)`.
pub fn knn_spatial(ds: &StDataset, spot_index: usize, k: usize) -> Result<Vec<usize>> {
    knn_in(&ds.coords(), spot_index, k)
}

pub(crate) fn knn_in(coords: &[(f64, f64)], query: usize, k: usize) -> Result<Vec<usize>> {
    let m = coords.len();
    if query >= m {
        return Err(Error::invalid(format!("spot index {query} out of range {m}")));
    }
    if k == 0 || k >= m {
        return Err(Error::invalid(format!("K = {k} neighbors needs 1 ≤ K < M = {m}")));
    }
    let (qx, qy) = coords[query];
    let mut candidates: Vec<(f64, usize)> = coords
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != query)
        .map(|(i, &(x, y))| ((x - qx) * (x - qx) + (y - qy) * (y - qy), i))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(candidates.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Neighbor lists for every spot of `ds`.
pub fn neighbor_table(ds: &StDataset, k: usize) -> Result<Vec<Vec<usize>>> {
    let coords = ds.coords();
    (0..coords.len()).map(|i| knn_in(&coords, i, k)).collect()
}
