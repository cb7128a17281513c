use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One spatial transcriptomics spot.
#[derive(Clone, Debug, PartialEq)]
pub struct SpotRecord {
    pub spot_id: String,
    /// `(x, y)` in array units.
    pub coord: (f64, f64),
    /// Patch feature vector of length `P`.
    pub patch: Vec<f64>,
    /// Expression vector of length `n`.
    pub expr: Vec<f64>,
}

/// An ordered set of spots sharing a gene panel and a patch width.
#[derive(Clone, Debug, PartialEq)]
pub struct StDataset {
    spots: Vec<SpotRecord>,
    gene_names: Vec<String>,
    patch_dim: usize,
    normalized: bool,
    planted_map: Option<Matrix<f64>>,
}

impl StDataset {
    /// Validates and assembles a dataset.
    ///
    /// Rejects duplicate spot ids, duplicate coordinates, ragged vectors,
    /// non-finite values, and (when `normalized`) negative expression.
    pub fn new(spots: Vec<SpotRecord>, gene_names: Vec<String>, patch_dim: usize, normalized: bool) -> Result<Self> {
        let n = gene_names.len();
        let mut names = HashSet::new();
        for g in &gene_names {
            if !names.insert(g.as_str()) {
                return Err(Error::Duplicate {
                    what: "gene name",
                    value: g.clone(),
                });
            }
        }
        let mut ids = HashSet::new();
        let mut coords = HashSet::new();
        for s in &spots {
            if !ids.insert(s.spot_id.as_str()) {
                return Err(Error::Duplicate {
                    what: "spot_id",
                    value: s.spot_id.clone(),
                });
            }
            if !s.coord.0.is_finite() || !s.coord.1.is_finite() {
                return Err(Error::NonFinite(format!("coordinate of spot {}", s.spot_id)));
            }
            if !coords.insert((s.coord.0.to_bits(), s.coord.1.to_bits())) {
                return Err(Error::Duplicate {
                    what: "coordinate",
                    value: format!("({}, {}) at spot {}", s.coord.0, s.coord.1, s.spot_id),
                });
            }
            if s.patch.len() != patch_dim {
                return Err(Error::DimensionMismatch(format!(
                    "spot {} has patch length {} but P = {patch_dim}",
                    s.spot_id,
                    s.patch.len()
                )));
            }
            if s.expr.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "spot {} has {} expression values but n = {n}",
                    s.spot_id,
                    s.expr.len()
                )));
            }
            if s.patch.iter().chain(&s.expr).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("data of spot {}", s.spot_id)));
            }
            if normalized && s.expr.iter().any(|&x| x < 0.0) {
                return Err(Error::invalid(format!(
                    "negative normalized expression at spot {}",
                    s.spot_id
                )));
            }
        }
        Ok(Self {
            spots,
            gene_names,
            patch_dim,
            normalized,
            planted_map: None,
        })
    }

    /// Attaches the `n × P` generating map of a synthetic dataset.
    pub fn with_planted_map(mut self, map: Matrix<f64>) -> Result<Self> {
        if map.shape() != (self.genes(), self.patch_dim) {
            return Err(Error::DimensionMismatch(format!(
                "planted map is {:?}, expected ({}, {})",
                map.shape(),
                self.genes(),
                self.patch_dim
            )));
        }
        self.planted_map = Some(map);
        Ok(self)
    }

    pub fn spots(&self) -> &[SpotRecord] {
        &self.spots
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    /// Number of spots `M`.
    pub fn len(&self) -> usize {
        self.spots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spots.is_empty()
    }

    /// Patch width `P`.
    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    /// Gene count `n`.
    pub fn genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn planted_map(&self) -> Option<&Matrix<f64>> {
        self.planted_map.as_ref()
    }

    pub fn gene_index(&self, name: &str) -> Option<usize> {
        self.gene_names.iter().position(|g| g == name)
    }

    pub fn coords(&self) -> Vec<(f64, f64)> {
        self.spots.iter().map(|s| s.coord).collect()
    }

    /// `M × P` patch matrix.
    pub fn patch_matrix(&self) -> Matrix<f64> {
        let data = self.spots.iter().flat_map(|s| s.patch.iter().copied()).collect();
        Matrix::from_vec(self.len(), self.patch_dim, data).expect("validated at construction")
    }

    /// `M × n` expression matrix.
    pub fn expr_matrix(&self) -> Matrix<f64> {
        let data = self.spots.iter().flat_map(|s| s.expr.iter().copied()).collect();
        Matrix::from_vec(self.len(), self.genes(), data).expect("validated at construction")
    }

    /// New dataset holding the given spots, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("spot index {bad} out of range {}", self.len())));
        }
        let spots = indices.iter().map(|&i| self.spots[i].clone()).collect();
        let mut out = Self::new(spots, self.gene_names.clone(), self.patch_dim, self.normalized)?;
        out.planted_map = self.planted_map.clone();
        Ok(out)
    }

    /// New dataset restricted to the named genes, in the given order.
    pub fn subset_genes(&self, names: &[String]) -> Result<Self> {
        let cols = names
            .iter()
            .map(|n| self.gene_index(n).ok_or_else(|| Error::UnknownGene(n.clone())))
            .collect::<Result<Vec<_>>>()?;
        let spots = self
            .spots
            .iter()
            .map(|s| SpotRecord {
                expr: cols.iter().map(|&c| s.expr[c]).collect(),
                ..s.clone()
            })
            .collect();
        Self::new(spots, names.to_vec(), self.patch_dim, self.normalized)
    }

    pub(crate) fn set_normalized_expr(&mut self, gene_names: Vec<String>, exprs: Vec<Vec<f64>>) {
        for (s, e) in self.spots.iter_mut().zip(exprs) {
            s.expr = e;
        }
        self.gene_names = gene_names;
        self.normalized = true;
        self.planted_map = None;
    }
}

/// Keeps the `n` genes with the largest total raw count (ties by ascending
/// gene name), preserving their original column order, and maps every kept
/// count `c` to `ln(1 + c)`.
pub fn select_top_genes(raw: &StDataset, n: usize) -> Result<StDataset> {
    if raw.is_normalized() {
        return Err(Error::invalid(
            "gene selection expects raw counts, dataset is already normalized",
        ));
    }
    if n == 0 || n > raw.genes() {
        return Err(Error::invalid(format!(
            "cannot keep {n} genes out of {} available",
            raw.genes()
        )));
    }
    if let Some(s) = raw.spots().iter().find(|s| s.expr.iter().any(|&c| c < 0.0)) {
        return Err(Error::invalid(format!("negative raw count at spot {}", s.spot_id)));
    }
    let mut totals = vec![0.0f64; raw.genes()];
    for s in raw.spots() {
        for (t, &c) in totals.iter_mut().zip(&s.expr) {
            *t += c;
        }
    }
    let mut order: Vec<usize> = (0..raw.genes()).collect();
    order.sort_by(|&a, &b| {
        totals[b]
            .partial_cmp(&totals[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| raw.gene_names()[a].cmp(&raw.gene_names()[b]))
    });
    let mut kept: Vec<usize> = order[..n].to_vec();
    kept.sort_unstable();
    let names = kept.iter().map(|&c| raw.gene_names()[c].clone()).collect();
    let exprs = raw
        .spots()
        .iter()
        .map(|s| kept.iter().map(|&c| s.expr[c].ln_1p()).collect())
        .collect();
    let mut out = raw.clone();
    out.set_normalized_expr(names, exprs);
    Ok(out)
}
