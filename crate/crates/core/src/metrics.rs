//! Error and correlation metrics, and k-fold cross-validation.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{kfold_split, StDataset};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::training::{predict_dataset, train, TrainConfig};

/// Metrics of one prediction matrix against its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mse: f64,
    pub mae: f64,
    /// Mean of `per_gene_pcc`.
    pub pcc: f64,
    pub per_gene_pcc: Vec<f64>,
}

/// Pearson correlation of two equal-length columns; 0 when either is
/// constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// MSE and MAE over all entries; PCC per gene across spots, then averaged.
pub fn compute_metrics(pred: &Matrix<f64>, label: &Matrix<f64>) -> Result<EvalResult> {
    if pred.shape() != label.shape() {
        return Err(Error::shape(
            "compute_metrics",
            format!("prediction {:?} vs label {:?}", pred.shape(), label.shape()),
        ));
    }
    let (m, n) = pred.shape();
    if m < 2 {
        return Err(Error::invalid(format!("correlation needs at least 2 spots, got {m}")));
    }
    if n == 0 {
        return Err(Error::invalid("no genes to evaluate"));
    }
    let count = (m * n) as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (&p, &y) in pred.as_slice().iter().zip(label.as_slice()) {
        se += (p - y) * (p - y);
        ae += (p - y).abs();
    }
    let pt = pred.transpose();
    let lt = label.transpose();
    let per_gene_pcc: Vec<f64> = (0..n).map(|g| pearson(pt.row(g), lt.row(g))).collect();
    Ok(EvalResult {
        mse: se / count,
        mae: ae / count,
        pcc: per_gene_pcc.iter().sum::<f64>() / n as f64,
        per_gene_pcc,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<EvalResult>,
    pub mse: Summary,
    pub mae: Summary,
    pub pcc: Summary,
}

impl CrossValidation {
    fn from_folds(folds: Vec<EvalResult>) -> Self {
        let pick = |f: fn(&EvalResult) -> f64| Summary::of(&folds.iter().map(f).collect::<Vec<_>>());
        Self {
            mse: pick(|r| r.mse),
            mae: pick(|r| r.mae),
            pcc: pick(|r| r.pcc),
            folds,
        }
    }

    /// `fold,mse,mae,pcc` rows and a final `summary` row of `mean±std` cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,mse,mae,pcc\n");
        for (i, r) in self.folds.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{}", r.mse, r.mae, r.pcc);
        }
        let cell = |s: Summary| format!("{}±{}", s.mean, s.std);
        let _ = writeln!(out, "summary,{},{},{}", cell(self.mse), cell(self.mae), cell(self.pcc));
        out
    }
}

/// Trains one fresh model per fold (seed `cfg.seed + fold`) on the remaining
/// folds and evaluates it on the held-out spots. Neighbor lists are built
/// inside each training subset.
pub fn cross_validate(ds: &StDataset, cfg: &TrainConfig, k: usize, seed: u64) -> Result<CrossValidation> {
    if k < 2 {
        return Err(Error::invalid(format!("cross-validation needs k >= 2, got {k}")));
    }
    let split = kfold_split(ds, k, seed)?;
    let folds = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train_ds = ds.subset(&split.train_indices(fold))?;
            let test_ds = ds.subset(&split.test_indices(fold))?;
            let fold_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(fold as u64),
                ..cfg.clone()
            };
            let (params, _) = train::<f64>(&train_ds, &fold_cfg)?;
            let pred = predict_dataset(&params, &test_ds)?;
            compute_metrics(&pred, &test_ds.expr_matrix())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossValidation::from_folds(folds))
}
