use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{forward_backward, predict_rows, ModelParams, SpotBatch, TrainData};
use super::optim::Adam;
use super::{lr_at, StepUnit, TrainConfig};
use crate::data::StDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Batch-averaged losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub ls: f64,
    pub ln: f64,
    pub mse: f64,
    /// Learning rate in effect at the start of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Where the final parameters were written, if they were.
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,total,ls,ln,mse,lr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.epoch, r.total, r.ls, r.ln, r.mse, r.lr);
        }
        out
    }
}

/// Splits a shuffled order into batches of `batch_size`, dropping a trailing
/// batch that holds a single spot.
pub fn batch_indices(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    if batches.len() > 1 && batch_size > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
    }
    batches
}

/// Stateful training loop over one dataset.
pub struct Trainer<T> {
    cfg: TrainConfig,
    data: TrainData<T>,
    params: ModelParams<T>,
    adam: Adam<T>,
    shuffle: ChaCha8Rng,
    epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Checks the dataset against `cfg`, precomputes neighbor lists and
    /// initializes parameters from `cfg.seed`.
    pub fn new(ds: &StDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if !ds.is_normalized() {
            return Err(Error::invalid(
                "training expects normalized expression; run gene selection first",
            ));
        }
        if ds.len() <= cfg.neighbors {
            return Err(Error::invalid(format!(
                "need more than K = {} spots, dataset has {}",
                cfg.neighbors,
                ds.len()
            )));
        }
        if ds.patch_dim() != cfg.patch_dim || ds.genes() != cfg.genes {
            return Err(Error::DimensionMismatch(format!(
                "dataset has P = {}, n = {} but config has P = {}, n = {}",
                ds.patch_dim(),
                ds.genes(),
                cfg.patch_dim,
                cfg.genes
            )));
        }
        let params = ModelParams::init(cfg)?;
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(1);
        Ok(Self {
            adam: Adam::new(&params),
            data: TrainData::from_dataset(ds, cfg.neighbors)?,
            cfg: cfg.clone(),
            params,
            shuffle,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn data(&self) -> &TrainData<T> {
        &self.data
    }

    /// Optimizer updates applied so far.
    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    fn current_lr(&self) -> f64 {
        match self.cfg.step_unit {
            StepUnit::Epoch => lr_at(self.epoch as u64, &self.cfg),
            StepUnit::Iteration => lr_at(self.adam.steps(), &self.cfg),
        }
    }

    /// One forward/backward pass and Adam update on the given spots.
    pub fn step_on(&mut self, indices: &[usize]) -> Result<super::LossBreakdown<T>> {
        let batch = SpotBatch::gather(&self.data, indices);
        let (loss, grads) = forward_backward(&self.params, &self.cfg, &batch)?;
        let lr = self.current_lr();
        self.adam.step(&mut self.params, &grads, lr)?;
        Ok(loss)
    }

    /// Shuffles, runs every batch once, and returns the batch-averaged losses.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let lr = self.current_lr();
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.shuffle);
        let batches = batch_indices(&order, self.cfg.batch_size);
        let mut sums = [0.0f64; 4];
        for b in &batches {
            let l = self.step_on(b)?;
            for (s, v) in sums.iter_mut().zip([l.total, l.ls, l.ln, l.mse]) {
                *s += v.to_f64_lossy();
            }
        }
        let count = batches.len() as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            total: sums[0] / count,
            ls: sums[1] / count,
            ln: sums[2] / count,
            mse: sums[3] / count,
            lr,
        };
        self.epoch += 1;
        Ok(record)
    }
}

/// Trains for `cfg.epochs` epochs and returns the final parameters.
pub fn train<T: Scalar>(ds: &StDataset, cfg: &TrainConfig) -> Result<(ModelParams<T>, TrainReport)> {
    let mut trainer = Trainer::new(ds, cfg)?;
    let mut report = TrainReport::default();
    for _ in 0..cfg.epochs {
        report.epochs.push(trainer.run_epoch()?);
    }
    Ok((trainer.into_params(), report))
}

/// Predictions for every spot of `ds`, in spot order. Only the patch
/// features are read.
pub fn predict_dataset<T: Scalar>(params: &ModelParams<T>, ds: &StDataset) -> Result<Matrix<f64>> {
    if ds.patch_dim() != params.encoders.patch_dim() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has P = {}, model expects {}",
            ds.patch_dim(),
            params.encoders.patch_dim()
        )));
    }
    Ok(predict_rows(params, &ds.patch_matrix().cast::<T>())?.cast())
}
