//! In-batch InfoNCE between pathology and gene embeddings.
//!
//! Row `i` of `zp` is the anchor, row `i` of `zg` its positive, and the other
//! rows of `zg` its negatives. Similarities are cosine, scaled by `1/τ`.

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, cosine_sim_backward, log_sum_exp, softmax_in_place, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct ContrastBatch<T> {
    zp: Matrix<T>,
    zg: Matrix<T>,
    temperature: T,
}

impl<T: Scalar> ContrastBatch<T> {
    pub fn new(zp: Matrix<T>, zg: Matrix<T>, temperature: T) -> Result<Self> {
        if zp.shape() != zg.shape() {
            return Err(Error::shape(
                "ContrastBatch",
                format!("pathology {:?} vs gene {:?}", zp.shape(), zg.shape()),
            ));
        }
        if zp.rows() == 0 {
            return Err(Error::invalid("contrastive batch needs at least one row"));
        }
        if temperature.is_nan() || temperature <= T::zero() {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { zp, zg, temperature })
    }

    pub fn len(&self) -> usize {
        self.zp.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.zp.rows() == 0
    }

    /// Cosine similarity of every anchor with every candidate.
    pub fn similarities(&self) -> Matrix<T> {
        let b = self.len();
        let mut sim = Matrix::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                sim[(i, j)] = cosine_sim(self.zp.row(i), self.zg.row(j));
            }
        }
        sim
    }

    pub fn loss(&self) -> T {
        info_nce_from_similarities(&self.similarities(), self.temperature)
    }

    /// Loss with gradients with respect to `zp` and `zg`.
    pub fn loss_and_grad(&self) -> (T, Matrix<T>, Matrix<T>) {
        let s = self.similarities().scale(T::one() / self.temperature);
        let b = self.len();
        let inv_b = T::one() / T::of(b as f64);
        let mut loss = T::zero();
        let mut d_zp = Matrix::zeros(self.zp.rows(), self.zp.cols());
        let mut d_zg = Matrix::zeros(self.zg.rows(), self.zg.cols());
        let mut probs = vec![T::zero(); b];
        for i in 0..b {
            loss += log_sum_exp(s.row(i)) - s[(i, i)];
            probs.copy_from_slice(s.row(i));
            softmax_in_place(&mut probs);
            for (j, &p) in probs.iter().enumerate() {
                let target = if i == j { T::one() } else { T::zero() };
                let d_cos = (p - target) * inv_b / self.temperature;
                let mut ga = vec![T::zero(); self.zp.cols()];
                let mut gb = vec![T::zero(); self.zg.cols()];
                cosine_sim_backward(self.zp.row(i), self.zg.row(j), d_cos, &mut ga, &mut gb);
                for (o, g) in d_zp.row_mut(i).iter_mut().zip(ga) {
                    *o += g;
                }
                for (o, g) in d_zg.row_mut(j).iter_mut().zip(gb) {
                    *o += g;
                }
            }
        }
        (loss * inv_b, d_zp, d_zg)
    }
}

/// InfoNCE given the `B × B` matrix of anchor/candidate similarities, with
/// positives on the diagonal.
pub fn info_nce_from_similarities<T: Scalar>(sim: &Matrix<T>, temperature: T) -> T {
    let b = sim.rows();
    let logits = sim.scale(T::one() / temperature);
    let total: T = (0..b).map(|i| log_sum_exp(logits.row(i)) - logits[(i, i)]).sum();
    total / T::of(b as f64)
}

pub fn info_nce<T: Scalar>(batch: &ContrastBatch<T>) -> T {
    batch.loss()
}
