use crate::error::{Error, Result};
use crate::numerics::{Leaves, Matrix};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for every leaf, in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Leaves<T>>(params: &P) -> Self {
        let zeros: Vec<Matrix<T>> = params
            .leaf_refs()
            .into_iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    /// Number of completed updates.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update. A non-finite gradient entry aborts
    /// before anything is modified.
    pub fn step<P: Leaves<T>>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let g = grads.leaf_refs();
        if g.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradient leaves for {} moment buffers", g.len(), self.m.len()),
            ));
        }
        for ((path, gm), m) in g.iter().zip(&self.m) {
            if gm.shape() != m.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{path}: gradient {:?} vs parameter {:?}", gm.shape(), m.shape()),
                ));
            }
            if !gm.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {path}")));
            }
        }

        self.steps += 1;
        let t = self.steps.min(i32::MAX as u64) as i32;
        let (b1, b2, eps) = (T::of(BETA1), T::of(BETA2), T::of(EPSILON));
        let one = T::one();
        let c1 = one - T::of(BETA1.powi(t));
        let c2 = one - T::of(BETA2.powi(t));
        let lr = T::of(lr);

        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, p| {
            let grad = g[i].1.as_slice();
            let m = ms[i].as_mut_slice();
            let v = vs[i].as_mut_slice();
            for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
                let gj = grad[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}

/// Functional form of [`Adam::step`].
pub fn adam_step<T: Scalar, P: Leaves<T>>(state: &mut Adam<T>, params: &mut P, grads: &P, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}
