//! Token-level cross-attention between a pathology and a gene embedding.
//!
//! Each `N`-vector is split into `T` tokens of width `N / T`. Queries come
//! from the target's tokens, keys and values from the guide's tokens, so the
//! output is the target re-expressed as a mixture of projected guide tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{glorot_uniform, join_path, softmax_in_place, Leaves, Matrix};
use crate::scalar::Scalar;

/// Reshapes `h` into `tokens` rows of width `h.len() / tokens`.
pub fn tokenize<T: Scalar>(h: &[T], tokens: usize) -> Result<Matrix<T>> {
    if tokens == 0 || !h.len().is_multiple_of(tokens) {
        return Err(Error::invalid(format!(
            "{tokens} tokens do not divide a vector of length {}",
            h.len()
        )));
    }
    Matrix::from_vec(tokens, h.len() / tokens, h.to_vec())
}

pub fn flatten<T: Scalar>(m: Matrix<T>) -> Vec<T> {
    m.into_vec()
}

/// Projection matrices for one attention direction.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnParams<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
}

/// Values saved by [`CrossAttnParams::forward_cached`].
#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    target_tokens: Matrix<T>,
    guide_tokens: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Row-stochastic `T × T` attention weights.
    pub weights: Matrix<T>,
}

impl<T: Scalar> CrossAttnParams<T> {
    /// Square `d × d` projections for token width `d`.
    pub fn init<R: Rng + ?Sized>(token_dim: usize, rng: &mut R) -> Self {
        Self {
            wq: glorot_uniform(token_dim, token_dim, rng),
            wk: glorot_uniform(token_dim, token_dim, rng),
            wv: glorot_uniform(token_dim, token_dim, rng),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.wq.rows()
    }

    fn validate(&self, target: &[T], guide: &[T], tokens: usize) -> Result<()> {
        if target.len() != guide.len() {
            return Err(Error::shape(
                "cross_attend",
                format!("target length {} vs guide length {}", target.len(), guide.len()),
            ));
        }
        let d = self.token_dim();
        if tokens == 0 || target.len() != tokens * d {
            return Err(Error::shape(
                "cross_attend",
                format!("{} entries cannot form {tokens} tokens of width {d}", target.len()),
            ));
        }
        if self.wk.rows() != d || self.wv.rows() != d || self.wk.cols() != self.wq.cols() || self.wv.cols() != d {
            return Err(Error::shape(
                "cross_attend",
                format!(
                    "projection shapes Wq {:?}, Wk {:?}, Wv {:?}",
                    self.wq.shape(),
                    self.wk.shape(),
                    self.wv.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, target: &[T], guide: &[T], tokens: usize) -> Result<Vec<T>> {
        Ok(self.forward_cached(target, guide, tokens)?.0)
    }

    pub fn forward_cached(&self, target: &[T], guide: &[T], tokens: usize) -> Result<(Vec<T>, AttnCache<T>)> {
        self.validate(target, guide, tokens)?;
        let target_tokens = tokenize(target, tokens)?;
        let guide_tokens = tokenize(guide, tokens)?;
        let q = target_tokens.dot(&self.wq);
        let k = guide_tokens.dot(&self.wk);
        let v = guide_tokens.dot(&self.wv);
        let scale = T::one() / T::of(self.wq.cols() as f64).sqrt();
        let mut weights = q.dot_t(&k).scale(scale);
        for r in 0..weights.rows() {
            softmax_in_place(weights.row_mut(r));
        }
        let out = flatten(weights.dot(&v));
        Ok((
            out,
            AttnCache {
                target_tokens,
                guide_tokens,
                q,
                k,
                v,
                weights,
            },
        ))
    }

    /// Accumulates projection gradients and returns `(d_target, d_guide)`.
    pub fn backward(&self, cache: &AttnCache<T>, d_out: &[T], grads: &mut Self) -> (Vec<T>, Vec<T>) {
        let (tokens, d) = cache.target_tokens.shape();
        let d_o = Matrix::from_vec(tokens, d, d_out.to_vec()).expect("gradient matches output shape");
        let a = &cache.weights;
        let d_a = d_o.dot_t(&cache.v);
        let d_v = a.t_dot(&d_o);
        let mut d_s = Matrix::zeros(tokens, tokens);
        for r in 0..tokens {
            let (ar, dar) = (a.row(r), d_a.row(r));
            let inner: T = ar.iter().zip(dar).map(|(&x, &y)| x * y).sum();
            for (o, (&x, &y)) in d_s.row_mut(r).iter_mut().zip(ar.iter().zip(dar)) {
                *o = x * (y - inner);
            }
        }
        let scale = T::one() / T::of(self.wq.cols() as f64).sqrt();
        let d_s = d_s.scale(scale);
        let d_q = d_s.dot(&cache.k);
        let d_k = d_s.t_dot(&cache.q);

        grads.wq.add_assign(&cache.target_tokens.t_dot(&d_q));
        grads.wk.add_assign(&cache.guide_tokens.t_dot(&d_k));
        grads.wv.add_assign(&cache.guide_tokens.t_dot(&d_v));

        let d_target = d_q.dot_t(&self.wq);
        let mut d_guide = d_k.dot_t(&self.wk);
        d_guide.add_assign(&d_v.dot_t(&self.wv));
        (d_target.into_vec(), d_guide.into_vec())
    }
}

/// Refines `target` using `guide`; see [`CrossAttnParams::forward`].
pub fn cross_attend<T: Scalar>(p: &CrossAttnParams<T>, target: &[T], guide: &[T], tokens: usize) -> Result<Vec<T>> {
    p.forward(target, guide, tokens)
}

impl<T: Scalar> Leaves<T> for CrossAttnParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        f(join_path(prefix, "Wk"), &self.wk);
        f(join_path(prefix, "Wq"), &self.wq);
        f(join_path(prefix, "Wv"), &self.wv);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        f(join_path(prefix, "Wk"), &mut self.wk);
        f(join_path(prefix, "Wq"), &mut self.wq);
        f(join_path(prefix, "Wv"), &mut self.wv);
    }
}

/// Both directions of one branch: `p2g` refines pathology features under
/// gene guidance, `g2p` refines gene features under pathology guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct BiCrossAttn<T> {
    pub p2g: CrossAttnParams<T>,
    pub g2p: CrossAttnParams<T>,
}

impl<T: Scalar> BiCrossAttn<T> {
    pub fn init<R: Rng + ?Sized>(token_dim: usize, rng: &mut R) -> Self {
        Self {
            p2g: CrossAttnParams::init(token_dim, rng),
            g2p: CrossAttnParams::init(token_dim, rng),
        }
    }
}

impl<T: Scalar> Leaves<T> for BiCrossAttn<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        self.g2p.visit(&join_path(prefix, "g2p"), f);
        self.p2g.visit(&join_path(prefix, "p2g"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        self.g2p.visit_mut(&join_path(prefix, "g2p"), f);
        self.p2g.visit_mut(&join_path(prefix, "p2g"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamTree};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn tokenize_layout() {
        let m = tokenize(&[1.0f64, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(m, Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let single = tokenize(&[1.0f64, 2.0, 3.0], 1).unwrap();
        assert_eq!(single.shape(), (1, 3));
        assert!(tokenize(&[1.0f64, 2.0, 3.0], 2).is_err());
        assert!(tokenize(&[1.0f64, 2.0], 0).is_err());
    }

    #[test]
    fn single_token_ignores_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CrossAttnParams::<f64>::init(4, &mut rng);
        let guide = random_vec(4, &mut rng);
        let a = p.forward(&random_vec(4, &mut rng), &guide, 1).unwrap();
        let b = p.forward(&random_vec(4, &mut rng), &guide, 1).unwrap();
        assert_eq!(a, b);
        let projected = Matrix::row_vector(&guide).dot(&p.wv).into_vec();
        for (x, y) in a.iter().zip(&projected) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = CrossAttnParams::<f64>::init(2, &mut rng);
        p.wq.fill(0.0);
        p.wk.fill(0.0);
        let target = random_vec(6, &mut rng);
        let guide = random_vec(6, &mut rng);
        let (z, cache) = p.forward_cached(&target, &guide, 3).unwrap();
        for x in cache.weights.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let v = tokenize(&guide, 3).unwrap().dot(&p.wv);
        let mean = v.col_means();
        for t in 0..3 {
            for c in 0..2 {
                assert!((z[t * 2 + c] - mean[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_token_case_by_hand() {
        // d = 1 so every projection is a scalar and the chain is easy to
        // spell out explicitly.
        let p = CrossAttnParams {
            wq: Matrix::from_vec(1, 1, vec![0.5]).unwrap(),
            wk: Matrix::from_vec(1, 1, vec![-1.5]).unwrap(),
            wv: Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
        };
        let target = [1.0f64, -2.0];
        let guide = [0.3f64, 0.8];
        let z = p.forward(&target, &guide, 2).unwrap();
        let q = [0.5f64 * 1.0, 0.5 * -2.0];
        let k = [-1.5 * 0.3, -1.5 * 0.8];
        let v = [2.0 * 0.3, 2.0 * 0.8];
        for (i, &qi) in q.iter().enumerate() {
            let l0 = qi * k[0];
            let l1 = qi * k[1];
            let a0 = l0.exp() / (l0.exp() + l1.exp());
            let a1 = l1.exp() / (l0.exp() + l1.exp());
            assert!((z[i] - (a0 * v[0] + a1 * v[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = CrossAttnParams::<f64>::init(2, &mut rng);
        assert!(p.forward(&[0.0; 4], &[0.0; 6], 2).is_err());
        assert!(p.forward(&[0.0; 6], &[0.0; 6], 2).is_err());
        assert!(p.forward(&[0.0; 6], &[0.0; 6], 4).is_err());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = CrossAttnParams::<f64>::init(3, &mut rng);
        let target = random_vec(12, &mut rng);
        let guide = random_vec(12, &mut rng);
        let (z, cache) = p.forward_cached(&target, &guide, 4).unwrap();
        let d_z: Vec<f64> = z.iter().map(|x| 2.0 * x).collect();
        let mut grads = p.clone();
        grads.zero_out();
        let (d_t, d_g) = p.backward(&cache, &d_z, &mut grads);

        let mut tree = p.to_tree();
        tree.insert("target", Matrix::row_vector(&target)).unwrap();
        tree.insert("guide", Matrix::row_vector(&guide)).unwrap();
        let mut analytic = grads.to_tree();
        analytic.insert("target", Matrix::row_vector(&d_t)).unwrap();
        analytic.insert("guide", Matrix::row_vector(&d_g)).unwrap();
        let report = grad_check(
            |t: &ParamTree<f64>| {
                let mut q = p.clone();
                q.load_tree(t)?;
                let z = q.forward(
                    t.get("target").unwrap().as_slice(),
                    t.get("guide").unwrap().as_slice(),
                    4,
                )?;
                Ok(z.iter().map(|x| x * x).sum())
            },
            &tree,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    proptest! {
        #[test]
        fn flatten_inverts_tokenize(h in prop::collection::vec(-5f64..5.0, 12)) {
            for t in [1, 2, 3, 4, 6, 12] {
                prop_assert_eq!(flatten(tokenize(&h, t).unwrap()), h.clone());
            }
        }

        #[test]
        fn attention_rows_are_stochastic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = CrossAttnParams::<f64>::init(4, &mut rng);
            let target: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let guide: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (_, cache) = p.forward_cached(&target, &guide, 4).unwrap();
            for r in 0..4 {
                let s: f64 = cache.weights.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        // Adding a constant to every logit must not change the output.
        #[test]
        fn logit_shift_leaves_output_unchanged(seed in 0u64..500, shift in -20f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = CrossAttnParams::<f64>::init(2, &mut rng);
            let target: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let guide: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (z, cache) = p.forward_cached(&target, &guide, 3).unwrap();
            let scale = 1.0 / 2f64.sqrt();
            let mut logits = cache.q.dot_t(&cache.k).scale(scale);
            for x in logits.as_mut_slice() {
                *x += shift;
            }
            for r in 0..3 {
                softmax_in_place(logits.row_mut(r));
            }
            let shifted = logits.dot(&cache.v).into_vec();
            for (a, b) in z.iter().zip(&shifted) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
