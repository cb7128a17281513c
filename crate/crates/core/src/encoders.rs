//! Pathology encoder, gene (ST) encoder and the prediction translator.
//!
//! All three are two affine layers with a ReLU in between and no output
//! activation. Inputs are batched row-wise: one row per spot.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{glorot_uniform, join_path, relu, Leaves, Matrix};
use crate::scalar::Scalar;

/// Affine map `x · W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(fan_in, fan_out, rng),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = x.dot(&self.weight);
        out.add_row_broadcast(self.bias.as_slice());
        out
    }
}

impl<T: Scalar> Leaves<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        f(join_path(prefix, "b"), &self.bias);
        f(join_path(prefix, "w"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        f(join_path(prefix, "b"), &mut self.bias);
        f(join_path(prefix, "w"), &mut self.weight);
    }
}

/// Intermediate values kept from [`Mlp::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
    hidden: Matrix<T>,
}

/// `Linear → ReLU → Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::init(input, hidden, rng),
            output: Linear::init(hidden, output, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim()
    }

    fn check_input(&self, x: &Matrix<T>, op: &'static str) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                op,
                format!("input width {} but layer expects {}", x.cols(), self.in_dim()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
        self.check_input(x, "Mlp::forward")?;
        let pre = self.hidden.forward(x);
        let hidden = pre.map(relu);
        let out = self.output.forward(&hidden);
        Ok((
            out,
            MlpCache {
                input: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input rows.
    pub fn backward(&self, cache: &MlpCache<T>, d_out: &Matrix<T>, grads: &mut Self) -> Matrix<T> {
        grads.output.weight.add_assign(&cache.hidden.t_dot(d_out));
        add_row(&mut grads.output.bias, &d_out.col_sums());
        let mut d_pre = d_out.dot_t(&self.output.weight);
        for (d, &p) in d_pre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            if p <= T::zero() {
                *d = T::zero();
            }
        }
        grads.hidden.weight.add_assign(&cache.input.t_dot(&d_pre));
        add_row(&mut grads.hidden.bias, &d_pre.col_sums());
        d_pre.dot_t(&self.hidden.weight)
    }
}

fn add_row<T: Scalar>(bias: &mut Matrix<T>, v: &[T]) {
    for (b, &x) in bias.as_mut_slice().iter_mut().zip(v) {
        *b += x;
    }
}

impl<T: Scalar> Leaves<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        self.hidden.visit(&join_path(prefix, "l1"), f);
        self.output.visit(&join_path(prefix, "l2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        self.hidden.visit_mut(&join_path(prefix, "l1"), f);
        self.output.visit_mut(&join_path(prefix, "l2"), f);
    }
}

/// Widths of the three networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    /// Patch feature length `P`.
    pub patch_dim: usize,
    /// Number of genes `n`.
    pub genes: usize,
    /// Shared embedding width `N`.
    pub feature_dim: usize,
    /// Hidden width of the pathology encoder.
    pub patch_hidden: usize,
    /// Hidden width of the gene encoder and the translator.
    pub gene_hidden: usize,
}

impl EncoderDims {
    /// Hidden widths default to `2N`.
    pub fn new(patch_dim: usize, genes: usize, feature_dim: usize) -> Self {
        Self {
            patch_dim,
            genes,
            feature_dim,
            patch_hidden: 2 * feature_dim,
            gene_hidden: 2 * feature_dim,
        }
    }
}

/// Pathology encoder `P → N`, gene encoder `n → N` and translator `N → n`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub phi_p: Mlp<T>,
    pub phi_g: Mlp<T>,
    pub phi_t: Mlp<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Result<Self> {
        if [
            dims.patch_dim,
            dims.genes,
            dims.feature_dim,
            dims.patch_hidden,
            dims.gene_hidden,
        ]
        .contains(&0)
        {
            return Err(Error::invalid(format!("encoder dimensions must be positive: {dims:?}")));
        }
        Self::from_parts(
            Mlp::init(dims.patch_dim, dims.patch_hidden, dims.feature_dim, rng),
            Mlp::init(dims.genes, dims.gene_hidden, dims.feature_dim, rng),
            Mlp::init(dims.feature_dim, dims.gene_hidden, dims.genes, rng),
        )
    }

    /// Assembles the three networks, checking that the gene encoder and the
    /// translator mirror each other and share the embedding width.
    pub fn from_parts(phi_p: Mlp<T>, phi_g: Mlp<T>, phi_t: Mlp<T>) -> Result<Self> {
        let n_feat = phi_p.out_dim();
        if phi_g.out_dim() != n_feat || phi_t.in_dim() != n_feat {
            return Err(Error::invalid(format!(
                "embedding widths disagree: phi_p→{}, phi_g→{}, phi_t←{}",
                n_feat,
                phi_g.out_dim(),
                phi_t.in_dim()
            )));
        }
        if phi_t.out_dim() != phi_g.in_dim() {
            return Err(Error::invalid(format!(
                "translator emits {} genes but gene encoder reads {}",
                phi_t.out_dim(),
                phi_g.in_dim()
            )));
        }
        for (name, mlp) in [("phi_p", &phi_p), ("phi_g", &phi_g), ("phi_t", &phi_t)] {
            if mlp.hidden.out_dim() != mlp.output.in_dim()
                || mlp.hidden.bias.shape() != (1, mlp.hidden.out_dim())
                || mlp.output.bias.shape() != (1, mlp.output.out_dim())
            {
                return Err(Error::invalid(format!("{name} layers are not chained")));
            }
        }
        Ok(Self { phi_p, phi_g, phi_t })
    }

    pub fn feature_dim(&self) -> usize {
        self.phi_p.out_dim()
    }

    pub fn patch_dim(&self) -> usize {
        self.phi_p.in_dim()
    }

    pub fn genes(&self) -> usize {
        self.phi_g.in_dim()
    }

    pub fn encode_patch(&self, patch: &[T]) -> Result<Vec<T>> {
        Ok(self.phi_p.forward(&Matrix::row_vector(patch))?.into_vec())
    }

    pub fn encode_genes(&self, expr: &[T]) -> Result<Vec<T>> {
        Ok(self.phi_g.forward(&Matrix::row_vector(expr))?.into_vec())
    }

    pub fn translate(&self, h_p: &[T]) -> Result<Vec<T>> {
        Ok(self.phi_t.forward(&Matrix::row_vector(h_p))?.into_vec())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_out();
        z
    }
}

impl<T: Scalar> Leaves<T> for EncoderParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        self.phi_g.visit(&join_path(prefix, "phi_g"), f);
        self.phi_p.visit(&join_path(prefix, "phi_p"), f);
        self.phi_t.visit(&join_path(prefix, "phi_t"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        self.phi_g.visit_mut(&join_path(prefix, "phi_g"), f);
        self.phi_p.visit_mut(&join_path(prefix, "phi_p"), f);
        self.phi_t.visit_mut(&join_path(prefix, "phi_t"), f);
    }
}
