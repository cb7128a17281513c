//! The full two-branch objective and its analytic gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::TrainConfig;
use crate::attention::{AttnCache, BiCrossAttn};
use crate::contrastive::ContrastBatch;
use crate::data::StDataset;
use crate::encoders::{EncoderDims, EncoderParams, Mlp, MlpCache};
use crate::error::{Error, Result};
use crate::hypergraph::{build_hyperedges, HgnnCache, HgnnParams};
use crate::numerics::{join_path, Leaves, Matrix};
use crate::scalar::Scalar;

/// Every learnable matrix of both branches.
///
/// Leaf paths: `encoders.{phi_p,phi_g,phi_t}.{l1,l2}.{w,b}`,
/// `query.ca.{p2g,g2p}.{Wq,Wk,Wv}`, `neighbor.ca.{p2g,g2p}.{Wq,Wk,Wv}`,
/// `neighbor.hgnn_p.theta{ℓ}`, `neighbor.hgnn_g.theta{ℓ}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoders: EncoderParams<T>,
    pub query_ca: BiCrossAttn<T>,
    pub neighbor_ca: BiCrossAttn<T>,
    pub hgnn_p: HgnnParams<T>,
    pub hgnn_g: HgnnParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dims = EncoderDims::new(cfg.patch_dim, cfg.genes, cfg.feature_dim);
        let encoders = EncoderParams::init(dims, &mut rng)?;
        let query_ca = BiCrossAttn::init(cfg.token_dim(), &mut rng);
        let neighbor_ca = BiCrossAttn::init(cfg.token_dim(), &mut rng);
        let hgnn_p = HgnnParams::init(cfg.layers, cfg.feature_dim, &mut rng)?;
        let hgnn_g = HgnnParams::init(cfg.layers, cfg.feature_dim, &mut rng)?;
        Ok(Self {
            encoders,
            query_ca,
            neighbor_ca,
            hgnn_p,
            hgnn_g,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_out();
        z
    }

    /// Checks that this parameter set fits `cfg`.
    pub fn check_config(&self, cfg: &TrainConfig) -> Result<()> {
        let enc = &self.encoders;
        let ok = enc.patch_dim() == cfg.patch_dim
            && enc.genes() == cfg.genes
            && enc.feature_dim() == cfg.feature_dim
            && self.query_ca.p2g.token_dim() == cfg.token_dim()
            && self.neighbor_ca.p2g.token_dim() == cfg.token_dim()
            && self.hgnn_p.layers() == cfg.layers
            && self.hgnn_g.layers() == cfg.layers;
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "parameters (P={}, n={}, N={}, L={}) do not fit config (P={}, n={}, N={}, T={}, L={})",
                enc.patch_dim(),
                enc.genes(),
                enc.feature_dim(),
                self.hgnn_p.layers(),
                cfg.patch_dim,
                cfg.genes,
                cfg.feature_dim,
                cfg.tokens,
                cfg.layers
            )))
        }
    }
}

impl<T: Scalar> Leaves<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        self.encoders.visit(&join_path(prefix, "encoders"), f);
        self.neighbor_ca.visit(&join_path(prefix, "neighbor.ca"), f);
        self.hgnn_g.visit(&join_path(prefix, "neighbor.hgnn_g"), f);
        self.hgnn_p.visit(&join_path(prefix, "neighbor.hgnn_p"), f);
        self.query_ca.visit(&join_path(prefix, "query.ca"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        self.encoders.visit_mut(&join_path(prefix, "encoders"), f);
        self.neighbor_ca.visit_mut(&join_path(prefix, "neighbor.ca"), f);
        self.hgnn_g.visit_mut(&join_path(prefix, "neighbor.hgnn_g"), f);
        self.hgnn_p.visit_mut(&join_path(prefix, "neighbor.hgnn_p"), f);
        self.query_ca.visit_mut(&join_path(prefix, "query.ca"), f);
    }
}

/// Dataset matrices in the model's scalar type plus precomputed spatial
/// neighbor lists.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub patches: Matrix<T>,
    pub exprs: Matrix<T>,
    pub neighbors: Vec<Vec<usize>>,
}

impl<T: Scalar> TrainData<T> {
    pub fn from_dataset(ds: &StDataset, k: usize) -> Result<Self> {
        Ok(Self {
            patches: ds.patch_matrix().cast(),
            exprs: ds.expr_matrix().cast(),
            neighbors: crate::data::neighbor_table(ds, k)?,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }
}

/// One spot together with its `K` neighbors; row 0 is the spot itself.
#[derive(Clone, Debug)]
pub struct Neighborhood<T> {
    pub patches: Matrix<T>,
    pub exprs: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct SpotBatch<T> {
    pub patches: Matrix<T>,
    pub exprs: Matrix<T>,
    pub neighborhoods: Vec<Neighborhood<T>>,
}

impl<T: Scalar> SpotBatch<T> {
    pub fn gather(data: &TrainData<T>, indices: &[usize]) -> Self {
        let neighborhoods = indices
            .iter()
            .map(|&i| {
                let mut nodes = Vec::with_capacity(data.neighbors[i].len() + 1);
                nodes.push(i);
                nodes.extend_from_slice(&data.neighbors[i]);
                Neighborhood {
                    patches: data.patches.select_rows(&nodes),
                    exprs: data.exprs.select_rows(&nodes),
                }
            })
            .collect();
        Self {
            patches: data.patches.select_rows(indices),
            exprs: data.exprs.select_rows(indices),
            neighborhoods,
        }
    }

    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }
}

/// The three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    /// Spot-level contrastive loss.
    pub ls: T,
    /// Neighborhood-level contrastive loss.
    pub ln: T,
    pub mse: T,
    pub total: T,
}

/// Mean squared error over all entries.
pub fn mse_loss<T: Scalar>(pred: &Matrix<T>, label: &Matrix<T>) -> Result<T> {
    if pred.shape() != label.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("prediction {:?} vs label {:?}", pred.shape(), label.shape()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::invalid("mse of an empty batch"));
    }
    let sum: T = pred
        .as_slice()
        .iter()
        .zip(label.as_slice())
        .map(|(&p, &y)| (y - p) * (y - p))
        .sum();
    Ok(sum / T::of(pred.len() as f64))
}

struct NeighborForward<T> {
    xp_cache: MlpCache<T>,
    xg_cache: MlpCache<T>,
    hp_cache: HgnnCache<T>,
    hg_cache: HgnnCache<T>,
    hp: Vec<T>,
    hg: Vec<T>,
}

/// Gradient contributions of one neighborhood.
struct NeighborGrads<T> {
    phi_p: Mlp<T>,
    phi_g: Mlp<T>,
    hgnn_p: HgnnParams<T>,
    hgnn_g: HgnnParams<T>,
}

fn neighbor_forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    nb: &Neighborhood<T>,
) -> Result<NeighborForward<T>> {
    let (xp, xp_cache) = params.encoders.phi_p.forward_cached(&nb.patches)?;
    let (xg, xg_cache) = params.encoders.phi_g.forward_cached(&nb.exprs)?;
    let gp = build_hyperedges(&xp, cfg.tau_deg)?.propagation()?;
    let gg = build_hyperedges(&xg, cfg.tau_deg)?.propagation()?;
    let (hp, hp_cache) = params.hgnn_p.forward_cached(&gp, &xp)?;
    let (hg, hg_cache) = params.hgnn_g.forward_cached(&gg, &xg)?;
    Ok(NeighborForward {
        xp_cache,
        xg_cache,
        hp_cache,
        hg_cache,
        hp,
        hg,
    })
}

fn check_term<T: Scalar>(value: T, name: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss term {name} = {value}")))
    }
}

/// Loss terms for one batch without gradients.
pub fn forward_batch<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    batch: &SpotBatch<T>,
) -> Result<LossBreakdown<T>> {
    Ok(evaluate(params, cfg, batch, false)?.0)
}

/// Loss terms for one batch and the gradient of the weighted total.
pub fn forward_backward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    batch: &SpotBatch<T>,
) -> Result<(LossBreakdown<T>, ModelParams<T>)> {
    let (loss, grads) = evaluate(params, cfg, batch, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn rows_of<T: Scalar>(rows: &[Vec<T>]) -> Result<Matrix<T>> {
    Matrix::from_rows(rows)
}

fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    batch: &SpotBatch<T>,
    with_grad: bool,
) -> Result<(LossBreakdown<T>, Option<ModelParams<T>>)> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if batch.neighborhoods.len() != b {
        return Err(Error::invalid("every spot in a batch needs a neighborhood"));
    }
    let enc = &params.encoders;
    let tokens = cfg.tokens;
    let lambda1 = T::of(cfg.lambda1);
    let lambda2 = T::of(cfg.lambda2);
    let tau = T::of(cfg.tau_temp);

    // Query branch: translator on pre-attention pathology features.
    let (hp, hp_cache) = enc.phi_p.forward_cached(&batch.patches)?;
    let (pred, pred_cache) = enc.phi_t.forward_cached(&hp)?;
    let mse = mse_loss(&pred, &batch.exprs)?;

    let mut ls = T::zero();
    let mut ln = T::zero();
    let mut grads = with_grad.then(|| params.zeros_like());
    let mut d_hp = Matrix::zeros(hp.rows(), hp.cols());

    if b >= 2 {
        let (hg, hg_cache) = enc.phi_g.forward_cached(&batch.exprs)?;
        let mut zp = Vec::with_capacity(b);
        let mut zg = Vec::with_capacity(b);
        let mut attn: Vec<(AttnCache<T>, AttnCache<T>)> = Vec::with_capacity(b);
        for i in 0..b {
            let (p, pc) = params.query_ca.p2g.forward_cached(hp.row(i), hg.row(i), tokens)?;
            let (g, gc) = params.query_ca.g2p.forward_cached(hg.row(i), hp.row(i), tokens)?;
            zp.push(p);
            zg.push(g);
            attn.push((pc, gc));
        }
        let spot_batch = ContrastBatch::new(rows_of(&zp)?, rows_of(&zg)?, tau)?;

        let neighborhoods: Vec<NeighborForward<T>> = batch
            .neighborhoods
            .par_iter()
            .map(|nb| neighbor_forward(params, cfg, nb))
            .collect::<Result<_>>()?;
        let mut zpn = Vec::with_capacity(b);
        let mut zgn = Vec::with_capacity(b);
        let mut n_attn = Vec::with_capacity(b);
        for nf in &neighborhoods {
            let (p, pc) = params.neighbor_ca.p2g.forward_cached(&nf.hp, &nf.hg, tokens)?;
            let (g, gc) = params.neighbor_ca.g2p.forward_cached(&nf.hg, &nf.hp, tokens)?;
            zpn.push(p);
            zgn.push(g);
            n_attn.push((pc, gc));
        }
        let neighbor_batch = ContrastBatch::new(rows_of(&zpn)?, rows_of(&zgn)?, tau)?;

        if let Some(grads) = grads.as_mut() {
            let (l_s, d_zp, d_zg) = spot_batch.loss_and_grad();
            let (l_n, d_zpn, d_zgn) = neighbor_batch.loss_and_grad();
            ls = l_s;
            ln = l_n;

            let mut d_hg = Matrix::zeros(hg.rows(), hg.cols());
            for (i, (pc, gc)) in attn.iter().enumerate() {
                let dz_p: Vec<T> = d_zp.row(i).iter().map(|&x| x * lambda1).collect();
                let dz_g: Vec<T> = d_zg.row(i).iter().map(|&x| x * lambda1).collect();
                let (dt, dgd) = params.query_ca.p2g.backward(pc, &dz_p, &mut grads.query_ca.p2g);
                add_into(d_hp.row_mut(i), &dt);
                add_into(d_hg.row_mut(i), &dgd);
                let (dt, dgd) = params.query_ca.g2p.backward(gc, &dz_g, &mut grads.query_ca.g2p);
                add_into(d_hg.row_mut(i), &dt);
                add_into(d_hp.row_mut(i), &dgd);
            }
            enc.phi_g.backward(&hg_cache, &d_hg, &mut grads.encoders.phi_g);

            let mut d_hpn = Vec::with_capacity(b);
            let mut d_hgn = Vec::with_capacity(b);
            for (i, (pc, gc)) in n_attn.iter().enumerate() {
                let dz_p: Vec<T> = d_zpn.row(i).iter().map(|&x| x * lambda2).collect();
                let dz_g: Vec<T> = d_zgn.row(i).iter().map(|&x| x * lambda2).collect();
                let (mut dp, mut dg) = params.neighbor_ca.p2g.backward(pc, &dz_p, &mut grads.neighbor_ca.p2g);
                let (dt, dgd) = params.neighbor_ca.g2p.backward(gc, &dz_g, &mut grads.neighbor_ca.g2p);
                add_into(&mut dg, &dt);
                add_into(&mut dp, &dgd);
                d_hpn.push(dp);
                d_hgn.push(dg);
            }

            let per_spot: Vec<NeighborGrads<T>> = neighborhoods
                .par_iter()
                .zip(d_hpn.par_iter().zip(d_hgn.par_iter()))
                .map(|(nf, (dp, dg))| {
                    let mut g = NeighborGrads {
                        phi_p: enc.phi_p.clone(),
                        phi_g: enc.phi_g.clone(),
                        hgnn_p: params.hgnn_p.clone(),
                        hgnn_g: params.hgnn_g.clone(),
                    };
                    g.phi_p.zero_out();
                    g.phi_g.zero_out();
                    g.hgnn_p.zero_out();
                    g.hgnn_g.zero_out();
                    let d_xp = params.hgnn_p.backward(&nf.hp_cache, dp, &mut g.hgnn_p);
                    let d_xg = params.hgnn_g.backward(&nf.hg_cache, dg, &mut g.hgnn_g);
                    enc.phi_p.backward(&nf.xp_cache, &d_xp, &mut g.phi_p);
                    enc.phi_g.backward(&nf.xg_cache, &d_xg, &mut g.phi_g);
                    g
                })
                .collect();
            // Sequential reduction keeps the summation order fixed.
            for g in &per_spot {
                grads.encoders.phi_p.accumulate(&g.phi_p);
                grads.encoders.phi_g.accumulate(&g.phi_g);
                grads.hgnn_p.accumulate(&g.hgnn_p);
                grads.hgnn_g.accumulate(&g.hgnn_g);
            }
        } else {
            ls = spot_batch.loss();
            ln = neighbor_batch.loss();
        }
    }

    check_term(ls, "L^s (spot-level contrastive)")?;
    check_term(ln, "L^n (neighborhood contrastive)")?;
    check_term(mse, "L_MSE (translator regression)")?;
    let total = lambda1 * ls + lambda2 * ln + mse;
    check_term(total, "total")?;

    if let Some(grads) = grads.as_mut() {
        let denom = T::of(pred.len() as f64);
        let two = T::of(2.0);
        let d_pred = Matrix::from_vec(
            pred.rows(),
            pred.cols(),
            pred.as_slice()
                .iter()
                .zip(batch.exprs.as_slice())
                .map(|(&p, &y)| two * (p - y) / denom)
                .collect(),
        )?;
        let d_h = enc.phi_t.backward(&pred_cache, &d_pred, &mut grads.encoders.phi_t);
        d_hp.add_assign(&d_h);
        enc.phi_p.backward(&hp_cache, &d_hp, &mut grads.encoders.phi_p);
    }

    Ok((LossBreakdown { ls, ln, mse, total }, grads))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Predicted expression for one patch: translator applied to the pathology
/// embedding. Reads no gene data, neighbors or attention weights.
pub fn predict<T: Scalar>(params: &ModelParams<T>, patch: &[T]) -> Result<Vec<T>> {
    let h = params.encoders.encode_patch(patch)?;
    params.encoders.translate(&h)
}

/// Batched [`predict`] over the rows of `patches`.
pub fn predict_rows<T: Scalar>(params: &ModelParams<T>, patches: &Matrix<T>) -> Result<Matrix<T>> {
    let h = params.encoders.phi_p.forward(patches)?;
    params.encoders.phi_t.forward(&h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::numerics::grad_check;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            feature_dim: 8,
            patch_dim: 6,
            genes: 4,
            tokens: 2,
            neighbors: 3,
            layers: 2,
            tau_deg: 2,
            tau_temp: 0.5,
            batch_size: 3,
            ..TrainConfig::default()
        }
    }

    fn setup(cfg: &TrainConfig) -> (ModelParams<f64>, TrainData<f64>) {
        let ds = synth_generate(
            &SynthConfig {
                grid_side: 4,
                patch_dim: cfg.patch_dim,
                genes: cfg.genes,
                noise_sigma: 0.1,
                corr_len: 1.0,
                emit_counts: false,
            },
            3,
        )
        .unwrap();
        (
            ModelParams::init(cfg).unwrap(),
            TrainData::from_dataset(&ds, cfg.neighbors).unwrap(),
        )
    }

    #[test]
    fn mse_examples() {
        let y = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mse_loss(&y, &y).unwrap(), 0.0);
        assert_eq!(mse_loss(&y.map(|x| x + 1.0), &y).unwrap(), 1.0);
        assert_eq!(mse_loss(&Matrix::zeros(2, 2), &y).unwrap(), 7.5);
        assert!(mse_loss(&Matrix::zeros(2, 3), &y).is_err());
    }

    #[test]
    fn leaf_paths_are_unique_and_named() {
        let (p, _) = setup(&small_cfg());
        let tree = p.to_tree();
        assert!(tree.get("query.ca.p2g.Wq").is_some());
        assert!(tree.get("neighbor.hgnn_g.theta1").is_some());
        assert!(tree.get("encoders.phi_t.l2.b").is_some());
        assert_eq!(tree.len(), 12 + 12 + 4);
    }

    #[test]
    fn zero_weights_reduce_to_mse() {
        let cfg = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..small_cfg()
        };
        let (p, data) = setup(&cfg);
        let batch = SpotBatch::gather(&data, &[0, 5, 9]);
        let l = forward_batch(&p, &cfg, &batch).unwrap();
        assert_eq!(l.total, l.mse);
    }

    #[test]
    fn single_spot_batch_has_no_contrastive_terms() {
        let cfg = small_cfg();
        let (p, data) = setup(&cfg);
        let l = forward_batch(&p, &cfg, &SpotBatch::gather(&data, &[7])).unwrap();
        assert_eq!((l.ls, l.ln), (0.0, 0.0));
        assert_eq!(l.total, l.mse);
    }

    #[test]
    fn forward_and_forward_backward_agree() {
        let cfg = small_cfg();
        let (p, data) = setup(&cfg);
        let batch = SpotBatch::gather(&data, &[1, 2, 11]);
        let a = forward_batch(&p, &cfg, &batch).unwrap();
        let (b, _) = forward_backward(&p, &cfg, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_gradient_matches_finite_difference() {
        let cfg = small_cfg();
        let (p, data) = setup(&cfg);
        let batch = SpotBatch::gather(&data, &[0, 6, 10]);
        let (_, grads) = forward_backward(&p, &cfg, &batch).unwrap();
        let report = grad_check(
            |t| {
                let mut q = p.clone();
                q.load_tree(t)?;
                Ok(forward_batch(&q, &cfg, &batch)?.total)
            },
            &p.to_tree(),
            &grads.to_tree(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn predict_matches_training_path() {
        let cfg = small_cfg();
        let (p, data) = setup(&cfg);
        let rows = predict_rows(&p, &data.patches).unwrap();
        for i in 0..data.len() {
            assert_eq!(predict(&p, data.patches.row(i)).unwrap(), rows.row(i));
        }
    }

    #[test]
    fn runs_in_single_precision() {
        let cfg = small_cfg();
        let ds = synth_generate(
            &SynthConfig {
                grid_side: 4,
                patch_dim: 6,
                genes: 4,
                ..SynthConfig::default()
            },
            1,
        )
        .unwrap();
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        let data = TrainData::<f32>::from_dataset(&ds, cfg.neighbors).unwrap();
        let (l, g) = forward_backward(&p, &cfg, &SpotBatch::gather(&data, &[0, 1, 2, 3])).unwrap();
        assert!(l.total.is_finite());
        let mut finite = true;
        g.visit("", &mut |_, m| finite &= m.is_finite());
        assert!(finite);
    }
}
