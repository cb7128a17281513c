use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{SpotRecord, StDataset};
use crate::error::{Error, Result};
use crate::numerics::{softplus, Matrix};

/// Parameters of the synthetic spot generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Spots lie on a `grid_side × grid_side` integer grid.
    pub grid_side: usize,
    pub patch_dim: usize,
    pub genes: usize,
    /// Standard deviation of the additive noise before the softplus.
    pub noise_sigma: f64,
    /// Gaussian smoothing length of the noise field, in grid units. Zero
    /// gives independent noise per spot.
    pub corr_len: f64,
    /// Emit raw counts `expm1(value)` instead of normalized values.
    pub emit_counts: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_side: 8,
            patch_dim: 128,
            genes: 32,
            noise_sigma: 0.05,
            corr_len: 1.5,
            emit_counts: false,
        }
    }
}

/// Generates a dataset whose expression is `softplus(A · patch + noise)` for a
/// hidden `n × P` map `A` stored on the dataset.
///
/// Patches are standard normal values rounded to `f32` so they survive the
/// 32-bit patch file unchanged. `A` has entries drawn from `N(0, 1/P)`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<StDataset> {
    if cfg.grid_side == 0 || cfg.patch_dim == 0 || cfg.genes == 0 {
        return Err(Error::invalid(format!(
            "synthetic dimensions must be positive: {cfg:?}"
        )));
    }
    if !cfg.noise_sigma.is_finite() || cfg.noise_sigma < 0.0 {
        return Err(Error::invalid("noise sigma must be finite and non-negative"));
    }
    if !cfg.corr_len.is_finite() || cfg.corr_len < 0.0 {
        return Err(Error::invalid("correlation length must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.grid_side;
    let m = side * side;
    let (p, n) = (cfg.patch_dim, cfg.genes);

    let scale = 1.0 / (p as f64).sqrt();
    let map_data: Vec<f64> = (0..n * p)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    let map = Matrix::from_vec(n, p, map_data)?;

    let coords: Vec<(f64, f64)> = (0..m).map(|i| ((i % side) as f64, (i / side) as f64)).collect();
    let patches: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            (0..p)
                .map(|_| f64::from(rng.sample::<f64, _>(StandardNormal) as f32))
                .collect()
        })
        .collect();

    let noise = if cfg.noise_sigma > 0.0 {
        let white: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Some(smooth_noise(&coords, &white, cfg.corr_len, cfg.noise_sigma))
    } else {
        None
    };

    let width = (m.max(1) - 1).to_string().len();
    let spots = (0..m)
        .map(|i| {
            let expr = (0..n)
                .map(|g| {
                    let mut pre: f64 = map.row(g).iter().zip(&patches[i]).map(|(a, x)| a * x).sum();
                    if let Some(noise) = &noise {
                        pre += noise[i][g];
                    }
                    let v = softplus(pre);
                    if cfg.emit_counts {
                        v.exp_m1()
                    } else {
                        v
                    }
                })
                .collect();
            SpotRecord {
                spot_id: format!("spot{i:0width$}"),
                coord: coords[i],
                patch: patches[i].clone(),
                expr,
            }
        })
        .collect();
    let gene_width = (n.max(1) - 1).to_string().len();
    let names = (0..n).map(|g| format!("G{g:0gene_width$}")).collect();
    StDataset::new(spots, names, p, !cfg.emit_counts)?.with_planted_map(map)
}

/// Gaussian-kernel smoothing of per-spot white noise, rescaled so each entry
/// keeps marginal standard deviation `sigma`.
fn smooth_noise(coords: &[(f64, f64)], white: &[Vec<f64>], corr_len: f64, sigma: f64) -> Vec<Vec<f64>> {
    let n = white.first().map_or(0, Vec::len);
    if corr_len == 0.0 {
        return white.iter().map(|r| r.iter().map(|x| x * sigma).collect()).collect();
    }
    let two_l2 = 2.0 * corr_len * corr_len;
    coords
        .iter()
        .map(|&(xi, yi)| {
            let mut acc = vec![0.0; n];
            let mut sq = 0.0;
            for (&(xj, yj), w_row) in coords.iter().zip(white) {
                let d2 = (xi - xj).powi(2) + (yi - yj).powi(2);
                let w = (-d2 / two_l2).exp();
                sq += w * w;
                for (a, &z) in acc.iter_mut().zip(w_row) {
                    *a += w * z;
                }
            }
            let norm = sigma / sq.sqrt();
            acc.into_iter().map(|a| a * norm).collect()
        })
        .collect()
}
