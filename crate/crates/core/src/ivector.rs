//! Total variability model: EM training of `T` and i-vector extraction as the
//! posterior mean `ω = L⁻¹ Tᵀ Σ⁻¹ f̃`, `L = I + Σ_c N_c T_cᵀ Σ_c⁻¹ T_c`.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{BaumWelchStats, GmmUbm};
use crate::numerics::{all_finite, Matrix, SpdFactor, Vector};

const M_STEP_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TotalVariabilityModel {
    /// `(n_mix·dim) × ivec_dim`
    t: Matrix,
    n_mix: usize,
    dim: usize,
    ubm_fingerprint: u64,
    /// `Σ_c⁻¹ T_c` per mixture.
    precision_t: Vec<Matrix>,
    /// `T_cᵀ Σ_c⁻¹ T_c` per mixture.
    gram: Vec<Matrix>,
}

impl TotalVariabilityModel {
    /// Binds `t` to `ubm`, caching the per-mixture precision products.
    pub fn new(t: Matrix, ubm: &GmmUbm) -> Result<Self> {
        let (n_mix, dim) = (ubm.n_mix(), ubm.dim());
        if t.nrows() != n_mix * dim || t.ncols() == 0 {
            return Err(Error::arg(format!(
                "T is {}x{} but the UBM supervector has {} rows",
                t.nrows(),
                t.ncols(),
                n_mix * dim
            )));
        }
        if !all_finite(&t) {
            return Err(Error::arg("T has non-finite entries"));
        }
        let (precision_t, gram): (Vec<_>, Vec<_>) = (0..n_mix)
            .map(|c| {
                let block = t.rows(c * dim, dim).into_owned();
                let pt = ubm.covariance(c).precision_mul(&block);
                let g = block.transpose() * &pt;
                (pt, g)
            })
            .unzip();
        Ok(TotalVariabilityModel {
            t,
            n_mix,
            dim,
            ubm_fingerprint: ubm.fingerprint(),
            precision_t,
            gram,
        })
    }

    pub fn t_matrix(&self) -> &Matrix {
        &self.t
    }

    pub fn ivec_dim(&self) -> usize {
        self.t.ncols()
    }

    pub fn ubm_fingerprint(&self) -> u64 {
        self.ubm_fingerprint
    }

    pub fn n_mix(&self) -> usize {
        self.n_mix
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub(crate) fn precision_t(&self, c: usize) -> &Matrix {
        &self.precision_t[c]
    }

    pub(crate) fn gram(&self, c: usize) -> &Matrix {
        &self.gram[c]
    }

    fn check_binding(&self, stats: &BaumWelchStats) -> Result<()> {
        if stats.ubm_fingerprint != self.ubm_fingerprint {
            return Err(Error::Binding(format!(
                "statistics come from UBM {:016x} but T is bound to {:016x}",
                stats.ubm_fingerprint, self.ubm_fingerprint
            )));
        }
        if stats.n_mix() != self.n_mix || stats.dim != self.dim {
            return Err(Error::Binding("statistics shape does not match T".into()));
        }
        Ok(())
    }

    /// `L = I + Σ_c N_c T_cᵀ Σ_c⁻¹ T_c`
    pub fn precision(&self, zeroth: &Vector) -> Matrix {
        let r = self.ivec_dim();
        let mut l = Matrix::identity(r, r);
        for c in 0..self.n_mix {
            if zeroth[c] != 0.0 {
                l += &self.gram[c] * zeroth[c];
            }
        }
        l
    }

    /// `Tᵀ Σ⁻¹ f̃`
    pub fn projected_first_order(&self, stats: &BaumWelchStats) -> Vector {
        let mut b = Vector::zeros(self.ivec_dim());
        for c in 0..self.n_mix {
            b.gemv_tr(1.0, &self.precision_t[c], &stats.first_segment(c), 1.0);
        }
        b
    }
}

/// Posterior of the total-variability factor for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct IvectorPosterior {
    /// `L_i`
    pub precision: Matrix,
    /// `ω_i`
    pub mean: Vector,
}

pub fn extract_ivector(tv: &TotalVariabilityModel, stats: &BaumWelchStats) -> Result<IvectorPosterior> {
    tv.check_binding(stats)?;
    let precision = tv.precision(&stats.zeroth);
    let b = tv.projected_first_order(stats);
    let mean = SpdFactor::new(&precision)?.solve_vec(&b);
    Ok(IvectorPosterior { precision, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvConfig {
    pub ivec_dim: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            ivec_dim: 400,
            iters: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TvTraining {
    pub model: TotalVariabilityModel,
    /// `Σ_i ½ bᵢᵀ Lᵢ⁻¹ bᵢ − ½ ln|Lᵢ|` before training and after each iteration;
    /// this is the T-dependent part of the marginal log-likelihood.
    pub objective: Vec<f64>,
    pub ridged_blocks: usize,
}

struct UttPosterior {
    mean: Vector,
    second: Matrix,
    objective: f64,
}

fn e_step(tv: &TotalVariabilityModel, stats: &BaumWelchStats) -> Result<UttPosterior> {
    let l = tv.precision(&stats.zeroth);
    let b = tv.projected_first_order(stats);
    let f = SpdFactor::new(&l)?;
    let mean = f.solve_vec(&b);
    let cov = f.inverse();
    let objective = 0.5 * b.dot(&mean) - 0.5 * f.logdet();
    let second = cov + &mean * mean.transpose();
    Ok(UttPosterior {
        mean,
        second,
        objective,
    })
}

fn posteriors(tv: &TotalVariabilityModel, stats_list: &[BaumWelchStats]) -> Result<Vec<UttPosterior>> {
    stats_list.par_iter().map(|s| e_step(tv, s)).collect()
}

/// Plain EM for `T` over fixed Baum-Welch statistics.
pub fn train_total_variability(
    ubm: &GmmUbm,
    stats_list: &[BaumWelchStats],
    cfg: &TvConfig,
) -> Result<TvTraining> {
    if cfg.ivec_dim == 0 {
        return Err(Error::arg("ivec_dim must be positive"));
    }
    if stats_list.is_empty() {
        return Err(Error::Training("no utterance statistics".into()));
    }
    let (n_mix, dim, r) = (ubm.n_mix(), ubm.dim(), cfg.ivec_dim);
    let avg_var = (0..n_mix)
        .map(|c| ubm.covariance(c).matrix().diagonal().mean())
        .sum::<f64>()
        / n_mix as f64;
    let scale = 0.1 * avg_var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t0 = Matrix::from_fn(n_mix * dim, r, |_, _| {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let mut model = TotalVariabilityModel::new(t0, ubm)?;
    for s in stats_list {
        model.check_binding(s)?;
    }

    let mut objective = Vec::with_capacity(cfg.iters + 1);
    let mut ridged_blocks = 0;
    for _ in 0..cfg.iters {
        let post = posteriors(&model, stats_list)?;
        objective.push(post.iter().map(|p| p.objective).sum());

        let mut a = vec![Matrix::zeros(r, r); n_mix];
        let mut c_acc = Matrix::zeros(n_mix * dim, r);
        for (s, p) in stats_list.iter().zip(&post) {
            for c in 0..n_mix {
                if s.zeroth[c] != 0.0 {
                    a[c] += &p.second * s.zeroth[c];
                }
            }
            c_acc.ger(1.0, &s.first, &p.mean, 1.0);
        }
        let mut t = Matrix::zeros(n_mix * dim, r);
        for c in 0..n_mix {
            let factor = match SpdFactor::new(&a[c]) {
                Ok(f) => f,
                Err(_) => {
                    warn!("T-matrix M-step for mixture {c} is singular; adding ridge {M_STEP_RIDGE}");
                    ridged_blocks += 1;
                    SpdFactor::new(&(&a[c] + Matrix::identity(r, r) * M_STEP_RIDGE))?
                }
            };
            // T_c = C_c A_c⁻¹  ⇔  A_c T_cᵀ = C_cᵀ
            let rhs = c_acc.rows(c * dim, dim).transpose();
            let block = factor.solve(&rhs).transpose();
            t.rows_mut(c * dim, dim).copy_from(&block);
        }
        model = TotalVariabilityModel::new(t, ubm)?;
    }
    if cfg.iters > 0 || objective.is_empty() {
        let post = posteriors(&model, stats_list)?;
        objective.push(post.iter().map(|p| p.objective).sum());
    }
    Ok(TvTraining {
        model,
        objective,
        ridged_blocks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Ivector,
    Xvector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub kind: EmbeddingKind,
    pub values: Vector,
    pub normalized: bool,
}

impl SpeakerEmbedding {
    pub fn new(kind: EmbeddingKind, values: Vector) -> Self {
        SpeakerEmbedding {
            kind,
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// `(ω − mean) / ‖ω − mean‖₂`
pub fn center_and_length_normalize(emb: &SpeakerEmbedding, mean: &Vector) -> Result<SpeakerEmbedding> {
    if emb.dim() != mean.len() {
        return Err(Error::arg(format!(
            "embedding has dimension {} but the centering mean has {}",
            emb.dim(),
            mean.len()
        )));
    }
    length_normalize(&SpeakerEmbedding::new(emb.kind, &emb.values - mean))
}

pub fn length_normalize(emb: &SpeakerEmbedding) -> Result<SpeakerEmbedding> {
    let norm = emb.values.norm();
    if !(norm > 0.0) {
        return Err(Error::ZeroNorm);
    }
    Ok(SpeakerEmbedding {
        kind: emb.kind,
        values: &emb.values / norm,
        normalized: true,
    })
}

/// Mean of a set of raw embeddings, used for centering.
pub fn embedding_mean(embs: &[SpeakerEmbedding]) -> Result<Vector> {
    let first = embs
        .first()
        .ok_or_else(|| Error::EmptyInput("no embeddings to average".into()))?;
    let mut m = Vector::zeros(first.dim());
    for e in embs {
        if e.dim() != first.dim() {
            return Err(Error::arg("embeddings have mixed dimensions"));
        }
        m += &e.values;
    }
    Ok(m / embs.len() as f64)
}
