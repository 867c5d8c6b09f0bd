//! GMM universal background model: EM training from a k-means start,
//! frame posteriors and Baum-Welch sufficient statistics.

use std::ops::{Add, AddAssign};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::numerics::{floor_eigenvalues, logsumexp_unchecked, symmetrize, Matrix, SpdFactor, Vector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Frames processed per E-step block.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Full,
    Diagonal,
}

/// A mixture covariance with its Cholesky factor cached.
#[derive(Debug, Clone)]
pub struct Covariance {
    matrix: Matrix,
    factor: SpdFactor,
    /// `1/sqrt(σ²)` per dimension when diagonal.
    inv_std: Option<Vector>,
}

impl Covariance {
    pub fn new(matrix: Matrix, kind: CovarianceKind) -> Result<Self> {
        let factor = SpdFactor::new(&matrix)?;
        let inv_std = match kind {
            CovarianceKind::Full => None,
            CovarianceKind::Diagonal => {
                let n = matrix.nrows();
                for j in 0..n {
                    for i in 0..n {
                        if i != j && matrix[(i, j)] != 0.0 {
                            return Err(Error::arg("diagonal covariance has off-diagonal entries"));
                        }
                    }
                }
                Some(matrix.diagonal().map(|v| 1.0 / v.sqrt()))
            }
        };
        Ok(Covariance {
            matrix,
            factor,
            inv_std,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn logdet(&self) -> f64 {
        self.factor.logdet()
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    pub fn is_diagonal(&self) -> bool {
        self.inv_std.is_some()
    }

    /// `Σ⁻¹ V`
    pub fn precision_mul(&self, v: &Matrix) -> Matrix {
        match &self.inv_std {
            Some(s) => {
                let mut out = v.clone();
                for (r, mut row) in out.row_iter_mut().enumerate() {
                    let p = s[r] * s[r];
                    row.iter_mut().for_each(|x| *x *= p);
                }
                out
            }
            None => self.factor.solve(v),
        }
    }

    pub fn precision_mul_vec(&self, v: &Vector) -> Vector {
        match &self.inv_std {
            Some(s) => v.component_mul(&s.component_mul(s)),
            None => self.factor.solve_vec(v),
        }
    }

    /// `V ← L⁻¹ V` with `Σ = L Lᵀ`.
    fn whiten_in_place(&self, v: &mut Matrix) {
        match &self.inv_std {
            Some(s) => {
                for (r, mut row) in v.row_iter_mut().enumerate() {
                    let p = s[r];
                    row.iter_mut().for_each(|x| *x *= p);
                }
            }
            None => self.factor.whiten_in_place(v),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmUbm {
    weights: Vec<f64>,
    /// `dim × n_mix`, one column per mixture.
    means: Matrix,
    covariances: Vec<Covariance>,
    kind: CovarianceKind,
    /// `ln w_c − ½(D ln 2π + ln|Σ_c|)`
    log_norm: Vec<f64>,
    /// Hashed once here; every stats accumulation stamps it.
    fingerprint: u64,
}

impl GmmUbm {
    pub fn new(
        weights: Vec<f64>,
        means: Matrix,
        covariances: Vec<Matrix>,
        kind: CovarianceKind,
    ) -> Result<Self> {
        let n_mix = weights.len();
        if n_mix == 0 || means.ncols() != n_mix || covariances.len() != n_mix {
            return Err(Error::arg(format!(
                "inconsistent GMM shapes: {} weights, {} mean columns, {} covariances",
                n_mix,
                means.ncols(),
                covariances.len()
            )));
        }
        let dim = means.nrows();
        if covariances.iter().any(|c| c.nrows() != dim || c.ncols() != dim) {
            return Err(Error::arg("covariance shape does not match the mean dimension"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-10 {
            return Err(Error::arg(format!("mixture weights must form a simplex (sum {total})")));
        }
        let covariances = covariances
            .into_iter()
            .map(|c| Covariance::new(c, kind))
            .collect::<Result<Vec<_>>>()?;
        let log_norm = weights
            .iter()
            .zip(&covariances)
            .map(|(w, c)| w.ln() - 0.5 * (dim as f64 * LN_2PI + c.logdet()))
            .collect();
        let mut ubm = GmmUbm {
            weights,
            means,
            covariances,
            kind,
            log_norm,
            fingerprint: 0,
        };
        ubm.fingerprint = ubm.hash_parameters();
        Ok(ubm)
    }

    pub fn n_mix(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn mean(&self, c: usize) -> Vector {
        self.means.column(c).into_owned()
    }

    pub fn covariance(&self, c: usize) -> &Covariance {
        &self.covariances[c]
    }

    pub fn covariance_kind(&self) -> CovarianceKind {
        self.kind
    }

    /// Stable identity of the parameters, used to bind downstream models.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn hash_parameters(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.n_mix() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        h.update([matches!(self.kind, CovarianceKind::Full) as u8]);
        for w in &self.weights {
            h.update(w.to_le_bytes());
        }
        for v in self.means.iter() {
            h.update(v.to_le_bytes());
        }
        for c in &self.covariances {
            for v in c.matrix.iter() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    /// Weighted per-mixture log densities `ln w_c + ln N(x_t; μ_c, Σ_c)`,
    /// `n_mix × frames`.
    pub fn log_densities(&self, x: &Matrix) -> Matrix {
        if self.kind == CovarianceKind::Diagonal {
            return self.diagonal_log_densities(x);
        }
        let rows: Vec<Vec<f64>> = (0..self.n_mix())
            .into_par_iter()
            .map(|c| {
                let mut d = x.clone();
                let mu = self.means.column(c);
                for mut col in d.column_iter_mut() {
                    col -= &mu;
                }
                self.covariances[c].whiten_in_place(&mut d);
                d.column_iter()
                    .map(|col| self.log_norm[c] - 0.5 * col.norm_squared())
                    .collect()
            })
            .collect();
        Matrix::from_fn(self.n_mix(), x.ncols(), |c, t| rows[c][t])
    }

    /// Same as the general path without a whitened copy per mixture.
    fn diagonal_log_densities(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n_mix(), x.ncols());
        for (c, cov) in self.covariances.iter().enumerate() {
            let inv_std = cov.inv_std.as_ref().expect("diagonal covariance");
            let mu = self.means.column(c);
            for (t, col) in x.column_iter().enumerate() {
                let mut q = 0.0;
                for d in 0..col.len() {
                    let z = (col[d] - mu[d]) * inv_std[d];
                    q += z * z;
                }
                out[(c, t)] = self.log_norm[c] - 0.5 * q;
            }
        }
        out
    }

    /// Responsibilities for each column of `x` plus the total log-likelihood.
    pub(crate) fn posteriors_and_ll(&self, x: &Matrix) -> (Matrix, f64) {
        let mut ld = self.log_densities(x);
        let mut ll = 0.0;
        let mut buf = vec![0.0; self.n_mix()];
        for mut col in ld.column_iter_mut() {
            buf.iter_mut().zip(col.iter()).for_each(|(b, v)| *b = *v);
            let lse = logsumexp_unchecked(&buf);
            ll += lse;
            col.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        (ld, ll)
    }

    /// Total log-likelihood of the retained frames of every utterance.
    pub fn log_likelihood(&self, features: &[FeatureMatrix]) -> f64 {
        self.posteriors_and_ll_chunked(&stack_retained(features))
    }
}

/// Frame responsibilities (`n_mix × frames`) for every frame of `feat`,
/// VAD mask notwithstanding.
pub fn frame_posteriors(ubm: &GmmUbm, feat: &FeatureMatrix) -> Result<Matrix> {
    if feat.dim() != ubm.dim() {
        return Err(Error::arg(format!(
            "features have dimension {} but the UBM expects {}",
            feat.dim(),
            ubm.dim()
        )));
    }
    Ok(ubm.posteriors_and_ll(&feat.values).0)
}

/// Zeroth- and centred first-order statistics of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchStats {
    /// `N_i`, occupancy per mixture.
    pub zeroth: Vector,
    /// `f̃_i`, stacked per mixture: segment `c` is `Σ_t γ_ct (x_t − μ_c)`.
    pub first: Vector,
    pub dim: usize,
    pub ubm_fingerprint: u64,
}

impl BaumWelchStats {
    pub fn n_mix(&self) -> usize {
        self.zeroth.len()
    }

    pub fn first_segment(&self, c: usize) -> nalgebra::DVectorView<'_, f64> {
        self.first.rows(c * self.dim, self.dim)
    }

    pub fn zeros(n_mix: usize, dim: usize, ubm_fingerprint: u64) -> Self {
        BaumWelchStats {
            zeroth: Vector::zeros(n_mix),
            first: Vector::zeros(n_mix * dim),
            dim,
            ubm_fingerprint,
        }
    }
}

impl AddAssign<&BaumWelchStats> for BaumWelchStats {
    fn add_assign(&mut self, rhs: &BaumWelchStats) {
        assert_eq!(self.ubm_fingerprint, rhs.ubm_fingerprint, "stats from different UBMs");
        self.zeroth += &rhs.zeroth;
        self.first += &rhs.first;
    }
}

impl Add for BaumWelchStats {
    type Output = BaumWelchStats;

    fn add(mut self, rhs: BaumWelchStats) -> BaumWelchStats {
        self += &rhs;
        self
    }
}

/// Centred Baum-Welch statistics over the retained frames of `feat`.
pub fn accumulate_stats(ubm: &GmmUbm, feat: &FeatureMatrix) -> Result<BaumWelchStats> {
    if feat.dim() != ubm.dim() {
        return Err(Error::arg(format!(
            "features have dimension {} but the UBM expects {}",
            feat.dim(),
            ubm.dim()
        )));
    }
    if feat.retained_count() == 0 {
        return Err(Error::EmptyInput("utterance has no retained frames".into()));
    }
    let x = feat.retained_values();
    let (gamma, _) = ubm.posteriors_and_ll(&x);
    Ok(stats_from_posteriors(ubm, &x, &gamma))
}

pub(crate) fn stats_from_posteriors(ubm: &GmmUbm, x: &Matrix, gamma: &Matrix) -> BaumWelchStats {
    let dim = ubm.dim();
    let mut stats = BaumWelchStats::zeros(ubm.n_mix(), dim, ubm.fingerprint());
    for c in 0..ubm.n_mix() {
        let g = gamma.row(c);
        stats.zeroth[c] = g.sum();
        let mu = ubm.means.column(c);
        let mut seg = stats.first.rows_mut(c * dim, dim);
        for (t, col) in x.column_iter().enumerate() {
            let w = g[t];
            if w != 0.0 {
                for d in 0..dim {
                    seg[d] += w * (col[d] - mu[d]);
                }
            }
        }
    }
    stats
}

fn stack_retained(features: &[FeatureMatrix]) -> Matrix {
    let dim = features.first().map_or(0, |f| f.dim());
    let total: usize = features.iter().map(|f| f.retained_count()).sum();
    let mut out = Matrix::zeros(dim, total);
    let mut k = 0;
    for f in features {
        for t in f.retained_frames() {
            out.set_column(k, &f.values.column(t));
            k += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UbmConfig {
    pub n_mix: usize,
    pub covariance: CovarianceKind,
    pub iters: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for UbmConfig {
    fn default() -> Self {
        UbmConfig {
            n_mix: 32,
            covariance: CovarianceKind::Full,
            iters: 10,
            kmeans_iters: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UbmTraining {
    pub model: GmmUbm,
    /// Log-likelihood of the initial model followed by one entry per EM iteration.
    pub log_likelihoods: Vec<f64>,
    pub reseeded: usize,
}

/// EM training of a GMM from k-means initialisation.
pub fn train_ubm(features: &[FeatureMatrix], cfg: &UbmConfig) -> Result<UbmTraining> {
    let Some(first) = features.first() else {
        return Err(Error::Training("no utterances to train the UBM on".into()));
    };
    let dim = first.dim();
    if features.iter().any(|f| f.dim() != dim) {
        return Err(Error::arg("utterances have mixed feature dimensions"));
    }
    if cfg.n_mix == 0 {
        return Err(Error::arg("n_mix must be positive"));
    }
    let data = stack_retained(features);
    let n = data.ncols();
    let needed = 10 * cfg.n_mix * dim;
    if n < needed {
        return Err(Error::Training(format!(
            "{n} retained frames but {} mixtures of dimension {dim} need at least {needed}",
            cfg.n_mix
        )));
    }

    let floor = covariance_floor(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centroids = kmeans(&data, cfg.n_mix, cfg.kmeans_iters, &mut rng);
    let mut model = initial_model(&data, &centroids, cfg.covariance, floor)?;

    let mut reseeded = 0;
    let mut lls = Vec::with_capacity(cfg.iters + 1);
    for _ in 0..cfg.iters {
        let acc = accumulate_em(&model, &data);
        lls.push(acc.ll);
        let (next, r) = m_step(&model, &acc, cfg.covariance, floor)?;
        reseeded += r;
        model = next;
    }
    lls.push(model.posteriors_and_ll_chunked(&data));
    Ok(UbmTraining {
        model,
        log_likelihoods: lls,
        reseeded,
    })
}

impl GmmUbm {
    fn posteriors_and_ll_chunked(&self, data: &Matrix) -> f64 {
        let mut ll = 0.0;
        for start in (0..data.ncols()).step_by(CHUNK) {
            let n = CHUNK.min(data.ncols() - start);
            ll += self.posteriors_and_ll(&data.columns(start, n).into_owned()).1;
        }
        ll
    }
}

fn covariance_floor(data: &Matrix) -> f64 {
    let n = data.ncols() as f64;
    let mean = data.column_mean();
    let avg_var = data
        .row_iter()
        .zip(mean.iter())
        .map(|(r, m)| r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
        .sum::<f64>()
        / data.nrows() as f64;
    (1e-4 * avg_var).max(1e-12)
}

fn sq_dist(a: nalgebra::DVectorView<'_, f64>, b: nalgebra::DVectorView<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-point seeding followed by Lloyd iterations.
fn kmeans(data: &Matrix, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.ncols();
    let mut centroids = Matrix::zeros(data.nrows(), k);
    centroids.set_column(0, &data.column(rng.random_range(0..n)));
    let mut min_d: Vec<f64> = (0..n)
        .map(|t| sq_dist(data.column(t), centroids.column(0)))
        .collect();
    for j in 1..k {
        let far = (0..n)
            .max_by(|&a, &b| min_d[a].total_cmp(&min_d[b]).then(b.cmp(&a)))
            .unwrap();
        centroids.set_column(j, &data.column(far));
        for t in 0..n {
            min_d[t] = min_d[t].min(sq_dist(data.column(t), centroids.column(j)));
        }
    }
    for _ in 0..iters {
        let assign = assign_nearest(data, &centroids);
        let mut sums = Matrix::zeros(data.nrows(), k);
        let mut counts = vec![0usize; k];
        for (t, &a) in assign.iter().enumerate() {
            let mut col = sums.column_mut(a);
            col += data.column(t);
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids.set_column(j, &(sums.column(j) / counts[j] as f64));
            }
        }
    }
    centroids
}

fn assign_nearest(data: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..data.ncols())
        .into_par_iter()
        .map(|t| {
            let x = data.column(t);
            (0..centroids.ncols())
                .min_by(|&a, &b| {
                    sq_dist(x, centroids.column(a)).total_cmp(&sq_dist(x, centroids.column(b)))
                })
                .unwrap()
        })
        .collect()
}

fn floor_covariance(mut s: Matrix, kind: CovarianceKind, floor: f64) -> Matrix {
    match kind {
        CovarianceKind::Diagonal => {
            let d = s.diagonal().map(|v| v.max(floor));
            Matrix::from_diagonal(&d)
        }
        CovarianceKind::Full => {
            symmetrize(&mut s);
            floor_eigenvalues(&s, floor).0
        }
    }
}

fn initial_model(
    data: &Matrix,
    centroids: &Matrix,
    kind: CovarianceKind,
    floor: f64,
) -> Result<GmmUbm> {
    let k = centroids.ncols();
    let dim = data.nrows();
    let assign = assign_nearest(data, centroids);
    let n = data.ncols() as f64;
    let global_mean = data.column_mean();
    let mut global = Matrix::zeros(dim, dim);
    for col in data.column_iter() {
        let d = col - &global_mean;
        global += &d * d.transpose();
    }
    global /= n;

    let mut counts = vec![0usize; k];
    let mut means = Matrix::zeros(dim, k);
    let mut scatter = vec![Matrix::zeros(dim, dim); k];
    for (t, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        let mut m = means.column_mut(a);
        m += data.column(t);
    }
    for j in 0..k {
        if counts[j] > 0 {
            let m = means.column(j) / counts[j] as f64;
            means.set_column(j, &m);
        } else {
            means.set_column(j, &centroids.column(j));
        }
    }
    for (t, &a) in assign.iter().enumerate() {
        let d = data.column(t) - means.column(a);
        scatter[a] += &d * d.transpose();
    }
    let mut weights = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        // empty clusters still need a small positive weight to stay in the simplex
        weights.push((counts[j] as f64).max(1.0));
        let cov = if counts[j] >= 2 {
            &scatter[j] / counts[j] as f64
        } else {
            global.clone()
        };
        covs.push(floor_covariance(cov, kind, floor));
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GmmUbm::new(weights, means, covs, kind)
}

struct EmAccumulators {
    occupancy: Vec<f64>,
    first: Matrix,
    second: Vec<Matrix>,
    ll: f64,
}

fn accumulate_em(model: &GmmUbm, data: &Matrix) -> EmAccumulators {
    let k = model.n_mix();
    let dim = model.dim();
    let mut acc = EmAccumulators {
        occupancy: vec![0.0; k],
        first: Matrix::zeros(dim, k),
        second: vec![Matrix::zeros(dim, dim); k],
        ll: 0.0,
    };
    for start in (0..data.ncols()).step_by(CHUNK) {
        let n = CHUNK.min(data.ncols() - start);
        let x = data.columns(start, n).into_owned();
        let (gamma, ll) = model.posteriors_and_ll(&x);
        acc.ll += ll;
        acc.first += &x * gamma.transpose();
        let diag = model.kind == CovarianceKind::Diagonal;
        let seconds: Vec<(f64, Matrix)> = (0..k)
            .into_par_iter()
            .map(|c| {
                let g = gamma.row(c);
                if diag {
                    let mut s = Vector::zeros(dim);
                    for (t, col) in x.column_iter().enumerate() {
                        s.axpy(g[t], &col.component_mul(&col), 1.0);
                    }
                    (g.sum(), Matrix::from_diagonal(&s))
                } else {
                    let mut xw = x.clone();
                    for (t, mut col) in xw.column_iter_mut().enumerate() {
                        col *= g[t];
                    }
                    (g.sum(), xw * x.transpose())
                }
            })
            .collect();
        for (c, (occ, s)) in seconds.into_iter().enumerate() {
            acc.occupancy[c] += occ;
            acc.second[c] += s;
        }
    }
    acc
}

fn m_step(
    model: &GmmUbm,
    acc: &EmAccumulators,
    kind: CovarianceKind,
    floor: f64,
) -> Result<(GmmUbm, usize)> {
    let k = model.n_mix();
    let dim = model.dim();
    let total: f64 = acc.occupancy.iter().sum();
    let mut weights = vec![0.0; k];
    let mut means = Matrix::zeros(dim, k);
    let mut covs = vec![Matrix::zeros(dim, dim); k];
    let mut collapsed = Vec::new();
    for c in 0..k {
        let occ = acc.occupancy[c];
        if occ < 1.0 {
            collapsed.push(c);
            continue;
        }
        weights[c] = occ / total;
        let mu = acc.first.column(c) / occ;
        let mut cov = &acc.second[c] / occ - &mu * mu.transpose();
        if kind == CovarianceKind::Diagonal {
            cov = Matrix::from_diagonal(&cov.diagonal());
        }
        covs[c] = floor_covariance(cov, kind, floor);
        means.set_column(c, &mu);
    }
    let reseeded = collapsed.len();
    for c in collapsed {
        let donor = (0..k)
            .filter(|&j| weights[j] > 0.0)
            .max_by(|&a, &b| weights[a].total_cmp(&weights[b]))
            .ok_or_else(|| Error::Training("every mixture collapsed".into()))?;
        warn!("UBM mixture {c} collapsed; re-seeding it by splitting mixture {donor}");
        let spread = covs[donor].diagonal().map(|v| 0.1 * v.sqrt());
        let mu = means.column(donor).into_owned();
        means.set_column(c, &(&mu + &spread));
        means.set_column(donor, &(&mu - &spread));
        weights[donor] /= 2.0;
        weights[c] = weights[donor];
        covs[c] = covs[donor].clone();
    }
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    Ok((GmmUbm::new(weights, means, covs, kind)?, reseeded))
}
