//! Simplified PLDA (`ω = m + Φβ + ε`, full residual covariance) with EM
//! training and closed-form log-likelihood-ratio scoring, plus the LDA
//! projection used by the x-vector backend.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ivector::SpeakerEmbedding;
use crate::numerics::{floor_eigenvalues, symmetrize, Matrix, SpdFactor, Vector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Precomputed quadratic-form coefficients for
/// `S = c + ½x₁ᵀQx₁ + ½x₂ᵀQx₂ + x₁ᵀPx₂` with `xᵢ = ωᵢ − m`.
#[derive(Debug, Clone)]
struct PairScorer {
    q: Matrix,
    p: Matrix,
    constant: f64,
}

#[derive(Debug, Clone)]
pub struct PldaModel {
    mean: Vector,
    phi: Matrix,
    sigma: Matrix,
    scorer: PairScorer,
}

impl PldaModel {
    pub fn new(mean: Vector, phi: Matrix, sigma: Matrix) -> Result<Self> {
        let d = mean.len();
        if phi.nrows() != d || sigma.shape() != (d, d) {
            return Err(Error::arg(format!(
                "PLDA shapes disagree: mean {d}, Φ {:?}, Σ {:?}",
                phi.shape(),
                sigma.shape()
            )));
        }
        if phi.ncols() > d {
            return Err(Error::arg("PLDA has more factors than dimensions"));
        }
        let between = &phi * phi.transpose();
        let total = &between + &sigma;
        let mut joint = Matrix::zeros(2 * d, 2 * d);
        joint.view_mut((0, 0), (d, d)).copy_from(&total);
        joint.view_mut((d, d), (d, d)).copy_from(&total);
        joint.view_mut((0, d), (d, d)).copy_from(&between);
        joint.view_mut((d, 0), (d, d)).copy_from(&between);

        let total_f = SpdFactor::new(&total)?;
        let joint_f = SpdFactor::new(&joint)?;
        let joint_inv = joint_f.inverse();
        let mut q = total_f.inverse() - joint_inv.view((0, 0), (d, d));
        let mut p = -joint_inv.view((0, d), (d, d)).into_owned();
        symmetrize(&mut q);
        symmetrize(&mut p);
        let constant = -0.5 * joint_f.logdet() + total_f.logdet();
        Ok(PldaModel {
            mean,
            phi,
            sigma,
            scorer: PairScorer { q, p, constant },
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_factors(&self) -> usize {
        self.phi.ncols()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn phi(&self) -> &Matrix {
        &self.phi
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    fn check(&self, v: &Vector) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::arg(format!(
                "embedding has dimension {} but PLDA expects {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Log-likelihood ratio of same- versus different-speaker hypotheses.
    pub fn score(&self, enroll: &Vector, test: &Vector) -> Result<f64> {
        self.check(enroll)?;
        self.check(test)?;
        let x1 = enroll - &self.mean;
        let x2 = test - &self.mean;
        let s = &self.scorer;
        Ok(s.constant
            + 0.5 * x1.dot(&(&s.q * &x1))
            + 0.5 * x2.dot(&(&s.q * &x2))
            + x1.dot(&(&s.p * &x2)))
    }

    /// `∂S/∂test`
    pub fn score_gradient(&self, enroll: &Vector, test: &Vector) -> Result<Vector> {
        self.check(enroll)?;
        self.check(test)?;
        let x1 = enroll - &self.mean;
        let x2 = test - &self.mean;
        Ok(&self.scorer.q * x2 + &self.scorer.p * x1)
    }

    /// Marginal log-likelihood of grouped data.
    pub fn log_likelihood(&self, embeddings: &[Vector], labels: &[usize]) -> Result<f64> {
        let groups = group(embeddings, labels)?;
        let sf = SpdFactor::new(&self.sigma)?;
        Ok(marginal_ll(&self.mean, &self.phi, &sf, &groups, embeddings))
    }
}

pub fn score_pair(model: &PldaModel, e1: &SpeakerEmbedding, e2: &SpeakerEmbedding) -> Result<f64> {
    model.score(&e1.values, &e2.values)
}

fn group(embeddings: &[Vector], labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    if embeddings.len() != labels.len() {
        return Err(Error::arg("embeddings and labels differ in length"));
    }
    if let Some(first) = embeddings.first() {
        if embeddings.iter().any(|e| e.len() != first.len()) {
            return Err(Error::arg("embeddings have mixed dimensions"));
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    Ok(groups)
}

fn marginal_ll(
    mean: &Vector,
    phi: &Matrix,
    sigma: &SpdFactor,
    groups: &BTreeMap<usize, Vec<usize>>,
    embeddings: &[Vector],
) -> f64 {
    let d = mean.len() as f64;
    let q = phi.ncols();
    let sigma_inv_phi = sigma.solve(phi);
    let g = phi.transpose() * &sigma_inv_phi;
    let logdet_sigma = sigma.logdet();
    let mut cache: BTreeMap<usize, SpdFactor> = BTreeMap::new();
    let mut ll = 0.0;
    for members in groups.values() {
        let n = members.len();
        let pf = cache.entry(n).or_insert_with(|| {
            SpdFactor::new(&(Matrix::identity(q, q) + &g * n as f64)).expect("I + nG is SPD")
        });
        let mut h = Vector::zeros(mean.len());
        let mut quad = 0.0;
        for &i in members {
            let x = &embeddings[i] - mean;
            quad += x.dot(&sigma.solve_vec(&x));
            h += x;
        }
        let u = sigma_inv_phi.transpose() * &h;
        let correction = u.dot(&pf.solve_vec(&u));
        ll -= 0.5 * (n as f64 * (d * LN_2PI + logdet_sigma) + pf.logdet() + quad - correction);
    }
    ll
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PldaConfig {
    /// Speaker subspace rank; `None` uses the embedding dimension.
    pub n_factors: Option<usize>,
    pub iters: usize,
}

impl Default for PldaConfig {
    fn default() -> Self {
        PldaConfig {
            n_factors: None,
            iters: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PldaTraining {
    pub model: PldaModel,
    /// Marginal log-likelihood at initialisation and after each iteration.
    pub log_likelihoods: Vec<f64>,
}

/// EM for `Φ` and `Σ` with exact multi-session speaker posteriors; `m` is the
/// global mean.
pub fn train_plda(
    embeddings: &[Vector],
    labels: &[usize],
    n_factors: usize,
    iters: usize,
) -> Result<PldaTraining> {
    let groups = group(embeddings, labels)?;
    if groups.len() < 2 {
        return Err(Error::Training(
            "PLDA needs at least two speakers (degenerate training set)".into(),
        ));
    }
    if groups.values().all(|g| g.len() < 2) {
        return Err(Error::Training(
            "PLDA needs at least one speaker with two or more embeddings".into(),
        ));
    }
    let d = embeddings[0].len();
    if n_factors == 0 || n_factors > d {
        return Err(Error::arg(format!("n_factors must be in 1..={d}, got {n_factors}")));
    }
    let n_total = embeddings.len() as f64;
    let mean = embeddings.iter().fold(Vector::zeros(d), |a, e| a + e) / n_total;
    let centered: Vec<Vector> = embeddings.iter().map(|e| e - &mean).collect();

    let mut scatter = Matrix::zeros(d, d);
    for x in &centered {
        scatter.ger(1.0, x, x, 1.0);
    }
    let floor = (1e-6 * scatter.trace() / (n_total * d as f64)).max(1e-12);

    // initialisation from between/within speaker scatter
    let mut within = Matrix::zeros(d, d);
    let mut between = Matrix::zeros(d, d);
    for members in groups.values() {
        let mu = members.iter().fold(Vector::zeros(d), |a, &i| a + &centered[i]) / members.len() as f64;
        between.ger(members.len() as f64, &mu, &mu, 1.0);
        for &i in members {
            let r = &centered[i] - &mu;
            within.ger(1.0, &r, &r, 1.0);
        }
    }
    within /= n_total;
    between /= n_total;
    symmetrize(&mut between);
    let eig = between.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut phi = Matrix::zeros(d, n_factors);
    for (j, &k) in order.iter().take(n_factors).enumerate() {
        let scale = eig.eigenvalues[k].max(0.0).sqrt();
        phi.set_column(j, &(eig.eigenvectors.column(k) * scale));
    }
    let mut sigma = floor_eigenvalues(&within, floor).0;

    let zero = Vector::zeros(d);
    let mut lls = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let sf = SpdFactor::new(&sigma)?;
        lls.push(marginal_ll(&zero, &phi, &sf, &groups, &centered));

        let sigma_inv_phi = sf.solve(&phi);
        let g = phi.transpose() * &sigma_inv_phi;
        let mut r_acc = Matrix::zeros(n_factors, n_factors);
        let mut c_acc = Matrix::zeros(d, n_factors);
        let mut cache: BTreeMap<usize, (SpdFactor, Matrix)> = BTreeMap::new();
        for members in groups.values() {
            let n = members.len();
            let (pf, pinv) = cache.entry(n).or_insert_with(|| {
                let f = SpdFactor::new(&(Matrix::identity(n_factors, n_factors) + &g * n as f64))
                    .expect("I + nG is SPD");
                let inv = f.inverse();
                (f, inv)
            });
            let h = members.iter().fold(Vector::zeros(d), |a, &i| a + &centered[i]);
            let eb = pf.solve_vec(&(sigma_inv_phi.transpose() * &h));
            let ebb = &*pinv + &eb * eb.transpose();
            r_acc += ebb * n as f64;
            c_acc.ger(1.0, &h, &eb, 1.0);
        }
        let rf = SpdFactor::new(&r_acc)?;
        phi = rf.solve(&c_acc.transpose()).transpose();
        let mut s = (&scatter - &phi * c_acc.transpose()) / n_total;
        symmetrize(&mut s);
        sigma = floor_eigenvalues(&s, floor).0;
    }
    let sf = SpdFactor::new(&sigma)?;
    lls.push(marginal_ll(&zero, &phi, &sf, &groups, &centered));
    Ok(PldaTraining {
        model: PldaModel::new(mean, phi, sigma)?,
        log_likelihoods: lls,
    })
}

/// Linear projection `y = A x`, `A` is `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaProjection {
    pub matrix: Matrix,
}

impl LdaProjection {
    pub fn identity(dim: usize) -> Self {
        LdaProjection {
            matrix: Matrix::identity(dim, dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.in_dim() {
            return Err(Error::arg(format!(
                "LDA expects dimension {} but got {}",
                self.in_dim(),
                v.len()
            )));
        }
        Ok(&self.matrix * v)
    }
}

pub fn project_lda(proj: &LdaProjection, emb: &SpeakerEmbedding) -> Result<SpeakerEmbedding> {
    Ok(SpeakerEmbedding::new(emb.kind, proj.apply(&emb.values)?))
}

pub(crate) fn scatter_matrices(embeddings: &[Vector], labels: &[usize]) -> Result<(Matrix, Matrix)> {
    let groups = group(embeddings, labels)?;
    let d = embeddings
        .first()
        .ok_or_else(|| Error::EmptyInput("no embeddings".into()))?
        .len();
    let n = embeddings.len() as f64;
    let mean = embeddings.iter().fold(Vector::zeros(d), |a, e| a + e) / n;
    let mut within = Matrix::zeros(d, d);
    let mut between = Matrix::zeros(d, d);
    for members in groups.values() {
        let mu = members.iter().fold(Vector::zeros(d), |a, &i| a + &embeddings[i]) / members.len() as f64;
        let dm = &mu - &mean;
        between.ger(members.len() as f64, &dm, &dm, 1.0);
        for &i in members {
            let r = &embeddings[i] - &mu;
            within.ger(1.0, &r, &r, 1.0);
        }
    }
    within /= n;
    between /= n;
    symmetrize(&mut within);
    symmetrize(&mut between);
    Ok((within, between))
}

/// Fisher LDA: generalized eigenvectors of the between-class scatter against
/// the within-class scatter, normalised so `Wᵀ S_w W = I`.
pub fn train_lda(embeddings: &[Vector], labels: &[usize], out_dim: usize) -> Result<LdaProjection> {
    let (within, between) = scatter_matrices(embeddings, labels)?;
    let d = within.nrows();
    let n_speakers = group(embeddings, labels)?.len();
    if out_dim == 0 || out_dim > d.min(n_speakers.saturating_sub(1)) {
        return Err(Error::arg(format!(
            "LDA output dimension {out_dim} must be in 1..={} (dim {d}, {n_speakers} speakers)",
            d.min(n_speakers.saturating_sub(1))
        )));
    }
    let floor = (1e-10 * within.trace() / d as f64).max(1e-300);
    let within = floor_eigenvalues(&within, floor).0;
    let wf = SpdFactor::new(&within)?;
    // M = L⁻¹ S_b L⁻ᵀ
    let mut tmp = between.clone();
    wf.whiten_in_place(&mut tmp);
    let mut m = tmp.transpose();
    wf.whiten_in_place(&mut m);
    symmetrize(&mut m);
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut v = Matrix::zeros(d, out_dim);
    for (j, &k) in order.iter().take(out_dim).enumerate() {
        v.set_column(j, &eig.eigenvectors.column(k));
    }
    // W = L⁻ᵀ V
    wf.lower().tr_solve_lower_triangular_mut(&mut v);
    Ok(LdaProjection {
        matrix: v.transpose(),
    })
}
