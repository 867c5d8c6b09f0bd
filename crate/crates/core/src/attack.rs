//! End-to-end trial scoring, its exact gradient with respect to the test
//! features, FGSM perturbations and the white-box / transfer campaigns.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{
    apply_cmvn, extract_features, invert_lpms, FeatureConfig, FeatureKind, FeatureMatrix, PhaseMatrix, Waveform,
    DEFAULT_VAD_MARGIN,
};
use crate::error::{Error, Result};
use crate::gmm::{accumulate_stats, stats_from_posteriors, GmmUbm};
use crate::ivector::{center_and_length_normalize, extract_ivector, EmbeddingKind, SpeakerEmbedding, TotalVariabilityModel};
use crate::numerics::{Matrix, SpdFactor, Vector};
use crate::plda::{project_lda, score_pair, LdaProjection, PldaModel};
use crate::store::FeatureStore;
use crate::trials::{Label, TrialList};
use crate::xvector::{forward_embed, XvectorModel};

#[derive(Debug, Clone)]
pub enum Extractor {
    Ivector { ubm: GmmUbm, tv: TotalVariabilityModel },
    Xvector { net: XvectorModel, lda: LdaProjection },
}

/// Feature front end, embedding extractor and PLDA backend of one system.
#[derive(Debug, Clone)]
pub struct ScoringPipeline {
    pub features: FeatureConfig,
    pub extractor: Extractor,
    /// Centering mean, in the space the length normalisation sees.
    pub center: Vector,
    pub plda: PldaModel,
    pub vad_margin: f64,
    pub cmvn: bool,
}

impl ScoringPipeline {
    /// VAD-only front end, as used by the i-vector systems.
    pub fn ivector(
        features: FeatureConfig,
        ubm: GmmUbm,
        tv: TotalVariabilityModel,
        center: Vector,
        plda: PldaModel,
    ) -> Result<Self> {
        let p = ScoringPipeline {
            features,
            extractor: Extractor::Ivector { ubm, tv },
            center,
            plda,
            vad_margin: DEFAULT_VAD_MARGIN,
            cmvn: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// CMVN + VAD front end; the embedding is LDA-projected before centering.
    pub fn xvector(
        features: FeatureConfig,
        net: XvectorModel,
        lda: LdaProjection,
        center: Vector,
        plda: PldaModel,
    ) -> Result<Self> {
        let p = ScoringPipeline {
            features,
            extractor: Extractor::Xvector { net, lda },
            center,
            plda,
            vad_margin: DEFAULT_VAD_MARGIN,
            cmvn: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (in_dim, emb_dim) = match &self.extractor {
            Extractor::Ivector { ubm, tv } => {
                if tv.ubm_fingerprint() != ubm.fingerprint() {
                    return Err(Error::Binding("T matrix was trained on a different UBM".into()));
                }
                (ubm.dim(), tv.ivec_dim())
            }
            Extractor::Xvector { net, lda } => {
                if lda.in_dim() != net.embed_dim() {
                    return Err(Error::arg("LDA input does not match the x-vector dimension"));
                }
                (net.input_dim(), lda.out_dim())
            }
        };
        if in_dim != self.features.dim(crate::audio::DEFAULT_SAMPLE_RATE) && self.features.kind == FeatureKind::Mfcc {
            return Err(Error::arg("extractor input dimension does not match the MFCC config"));
        }
        if self.center.len() != emb_dim || self.plda.dim() != emb_dim {
            return Err(Error::arg(format!(
                "backend dimensions disagree: embedding {emb_dim}, mean {}, PLDA {}",
                self.center.len(),
                self.plda.dim()
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> FeatureKind {
        self.features.kind
    }

    pub fn is_ivector(&self) -> bool {
        matches!(self.extractor, Extractor::Ivector { .. })
    }

    pub fn input_dim(&self) -> usize {
        match &self.extractor {
            Extractor::Ivector { ubm, .. } => ubm.dim(),
            Extractor::Xvector { net, .. } => net.input_dim(),
        }
    }

    /// Attaches the VAD mask if the features do not carry one yet.
    pub fn prepare(&self, feat: &FeatureMatrix) -> Result<FeatureMatrix> {
        if feat.kind != self.kind() {
            return Err(Error::arg(format!(
                "pipeline expects {} features but got {}",
                self.kind(),
                feat.kind
            )));
        }
        if feat.dim() != self.input_dim() {
            return Err(Error::arg(format!(
                "pipeline expects {}-dimensional features but got {}",
                self.input_dim(),
                feat.dim()
            )));
        }
        Ok(match feat.vad_mask {
            Some(_) => feat.clone(),
            None => feat.clone().with_vad(self.vad_margin),
        })
    }

    /// Embedding before centering and length normalisation.
    pub fn raw_embedding(&self, feat: &FeatureMatrix) -> Result<SpeakerEmbedding> {
        let feat = self.prepare(feat)?;
        match &self.extractor {
            Extractor::Ivector { ubm, tv } => {
                let stats = accumulate_stats(ubm, &feat)?;
                let post = extract_ivector(tv, &stats)?;
                Ok(SpeakerEmbedding::new(EmbeddingKind::Ivector, post.mean))
            }
            Extractor::Xvector { net, lda } => {
                let feat = if self.cmvn { apply_cmvn(&feat) } else { feat };
                project_lda(lda, &forward_embed(net, &feat)?)
            }
        }
    }

    pub fn embed(&self, feat: &FeatureMatrix) -> Result<SpeakerEmbedding> {
        center_and_length_normalize(&self.raw_embedding(feat)?, &self.center)
    }
}

impl fmt::Display for ScoringPipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let model = if self.is_ivector() { "ivec" } else { "xvec" };
        write!(f, "{}-{model}", self.kind())
    }
}

/// Enrollment and test features of one trial.
#[derive(Debug, Clone, Copy)]
pub struct Trial<'a> {
    pub enroll: &'a FeatureMatrix,
    pub test: &'a FeatureMatrix,
    pub label: Label,
}

pub fn score_trial(p: &ScoringPipeline, trial: Trial<'_>) -> Result<f64> {
    score_pair(&p.plda, &p.embed(trial.enroll)?, &p.embed(trial.test)?)
}

/// `∂S/∂X_j` for every entry of the test features. Responsibilities are
/// differentiated through; the VAD mask is held fixed and masked frames get
/// a zero gradient.
pub fn score_gradient(p: &ScoringPipeline, trial: Trial<'_>) -> Result<Matrix> {
    let enroll = p.embed(trial.enroll)?;
    gradient_given_enroll(p, &enroll, &p.prepare(trial.test)?)
}

fn gradient_given_enroll(p: &ScoringPipeline, enroll: &SpeakerEmbedding, test: &FeatureMatrix) -> Result<Matrix> {
    let Extractor::Ivector { ubm, tv } = &p.extractor else {
        return Err(Error::arg("score gradients are only defined for i-vector pipelines"));
    };
    let kept = test.retained_frames();
    if kept.is_empty() {
        return Err(Error::EmptyInput("utterance has no retained frames".into()));
    }
    let x = test.retained_values();
    let (gamma, _) = ubm.posteriors_and_ll(&x);
    let stats = stats_from_posteriors(ubm, &x, &gamma);
    let post = extract_ivector(tv, &stats)?;

    // back through length normalisation and centering
    let u = &post.mean - &p.center;
    let norm = u.norm();
    if !(norm > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let z = &u / norm;
    let g_z = p.plda.score_gradient(&enroll.values, &z)?;
    let g_u = (&g_z - &z * z.dot(&g_z)) / norm;
    // ω = L⁻¹b  ⇒  dS = aᵀ(db − dL ω) with a = L⁻¹ g_ω
    let a = SpdFactor::new(&post.precision)?.solve_vec(&g_u);

    let n_mix = ubm.n_mix();
    let frames = x.ncols();
    let parts: Vec<(Vector, Vector, Matrix, Vec<f64>)> = (0..n_mix)
        .into_par_iter()
        .map(|c| {
            let h = tv.precision_t(c) * &a;
            let n_c = -a.dot(&(tv.gram(c) * &post.mean));
            let mu = ubm.mean(c);
            let mut d = x.clone();
            for mut col in d.column_iter_mut() {
                col -= &mu;
            }
            let q: Vec<f64> = d.column_iter().map(|col| n_c + h.dot(&col)).collect();
            let prec_d = ubm.covariance(c).precision_mul(&d);
            (h, mu, prec_d, q)
        })
        .collect();

    let mut q_bar = vec![0.0; frames];
    for (c, part) in parts.iter().enumerate() {
        for t in 0..frames {
            q_bar[t] += gamma[(c, t)] * part.3[t];
        }
    }
    let mut grad_kept = Matrix::zeros(x.nrows(), frames);
    for (c, (h, _, prec_d, q)) in parts.iter().enumerate() {
        for t in 0..frames {
            let g = gamma[(c, t)];
            if g == 0.0 {
                continue;
            }
            let g_ell = g * (q[t] - q_bar[t]);
            let mut col = grad_kept.column_mut(t);
            col.axpy(g, h, 1.0);
            col.axpy(-g_ell, &prec_d.column(t), 1.0);
        }
    }
    let mut grad = Matrix::zeros(test.dim(), test.frames());
    for (j, &t) in kept.iter().enumerate() {
        grad.set_column(t, &grad_kept.column(j));
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Matrix,
    pub k: f64,
}

/// `δ = ε · k · sign(∇)`, with `sign(0) = 0`.
pub fn fgsm_step(grad: &Matrix, label: Label, epsilon: f64) -> Result<Perturbation> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::arg(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    if grad.iter().any(|g| g.is_nan()) {
        return Err(Error::arg("gradient contains NaN"));
    }
    let k = label.k();
    let delta = grad.map(|g| {
        if g > 0.0 {
            epsilon * k
        } else if g < 0.0 {
            -epsilon * k
        } else {
            0.0
        }
    });
    Ok(Perturbation { delta, k })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackSetting {
    WhiteBox,
    CrossFeature,
    CrossModel,
    CrossFeatureModel,
}

impl AttackSetting {
    pub const ALL: [AttackSetting; 4] = [
        AttackSetting::WhiteBox,
        AttackSetting::CrossFeature,
        AttackSetting::CrossModel,
        AttackSetting::CrossFeatureModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackSetting::WhiteBox => "white_box",
            AttackSetting::CrossFeature => "cross_feature",
            AttackSetting::CrossModel => "cross_model",
            AttackSetting::CrossFeatureModel => "cross_feature_model",
        }
    }

    /// Whether adversarial features go through audio before reaching the target.
    pub fn via_audio(self) -> bool {
        matches!(self, AttackSetting::CrossFeature | AttackSetting::CrossFeatureModel)
    }

    pub fn check(self, source: &ScoringPipeline, target: &ScoringPipeline) -> Result<()> {
        use FeatureKind::*;
        let ok = source.is_ivector()
            && match self {
                AttackSetting::WhiteBox => target.is_ivector() && source.kind() == target.kind(),
                AttackSetting::CrossFeature => source.kind() == Lpms && target.is_ivector() && target.kind() == Mfcc,
                AttackSetting::CrossModel => source.kind() == Mfcc && !target.is_ivector() && target.kind() == Mfcc,
                AttackSetting::CrossFeatureModel => {
                    source.kind() == Lpms && !target.is_ivector() && target.kind() == Mfcc
                }
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} is not a valid source/target pair for {}; valid arrows: \
                 white_box mfcc-ivec->mfcc-ivec, white_box lpms-ivec->lpms-ivec, \
                 cross_feature lpms-ivec->mfcc-ivec, cross_model mfcc-ivec->mfcc-xvec, \
                 cross_feature_model lpms-ivec->mfcc-xvec",
                format_args!("{source} -> {target}"),
                self.name()
            )))
        }
    }
}

impl fmt::Display for AttackSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackSetting::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown attack setting {s:?}; expected white_box, cross_feature, cross_model or cross_feature_model"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub setting: AttackSetting,
}

/// `X_j + δ`, carrying the clean VAD mask.
pub fn attack_trial(p: &ScoringPipeline, trial: Trial<'_>, cfg: &AttackConfig) -> Result<FeatureMatrix> {
    let test = p.prepare(trial.test)?;
    if cfg.epsilon == 0.0 {
        fgsm_step(&Matrix::zeros(0, 0), trial.label, 0.0)?;
        return Ok(test);
    }
    let grad = gradient_given_enroll(p, &p.embed(trial.enroll)?, &test)?;
    let step = fgsm_step(&grad, trial.label, cfg.epsilon)?;
    Ok(test.with_values(&test.values + step.delta))
}

/// Number of LPMS frames needed before the inverted audio yields one frame
/// of the target features.
fn min_lpms_frames(lpms_cfg: &FeatureConfig, target_cfg: &FeatureConfig, sr: u32) -> usize {
    let (win, hop) = (lpms_cfg.win_samples(sr), lpms_cfg.hop_samples(sr));
    let need = target_cfg.win_samples(sr);
    if need <= win {
        1
    } else {
        (need - win).div_ceil(hop) + 1
    }
}

/// Adversarial LPMS → audio (with the stored clean phase) → target features,
/// prepared for the target pipeline (VAD recomputed on the new features).
pub fn transfer_cross_feature(
    adv_lpms: &FeatureMatrix,
    phase: &PhaseMatrix,
    lpms_cfg: &FeatureConfig,
    target: &ScoringPipeline,
) -> Result<FeatureMatrix> {
    let wave = lpms_to_audio(adv_lpms, phase, lpms_cfg, &target.features)?;
    let (feat, _) = extract_features(&wave, &target.features)?;
    target.prepare(&feat)
}

fn lpms_to_audio(
    adv_lpms: &FeatureMatrix,
    phase: &PhaseMatrix,
    lpms_cfg: &FeatureConfig,
    target_cfg: &FeatureConfig,
) -> Result<Waveform> {
    let required = min_lpms_frames(lpms_cfg, target_cfg, adv_lpms.sample_rate);
    if adv_lpms.frames() < required {
        return Err(Error::ReceptiveField {
            frames: adv_lpms.frames(),
            required,
        });
    }
    let mut plain = adv_lpms.clone();
    plain.vad_mask = None;
    invert_lpms(&plain, phase, lpms_cfg)
}

/// One (trial, ε) cell of a campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub trial: usize,
    pub enroll: String,
    pub test: String,
    pub label: Label,
    pub epsilon: f64,
    pub clean_score: f64,
    pub adv_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignTable {
    pub setting: AttackSetting,
    pub source: String,
    pub target: String,
    pub epsilons: Vec<f64>,
    /// Standard deviation of the source test features, for reading ε.
    pub feature_std: f64,
    /// Ordered by trial, then by position in `epsilons`.
    pub rows: Vec<ScoreRow>,
}

impl CampaignTable {
    pub fn column(&self, epsilon: f64) -> Vec<&ScoreRow> {
        self.rows.iter().filter(|r| r.epsilon == epsilon).collect()
    }
}

pub const DEFAULT_EPSILONS: [f64; 8] = [0.0, 0.3, 1.0, 5.0, 10.0, 20.0, 30.0, 50.0];

fn check_epsilons(epsilons: &[f64]) -> Result<()> {
    if epsilons.is_empty() {
        return Err(Error::Config("epsilon sweep is empty".into()));
    }
    if let Some(e) = epsilons.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(Error::Config(format!("epsilon {e} must be finite and >= 0")));
    }
    Ok(())
}

/// Std of all retained entries across the given features.
fn pooled_std(feats: &[&FeatureMatrix]) -> f64 {
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for f in feats {
        for t in f.retained_frames() {
            for v in f.values.column(t).iter() {
                n += 1.0;
                sum += v;
                sq += v * v;
            }
        }
    }
    if n == 0.0 {
        return 0.0;
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0).sqrt()
}

/// Attacks every test utterance with the source system and scores it on the
/// target system for each ε.
pub fn run_campaign(
    setting: AttackSetting,
    source: &ScoringPipeline,
    target: &ScoringPipeline,
    store: &FeatureStore,
    trials: &TrialList,
    epsilons: &[f64],
) -> Result<CampaignTable> {
    setting.check(source, target)?;
    check_epsilons(epsilons)?;
    if trials.is_empty() {
        return Err(Error::EmptyInput("trial list is empty".into()));
    }
    let enroll_ids: Vec<&str> = trials
        .trials
        .iter()
        .map(|t| t.enroll.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let embed_all = |p: &ScoringPipeline| -> Result<BTreeMap<&str, SpeakerEmbedding>> {
        let embs: Vec<SpeakerEmbedding> = enroll_ids
            .par_iter()
            .map(|id| p.embed(store.features(id, p.kind())?))
            .collect::<Result<_>>()?;
        Ok(enroll_ids.iter().copied().zip(embs).collect())
    };
    let target_enroll = embed_all(target)?;
    let source_enroll = if epsilons.iter().any(|&e| e > 0.0) {
        embed_all(source)?
    } else {
        BTreeMap::new()
    };

    let test_ids: std::collections::BTreeSet<&str> = trials.trials.iter().map(|t| t.test.as_str()).collect();
    let test_feats: Vec<FeatureMatrix> = test_ids
        .iter()
        .map(|id| source.prepare(store.features(id, source.kind())?))
        .collect::<Result<_>>()?;
    let feature_std = pooled_std(&test_feats.iter().collect::<Vec<_>>());

    let per_trial: Vec<Vec<ScoreRow>> = trials
        .trials
        .par_iter()
        .enumerate()
        .map(|(i, key)| {
            let e_tgt = &target_enroll[key.enroll.as_str()];
            let clean_test = target.prepare(store.features(&key.test, target.kind())?)?;
            let clean_score = score_pair(&target.plda, e_tgt, &target.embed(&clean_test)?)?;
            let src_test = source.prepare(store.features(&key.test, source.kind())?)?;
            let sign = if epsilons.iter().any(|&e| e > 0.0) {
                let grad = gradient_given_enroll(source, &source_enroll[key.enroll.as_str()], &src_test)?;
                Some(fgsm_step(&grad, key.label, 1.0)?.delta)
            } else {
                None
            };
            epsilons
                .iter()
                .map(|&eps| {
                    let adv = match &sign {
                        Some(s) if eps > 0.0 => src_test.with_values(&src_test.values + s * eps),
                        _ => src_test.clone(),
                    };
                    let scored = if setting.via_audio() {
                        let phase = store.phase(&key.test)?;
                        transfer_cross_feature(&adv, phase, &source.features, target)?
                    } else {
                        adv
                    };
                    let adv_score = score_pair(&target.plda, e_tgt, &target.embed(&scored)?)?;
                    Ok(ScoreRow {
                        trial: i,
                        enroll: key.enroll.clone(),
                        test: key.test.clone(),
                        label: key.label,
                        epsilon: eps,
                        clean_score,
                        adv_score,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    Ok(CampaignTable {
        setting,
        source: source.to_string(),
        target: target.to_string(),
        epsilons: epsilons.to_vec(),
        feature_std,
        rows: per_trial.into_iter().flatten().collect(),
    })
}

/// Audio of an LPMS-source adversarial test utterance.
pub fn adversarial_audio(
    source: &ScoringPipeline,
    trial: Trial<'_>,
    phase: &PhaseMatrix,
    epsilon: f64,
) -> Result<Waveform> {
    if source.kind() != FeatureKind::Lpms {
        return Err(Error::arg("audio export needs an LPMS source system"));
    }
    let adv = attack_trial(
        source,
        trial,
        &AttackConfig {
            epsilon,
            setting: AttackSetting::WhiteBox,
        },
    )?;
    let mut plain = adv;
    plain.vad_mask = None;
    invert_lpms(&plain, phase, &source.features)
}
