//! Train every system on a synthetic corpus and run the attack campaigns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::attack::{run_campaign, score_trial, AttackSetting, CampaignTable, ScoringPipeline, Trial};
use crate::audio::{apply_cmvn, FeatureConfig, FeatureKind, FeatureMatrix};
use crate::config::ExperimentConfig;
use crate::corpus::{extract_store, gen_synthetic_corpus, CorpusMode, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::eval::{format_summary_csv, format_summary_text, summarize_campaign, CampaignSummary};
use crate::gmm::{accumulate_stats, train_ubm, GmmUbm};
use crate::ivector::{
    center_and_length_normalize, embedding_mean, extract_ivector, train_total_variability, EmbeddingKind,
    SpeakerEmbedding, TotalVariabilityModel,
};
use crate::numerics::Vector;
use crate::plda::{project_lda, train_lda, train_plda, LdaProjection, PldaModel};
use crate::store::FeatureStore;
use crate::trials::TrialList;
use crate::xvector::{forward_embed, train_xvector, TrainRecord, XvectorModel};

/// Training curves kept for inspection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub ubm_log_likelihoods: Vec<f64>,
    pub tv_objective: Vec<f64>,
    pub plda_log_likelihoods: Vec<f64>,
    pub xvector_losses: Vec<f64>,
    pub xvector_accuracy: f64,
}

/// Generates a corpus; waveform corpora get MFCC and LPMS features.
pub fn prepare_corpus(cfg: &ExperimentConfig, eval: bool) -> Result<SyntheticCorpus> {
    let spec = if eval { &cfg.eval_corpus } else { &cfg.train_corpus };
    let mut corpus = gen_synthetic_corpus(spec)?;
    if spec.mode == CorpusMode::Waveform {
        corpus.store = extract_store(&corpus.waveforms, &corpus.speakers, &[cfg.mfcc.clone(), cfg.lpms.clone()])?;
    }
    Ok(corpus)
}

/// Utterances with a speaker label, their integer labels (speaker-id
/// order) and VAD-masked features of `kind`.
pub fn training_set(
    store: &FeatureStore,
    kind: FeatureKind,
    margin: f64,
) -> Result<(Vec<String>, Vec<usize>, Vec<FeatureMatrix>)> {
    let ids: Vec<String> = store
        .utterances
        .iter()
        .filter(|(_, u)| u.speaker.is_some())
        .map(|(id, _)| id.clone())
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptyInput("no utterance in the store has a speaker label".into()));
    }
    let speakers: BTreeSet<&str> = ids
        .iter()
        .filter_map(|id| store.utterances[id].speaker.as_deref())
        .collect();
    let index: BTreeMap<&str, usize> = speakers.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    let labels = ids
        .iter()
        .map(|id| index[store.utterances[id].speaker.as_deref().expect("filtered")])
        .collect();
    let feats = ids
        .iter()
        .map(|id| Ok(store.features(id, kind)?.clone().with_vad(margin)))
        .collect::<Result<Vec<_>>>()?;
    Ok((ids, labels, feats))
}

/// Mean, then PLDA on centered, length-normalised embeddings.
pub fn fit_backend(
    raw: &[SpeakerEmbedding],
    labels: &[usize],
    cfg: &ExperimentConfig,
    log: &mut TrainingLog,
) -> Result<(Vector, PldaModel)> {
    let center = embedding_mean(raw)?;
    let normed = raw
        .iter()
        .map(|e| center_and_length_normalize(e, &center).map(|n| n.values))
        .collect::<Result<Vec<_>>>()?;
    let dim = center.len();
    let plda = train_plda(&normed, labels, cfg.plda.n_factors.unwrap_or(dim).min(dim), cfg.plda.iters)?;
    log.plda_log_likelihoods = plda.log_likelihoods;
    Ok((center, plda.model))
}

pub fn fit_ubm(cfg: &ExperimentConfig, feats: &[FeatureMatrix], log: &mut TrainingLog) -> Result<GmmUbm> {
    let ubm = train_ubm(feats, &cfg.ubm)?;
    log.ubm_log_likelihoods = ubm.log_likelihoods;
    Ok(ubm.model)
}

pub fn fit_tv(
    cfg: &ExperimentConfig,
    ubm: &GmmUbm,
    feats: &[FeatureMatrix],
    log: &mut TrainingLog,
) -> Result<TotalVariabilityModel> {
    let stats = feats
        .par_iter()
        .map(|f| accumulate_stats(ubm, f))
        .collect::<Result<Vec<_>>>()?;
    let tv = train_total_variability(ubm, &stats, &cfg.tv)?;
    log.tv_objective = tv.objective;
    Ok(tv.model)
}

pub fn ivector_embeddings(
    ubm: &GmmUbm,
    tv: &TotalVariabilityModel,
    feats: &[FeatureMatrix],
) -> Result<Vec<SpeakerEmbedding>> {
    feats
        .par_iter()
        .map(|f| {
            let stats = accumulate_stats(ubm, f)?;
            extract_ivector(tv, &stats).map(|p| SpeakerEmbedding::new(EmbeddingKind::Ivector, p.mean))
        })
        .collect()
}

pub fn fit_xvector(
    cfg: &ExperimentConfig,
    feats: &[FeatureMatrix],
    labels: &[usize],
    log: &mut TrainingLog,
) -> Result<XvectorModel> {
    let records: Vec<TrainRecord> = feats
        .iter()
        .zip(labels)
        .map(|(f, &speaker)| TrainRecord {
            features: apply_cmvn(f),
            speaker,
        })
        .collect();
    let trained = train_xvector(&records, &cfg.xvector)?;
    log.xvector_losses = trained.epoch_losses;
    log.xvector_accuracy = trained.accuracy;
    Ok(trained.model)
}

/// Raw (pre-LDA) x-vectors of CMVN-normalised features.
pub fn xvector_embeddings(net: &XvectorModel, feats: &[FeatureMatrix]) -> Result<Vec<SpeakerEmbedding>> {
    feats.par_iter().map(|f| forward_embed(net, &apply_cmvn(f))).collect()
}

pub fn fit_lda(cfg: &ExperimentConfig, xvecs: &[SpeakerEmbedding], labels: &[usize]) -> Result<LdaProjection> {
    let values: Vec<Vector> = xvecs.iter().map(|e| e.values.clone()).collect();
    train_lda(&values, labels, cfg.lda.out_dim)
}

pub fn train_ivector_system(
    cfg: &ExperimentConfig,
    features: &FeatureConfig,
    store: &FeatureStore,
) -> Result<(ScoringPipeline, TrainingLog)> {
    let mut log = TrainingLog::default();
    let (_, labels, feats) = training_set(store, features.kind, cfg.vad_margin)?;
    let ubm = fit_ubm(cfg, &feats, &mut log)?;
    let tv = fit_tv(cfg, &ubm, &feats, &mut log)?;
    let raw = ivector_embeddings(&ubm, &tv, &feats)?;
    let (center, plda) = fit_backend(&raw, &labels, cfg, &mut log)?;
    let mut p = ScoringPipeline::ivector(features.clone(), ubm, tv, center, plda)?;
    p.vad_margin = cfg.vad_margin;
    Ok((p, log))
}

pub fn train_xvector_system(
    cfg: &ExperimentConfig,
    features: &FeatureConfig,
    store: &FeatureStore,
) -> Result<(ScoringPipeline, TrainingLog)> {
    let mut log = TrainingLog::default();
    let (_, labels, feats) = training_set(store, features.kind, cfg.vad_margin)?;
    let net = fit_xvector(cfg, &feats, &labels, &mut log)?;
    let xvecs = xvector_embeddings(&net, &feats)?;
    let lda = fit_lda(cfg, &xvecs, &labels)?;
    let projected = xvecs
        .iter()
        .map(|e| project_lda(&lda, e))
        .collect::<Result<Vec<_>>>()?;
    let (center, plda) = fit_backend(&projected, &labels, cfg, &mut log)?;
    let mut p = ScoringPipeline::xvector(features.clone(), net, lda, center, plda)?;
    p.vad_margin = cfg.vad_margin;
    Ok((p, log))
}

/// Scores every trial on one system, in trial order.
pub fn score_trials(p: &ScoringPipeline, store: &FeatureStore, trials: &TrialList) -> Result<Vec<f64>> {
    trials
        .trials
        .par_iter()
        .map(|t| {
            score_trial(
                p,
                Trial {
                    enroll: store.features(&t.enroll, p.kind())?,
                    test: store.features(&t.test, p.kind())?,
                    label: t.label,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Systems {
    pub mfcc_ivec: ScoringPipeline,
    pub lpms_ivec: ScoringPipeline,
    pub mfcc_xvec: ScoringPipeline,
    pub logs: Vec<(String, TrainingLog)>,
}

pub fn train_systems(cfg: &ExperimentConfig, train: &SyntheticCorpus) -> Result<Systems> {
    if cfg.train_corpus.mode != CorpusMode::Waveform {
        return Err(Error::Config("the full experiment needs a waveform training corpus".into()));
    }
    let (mfcc_ivec, l1) = train_ivector_system(cfg, &cfg.mfcc, &train.store)?;
    let (lpms_ivec, l2) = train_ivector_system(cfg, &cfg.lpms, &train.store)?;
    let (mfcc_xvec, l3) = train_xvector_system(cfg, &cfg.mfcc, &train.store)?;
    Ok(Systems {
        logs: vec![
            (mfcc_ivec.to_string(), l1),
            (lpms_ivec.to_string(), l2),
            (mfcc_xvec.to_string(), l3),
        ],
        mfcc_ivec,
        lpms_ivec,
        mfcc_xvec,
    })
}

/// The five source → target arrows.
pub fn arrows(systems: &Systems) -> Vec<(AttackSetting, &ScoringPipeline, &ScoringPipeline)> {
    vec![
        (AttackSetting::WhiteBox, &systems.mfcc_ivec, &systems.mfcc_ivec),
        (AttackSetting::WhiteBox, &systems.lpms_ivec, &systems.lpms_ivec),
        (AttackSetting::CrossFeature, &systems.lpms_ivec, &systems.mfcc_ivec),
        (AttackSetting::CrossModel, &systems.mfcc_ivec, &systems.mfcc_xvec),
        (AttackSetting::CrossFeatureModel, &systems.lpms_ivec, &systems.mfcc_xvec),
    ]
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub table: CampaignTable,
    pub summary: CampaignSummary,
}

pub fn run_arrows(
    systems: &Systems,
    store: &FeatureStore,
    trials: &TrialList,
    epsilons: &[f64],
    only: Option<AttackSetting>,
) -> Result<Vec<CampaignResult>> {
    arrows(systems)
        .into_iter()
        .filter(|(s, _, _)| only.is_none_or(|o| o == *s))
        .map(|(setting, source, target)| {
            log::info!("campaign {setting}: {source} -> {target}");
            let table = run_campaign(setting, source, target, store, trials, epsilons)?;
            let summary = summarize_campaign(&table)?;
            Ok(CampaignResult { table, summary })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub systems: Systems,
    pub eval: SyntheticCorpus,
    pub campaigns: Vec<CampaignResult>,
}

/// Corpus generation, training and every campaign.
pub fn run_experiment(cfg: &ExperimentConfig, only: Option<AttackSetting>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let train = prepare_corpus(cfg, false)?;
    let systems = train_systems(cfg, &train)?;
    let eval = prepare_corpus(cfg, true)?;
    let campaigns = run_arrows(&systems, &eval.store, &eval.trials, &cfg.epsilons, only)?;
    Ok(ExperimentOutcome {
        systems,
        eval,
        campaigns,
    })
}

/// Effective config as `#` comments, then the summary table and CSV.
pub fn format_report(cfg: &ExperimentConfig, campaigns: &[CampaignResult]) -> String {
    let mut out = String::new();
    out.push_str(&config_header(cfg));
    let summaries: Vec<CampaignSummary> = campaigns.iter().map(|c| c.summary.clone()).collect();
    out.push_str(&format_summary_text(&summaries));
    out.push('\n');
    out.push_str(&format_summary_csv(&summaries));
    out
}

pub fn config_header(cfg: &ExperimentConfig) -> String {
    let mut out = String::from("# effective configuration\n");
    for line in cfg.to_toml().lines() {
        let _ = writeln!(out, "# {line}");
    }
    out.push('\n');
    out
}
