use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use svattack::archive::{
    decode_feature_config, decode_lda, decode_tv, decode_ubm, decode_xvector, encode_feature_config, encode_lda,
    encode_tv, encode_ubm, encode_xvector, load_pipeline, load_store, parse_speakers, pipeline_archive, save_store,
    ModelArchive, SectionKind,
};
use svattack::attack::{adversarial_audio, run_campaign, ScoringPipeline, Trial};
use svattack::audio::{invert_lpms, read_wav, write_wav, FeatureKind};
use svattack::config::ExperimentConfig;
use svattack::corpus::{extract_store, gen_synthetic_corpus, CorpusMode};
use svattack::eval::{format_score_table, format_summary_csv, format_summary_text, parse_score_table, summarize_campaign};
use svattack::experiment::{
    config_header, fit_backend, fit_lda, fit_tv, fit_ubm, fit_xvector, format_report, ivector_embeddings,
    run_experiment, score_trials, training_set, xvector_embeddings, TrainingLog,
};
use svattack::fsutil::{read_text, write_text};
use svattack::plda::project_lda;
use svattack::store::FeatureStore;
use svattack::trials::TrialList;
use svattack::{Error, Result};

use crate::{Command, Global, SplitArg};

pub fn run(g: &Global, cmd: &Command) -> Result<()> {
    let cfg = g.config()?;
    match cmd {
        Command::Synth { split } => synth(g, &cfg, *split),
        Command::ExtractFeatures { corpus } => extract(g, &cfg, corpus),
        Command::TrainUbm { store, features } => {
            let features = match FeatureKind::from(*features) {
                FeatureKind::Mfcc => cfg.mfcc.clone(),
                FeatureKind::Lpms => cfg.lpms.clone(),
            };
            let store = load_store(store)?;
            let (_, _, feats) = training_set(&store, features.kind, cfg.vad_margin)?;
            let ubm = fit_ubm(&cfg, &feats, &mut TrainingLog::default())?;
            let mut a = ModelArchive::new();
            a.push(encode_feature_config("features", &features)).push(encode_ubm("ubm", &ubm));
            a.save(g.out()?)
        }
        Command::TrainTv { store, ubm } => {
            let mut a = ModelArchive::load(ubm)?;
            let features = decode_feature_config(a.require(SectionKind::FeatureConfig)?)?;
            let ubm = decode_ubm(a.require(SectionKind::GmmUbm)?)?;
            let store = load_store(store)?;
            let (_, _, feats) = training_set(&store, features.kind, cfg.vad_margin)?;
            let tv = fit_tv(&cfg, &ubm, &feats, &mut TrainingLog::default())?;
            a.sections.retain(|s| s.kind != SectionKind::TotalVariabilityModel);
            a.push(encode_tv("tv", &tv));
            a.save(g.out()?)
        }
        Command::TrainXvec { store } => {
            let store = load_store(store)?;
            let (_, labels, feats) = training_set(&store, FeatureKind::Mfcc, cfg.vad_margin)?;
            let mut log = TrainingLog::default();
            let net = fit_xvector(&cfg, &feats, &labels, &mut log)?;
            log::info!("x-vector training accuracy {:.3}", log.xvector_accuracy);
            let mut a = ModelArchive::new();
            a.push(encode_feature_config("features", &cfg.mfcc)).push(encode_xvector("xvector", &net));
            a.save(g.out()?)
        }
        Command::TrainLda { store, model } => {
            let mut a = ModelArchive::load(model)?;
            let net = decode_xvector(a.require(SectionKind::XvectorModel)?)?;
            let store = load_store(store)?;
            let (_, labels, feats) = training_set(&store, FeatureKind::Mfcc, cfg.vad_margin)?;
            let lda = fit_lda(&cfg, &xvector_embeddings(&net, &feats)?, &labels)?;
            a.sections.retain(|s| s.kind != SectionKind::LdaProjection);
            a.push(encode_lda("lda", &lda));
            a.save(g.out()?)
        }
        Command::TrainPlda { store, model } => train_plda(g, &cfg, store, model),
        Command::Score { system, store, trials } => {
            let p = load_pipeline(system, cfg.vad_margin)?;
            let store = load_store(store)?;
            let trials = TrialList::parse(&read_text(trials)?)?;
            let scores = score_trials(&p, &store, &trials)?;
            let mut out = config_header(&cfg);
            let _ = writeln!(out, "# system {p}");
            for (t, s) in trials.trials.iter().zip(scores) {
                let _ = writeln!(out, "{} {} {} {s:e}", t.enroll, t.test, t.label);
            }
            emit(g, &out)
        }
        Command::Attack {
            source,
            target,
            store,
            trials,
        } => {
            let setting = g
                .setting()
                .ok_or_else(|| Error::Argument("attack needs --setting".into()))?;
            let source = load_pipeline(source, cfg.vad_margin)?;
            let target = load_pipeline(target, cfg.vad_margin)?;
            let store = load_store(store)?;
            let trials = TrialList::parse(&read_text(trials)?)?;
            let table = run_campaign(setting, &source, &target, &store, &trials, &cfg.epsilons)?;
            let summary = summarize_campaign(&table)?;
            write_text(g.out()?, &(config_header(&cfg) + &format_score_table(&table)))?;
            print!("{}", format_summary_text(&[summary]));
            Ok(())
        }
        Command::Evaluate { tables } => {
            let summaries = tables
                .iter()
                .map(|p| summarize_campaign(&parse_score_table(&read_text(p)?)?))
                .collect::<Result<Vec<_>>>()?;
            let out = config_header(&cfg) + &format_summary_text(&summaries) + "\n" + &format_summary_csv(&summaries);
            emit(g, &out)
        }
        Command::ExportWav {
            source,
            store,
            trials,
            limit,
        } => export_wav(g, &cfg, source, store, trials, *limit),
        Command::Experiment => {
            let outcome = run_experiment(&cfg, g.setting())?;
            emit(g, &format_report(&cfg, &outcome.campaigns))
        }
    }
}

/// Writes to `--out` when given, stdout otherwise.
fn emit(g: &Global, text: &str) -> Result<()> {
    match &g.out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(g: &Global, cfg: &ExperimentConfig, split: SplitArg) -> Result<()> {
    let root = g.out()?;
    let splits: &[(&str, _)] = &[("train", &cfg.train_corpus), ("eval", &cfg.eval_corpus)];
    std::fs::create_dir_all(root).map_err(|e| Error::Io {
        path: root.to_path_buf(),
        source: e,
    })?;
    write_text(&root.join("config.toml"), &cfg.to_toml())?;
    for (name, spec) in splits {
        let wanted = matches!(
            (split, *name),
            (SplitArg::Both, _) | (SplitArg::Train, "train") | (SplitArg::Eval, "eval")
        );
        if !wanted {
            continue;
        }
        let dir = root.join(name);
        let corpus = gen_synthetic_corpus(spec)?;
        match spec.mode {
            CorpusMode::Waveform => {
                let wav_dir = dir.join("wav");
                std::fs::create_dir_all(&wav_dir).map_err(|e| Error::Io {
                    path: wav_dir.clone(),
                    source: e,
                })?;
                for (id, w) in &corpus.waveforms {
                    write_wav(wav_dir.join(format!("{id}.wav")), w)?;
                }
            }
            CorpusMode::Features => save_store(&dir.join("features"), &corpus.store)?,
        }
        let mut speakers = config_header(cfg);
        for (utt, spk) in &corpus.speakers {
            let _ = writeln!(speakers, "{utt} {spk}");
        }
        write_text(&dir.join("speakers.txt"), &speakers)?;
        write_text(&dir.join("trials.txt"), &(config_header(cfg) + &corpus.trials.to_string()))?;
    }
    Ok(())
}

fn extract(g: &Global, cfg: &ExperimentConfig, corpus: &Path) -> Result<()> {
    let wav_dir = corpus.join("wav");
    let entries = std::fs::read_dir(&wav_dir).map_err(|e| Error::Io {
        path: wav_dir.clone(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    paths.sort();
    let mut waves = BTreeMap::new();
    for p in &paths {
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        waves.insert(id, read_wav(p)?);
    }
    if waves.is_empty() {
        return Err(Error::EmptyInput(format!("no .wav files in {}", wav_dir.display())));
    }
    let spk_file = corpus.join("speakers.txt");
    let speakers = if spk_file.exists() {
        parse_speakers(&read_text(&spk_file)?)?
    } else {
        BTreeMap::new()
    };
    let store = extract_store(&waves, &speakers, &[cfg.mfcc.clone(), cfg.lpms.clone()])?;
    save_store(g.out()?, &store)
}

fn train_plda(g: &Global, cfg: &ExperimentConfig, store: &Path, model: &Path) -> Result<()> {
    let a = ModelArchive::load(model)?;
    let features = decode_feature_config(a.require(SectionKind::FeatureConfig)?)?;
    let store = load_store(store)?;
    let (_, labels, feats) = training_set(&store, features.kind, cfg.vad_margin)?;
    let mut log = TrainingLog::default();
    let pipeline = if let Some(s) = a.find(SectionKind::GmmUbm) {
        let ubm = decode_ubm(s)?;
        let tv = decode_tv(a.require(SectionKind::TotalVariabilityModel)?, &ubm)?;
        let raw = ivector_embeddings(&ubm, &tv, &feats)?;
        let (center, plda) = fit_backend(&raw, &labels, cfg, &mut log)?;
        ScoringPipeline::ivector(features, ubm, tv, center, plda)?
    } else {
        let net = decode_xvector(a.require(SectionKind::XvectorModel)?)?;
        let lda = decode_lda(a.require(SectionKind::LdaProjection)?)?;
        let projected = xvector_embeddings(&net, &feats)?
            .iter()
            .map(|e| project_lda(&lda, e))
            .collect::<Result<Vec<_>>>()?;
        let (center, plda) = fit_backend(&projected, &labels, cfg, &mut log)?;
        ScoringPipeline::xvector(features, net, lda, center, plda)?
    };
    pipeline_archive(&pipeline).save(g.out()?)
}

fn export_wav(g: &Global, cfg: &ExperimentConfig, source: &Path, store: &Path, trials: &Path, limit: usize) -> Result<()> {
    let p = load_pipeline(source, cfg.vad_margin)?;
    if p.kind() != FeatureKind::Lpms {
        return Err(Error::Argument("export-wav needs an LPMS source system".into()));
    }
    let store: FeatureStore = load_store(store)?;
    let trials = TrialList::parse(&read_text(trials)?)?;
    let dir = g.out()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut index = config_header(cfg);
    let _ = writeln!(index, "# trial enroll test label epsilon original adversarial");
    for (i, t) in trials.trials.iter().take(limit).enumerate() {
        let test = store.features(&t.test, FeatureKind::Lpms)?;
        let phase = store.phase(&t.test)?;
        let mut plain = test.clone();
        plain.vad_mask = None;
        let orig = format!("{i:04}-{}-orig.wav", t.test);
        write_wav(dir.join(&orig), &invert_lpms(&plain, phase, &p.features)?)?;
        let trial = Trial {
            enroll: store.features(&t.enroll, FeatureKind::Lpms)?,
            test,
            label: t.label,
        };
        for &eps in cfg.epsilons.iter().filter(|&&e| e > 0.0) {
            let adv = format!("{i:04}-{}-eps{eps}.wav", t.test);
            write_wav(dir.join(&adv), &adversarial_audio(&p, trial, phase, eps)?)?;
            let _ = writeln!(index, "{i} {} {} {} {eps} {orig} {adv}", t.enroll, t.test, t.label);
        }
    }
    write_text(&dir.join("pairs.txt"), &index)
}
