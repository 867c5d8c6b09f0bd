//! Experiment configuration: built-in profiles, TOML overlays and the
//! effective-config echo written into every report.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::DEFAULT_EPSILONS;
use crate::audio::{FeatureConfig, DEFAULT_VAD_MARGIN};
use crate::corpus::{CorpusMode, SyntheticCorpusSpec};
use crate::error::{Error, Result};
use crate::fsutil::read_text;
use crate::gmm::{CovarianceKind, UbmConfig};
use crate::ivector::TvConfig;
use crate::plda::PldaConfig;
use crate::xvector::XvectorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile {other:?}; expected paper or desk"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdaConfig {
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; component seeds are derived from it.
    pub seed: u64,
    pub epsilons: Vec<f64>,
    pub vad_margin: f64,
    pub train_corpus: SyntheticCorpusSpec,
    pub eval_corpus: SyntheticCorpusSpec,
    pub mfcc: FeatureConfig,
    pub lpms: FeatureConfig,
    pub ubm: UbmConfig,
    pub tv: TvConfig,
    pub plda: PldaConfig,
    pub lda: LdaConfig,
    pub xvector: XvectorConfig,
}

impl ExperimentConfig {
    pub fn profile(p: Profile) -> Self {
        let cfg = match p {
            Profile::Desk => ExperimentConfig {
                seed: 0,
                epsilons: DEFAULT_EPSILONS.to_vec(),
                vad_margin: DEFAULT_VAD_MARGIN,
                train_corpus: SyntheticCorpusSpec {
                    mode: CorpusMode::Waveform,
                    n_speakers: 80,
                    utts_per_speaker: 8,
                    frames: 150,
                    dim: 24,
                    between: 0.25,
                    within: 0.04,
                    seed: 0,
                    id_prefix: "train-".into(),
                },
                eval_corpus: SyntheticCorpusSpec {
                    mode: CorpusMode::Waveform,
                    n_speakers: 30,
                    utts_per_speaker: 6,
                    frames: 150,
                    dim: 24,
                    between: 0.25,
                    within: 0.04,
                    seed: 0,
                    id_prefix: "eval-".into(),
                },
                mfcc: FeatureConfig::mfcc(),
                lpms: FeatureConfig::lpms(),
                ubm: UbmConfig {
                    n_mix: 32,
                    covariance: CovarianceKind::Diagonal,
                    iters: 10,
                    kmeans_iters: 10,
                    seed: 0,
                },
                tv: TvConfig {
                    ivec_dim: 20,
                    iters: 5,
                    seed: 0,
                },
                plda: PldaConfig {
                    n_factors: None,
                    iters: 10,
                },
                lda: LdaConfig { out_dim: 8 },
                xvector: XvectorConfig {
                    epochs: 80,
                    lr: 0.05,
                    ..XvectorConfig::default()
                },
            },
            Profile::Paper => ExperimentConfig {
                seed: 0,
                epsilons: DEFAULT_EPSILONS.to_vec(),
                vad_margin: DEFAULT_VAD_MARGIN,
                train_corpus: SyntheticCorpusSpec {
                    mode: CorpusMode::Waveform,
                    n_speakers: 1000,
                    utts_per_speaker: 10,
                    frames: 800,
                    dim: 24,
                    between: 0.25,
                    within: 0.04,
                    seed: 0,
                    id_prefix: "train-".into(),
                },
                eval_corpus: SyntheticCorpusSpec {
                    mode: CorpusMode::Waveform,
                    n_speakers: 40,
                    utts_per_speaker: 10,
                    frames: 800,
                    dim: 24,
                    between: 0.25,
                    within: 0.04,
                    seed: 0,
                    id_prefix: "eval-".into(),
                },
                mfcc: FeatureConfig::mfcc(),
                lpms: FeatureConfig::lpms(),
                ubm: UbmConfig {
                    n_mix: 2048,
                    covariance: CovarianceKind::Full,
                    iters: 10,
                    kmeans_iters: 10,
                    seed: 0,
                },
                tv: TvConfig {
                    ivec_dim: 400,
                    iters: 5,
                    seed: 0,
                },
                plda: PldaConfig {
                    n_factors: None,
                    iters: 10,
                },
                lda: LdaConfig { out_dim: 200 },
                xvector: XvectorConfig {
                    contexts: vec![vec![-2, -1, 0, 1, 2], vec![-2, 0, 2], vec![-3, 0, 3], vec![0], vec![0]],
                    hidden: 512,
                    embed_dim: 512,
                    epochs: 30,
                    lr: 0.005,
                    batch_size: 32,
                    chunk_frames: 200,
                    seed: 0,
                },
            },
        };
        cfg.with_seed(0)
    }

    /// Sets the master seed and every component seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        let derive = |k: u64| seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k);
        self.train_corpus.seed = derive(1);
        self.eval_corpus.seed = derive(2);
        self.ubm.seed = derive(3);
        self.tv.seed = derive(4);
        self.xvector.seed = derive(5);
        self
    }

    /// Profile defaults, overlaid with the TOML file if one is given.
    pub fn load(profile: Profile, file: Option<&Path>) -> Result<Self> {
        let base = Self::profile(profile);
        let Some(path) = file else {
            return Ok(base);
        };
        let text = read_text(path)?;
        Self::overlay(base, &text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Merges `toml_text` over `base`. A `seed` key re-derives component seeds.
    pub fn overlay(base: Self, toml_text: &str) -> Result<Self> {
        let overlay: toml::Table = toml_text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay.clone());
        let mut cfg: ExperimentConfig =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some(seed) = overlay.get("seed").and_then(|v| v.as_integer()) {
            cfg = cfg.with_seed(seed as u64);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::Config("epsilons must be a non-empty list of finite values >= 0".into()));
        }
        let sr = crate::audio::DEFAULT_SAMPLE_RATE;
        self.mfcc.validate(sr)?;
        self.lpms.validate(sr)?;
        if self.mfcc.kind != crate::audio::FeatureKind::Mfcc || self.lpms.kind != crate::audio::FeatureKind::Lpms {
            return Err(Error::Config("[mfcc] and [lpms] sections must keep their kinds".into()));
        }
        if self.ubm.n_mix == 0 || self.tv.ivec_dim == 0 || self.lda.out_dim == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `0,0.3,1` style lists.
pub fn parse_epsilons(s: &str) -> Result<Vec<f64>> {
    let eps = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad epsilon {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if eps.is_empty() || eps.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return Err(Error::Config("epsilons must be finite and >= 0".into()));
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_round_trip_through_toml() {
        for p in [Profile::Desk, Profile::Paper] {
            let cfg = ExperimentConfig::profile(p);
            assert_eq!(ExperimentConfig::overlay(cfg.clone(), "").unwrap(), cfg);
            let again: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
            assert_eq!(again, cfg);
        }
    }

    #[test]
    fn paper_profile_values() {
        let p = ExperimentConfig::profile(Profile::Paper);
        assert_eq!(p.ubm.n_mix, 2048);
        assert_eq!(p.tv.ivec_dim, 400);
        assert_eq!(p.lda.out_dim, 200);
        assert_eq!(p.mfcc.pre_emphasis, Some(0.97));
        assert_eq!(p.epsilons, vec![0.0, 0.3, 1.0, 5.0, 10.0, 20.0, 30.0, 50.0]);
    }

    #[test]
    fn overlay_changes_only_named_keys() {
        let base = ExperimentConfig::profile(Profile::Desk);
        let cfg = ExperimentConfig::overlay(base.clone(), "[ubm]\nn_mix = 8\n").unwrap();
        assert_eq!(cfg.ubm.n_mix, 8);
        assert_eq!(cfg.tv, base.tv);
        let seeded = ExperimentConfig::overlay(base.clone(), "seed = 5").unwrap();
        assert_eq!(seeded, base.with_seed(5));
    }

    #[test]
    fn overlay_rejects_unknown_keys_and_bad_values() {
        let base = ExperimentConfig::profile(Profile::Desk);
        assert!(matches!(ExperimentConfig::overlay(base.clone(), "[ubm]\nmixtures = 8"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::overlay(base.clone(), "epsilons = [-1.0]"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::overlay(base, "not toml ="), Err(Error::Config(_))));
    }

    #[test]
    fn epsilon_lists() {
        assert_eq!(parse_epsilons("0, 0.3,1").unwrap(), vec![0.0, 0.3, 1.0]);
        assert!(parse_epsilons("0,x").is_err());
        assert!(parse_epsilons("-1").is_err());
    }

    #[test]
    fn checked_in_profiles_match_builtins() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (name, p) in [("desk", Profile::Desk), ("paper", Profile::Paper)] {
            let text = std::fs::read_to_string(root.join(format!("{name}.toml"))).unwrap();
            let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
            assert_eq!(parsed, ExperimentConfig::profile(p), "{name}.toml");
        }
    }
}
