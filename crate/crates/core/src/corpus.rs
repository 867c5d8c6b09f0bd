//! Seeded synthetic speakers, either as Gaussian feature clouds or as
//! source-filter audio, plus balanced trial lists.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{extract_features, FeatureConfig, FeatureKind, FeatureMatrix, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::store::{FeatureStore, Utterance};
use crate::trials::{Label, TrialKey, TrialList};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    /// Gaussian frames written straight into the feature store.
    Features,
    /// Audio from per-speaker source-filter voices.
    Waveform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub mode: CorpusMode,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Frames per utterance; in waveform mode this is 10 ms units of audio.
    pub frames: usize,
    /// Feature dimension (features mode only).
    pub dim: usize,
    /// Spread of speaker characteristics (absolute in features mode,
    /// log-relative in waveform mode).
    pub between: f64,
    /// Spread across one speaker's utterances.
    pub within: f64,
    pub seed: u64,
    #[serde(default)]
    pub id_prefix: String,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            mode: CorpusMode::Waveform,
            n_speakers: 20,
            utts_per_speaker: 6,
            frames: 150,
            dim: 24,
            between: 0.15,
            within: 0.04,
            seed: 0,
            id_prefix: String::new(),
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 || self.utts_per_speaker < 2 || self.frames == 0 {
            return Err(Error::arg(
                "corpus needs at least 2 speakers, 2 utterances per speaker and 1 frame",
            ));
        }
        if !(self.between > 0.0) || !(self.within > 0.0) {
            return Err(Error::arg("between and within spreads must be > 0"));
        }
        if self.mode == CorpusMode::Features && self.dim == 0 {
            return Err(Error::arg("feature dimension must be > 0"));
        }
        Ok(())
    }

    pub fn utt_id(&self, speaker: usize, utt: usize) -> String {
        format!("{}spk{speaker:03}-utt{utt:02}", self.id_prefix)
    }

    pub fn speaker_id(&self, speaker: usize) -> String {
        format!("{}spk{speaker:03}", self.id_prefix)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticCorpus {
    /// Utterance id → speaker id.
    pub speakers: BTreeMap<String, String>,
    pub store: FeatureStore,
    pub waveforms: BTreeMap<String, Waveform>,
    pub trials: TrialList,
}

impl SyntheticCorpus {
    /// Integer speaker labels in speaker-id order, aligned with `ids`.
    pub fn labels(&self, ids: &[String]) -> Vec<usize> {
        let index: BTreeMap<&String, usize> = self
            .speakers
            .values()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        ids.iter().map(|id| index[&self.speakers[id]]).collect()
    }
}

/// Vowel formant targets (Hz).
const VOWELS: [[f64; 4]; 3] = [
    [730.0, 1090.0, 2440.0, 3400.0],
    [270.0, 2290.0, 3010.0, 3700.0],
    [300.0, 870.0, 2240.0, 3300.0],
];
const BANDWIDTHS: [f64; 4] = [80.0, 100.0, 140.0, 180.0];

#[derive(Debug, Clone)]
struct Voice {
    f0: f64,
    formants: [[f64; 4]; 3],
    bandwidth_scale: f64,
    /// One-pole glottal low-pass coefficient; sets the spectral tilt.
    tilt: f64,
    aspiration: f64,
}

fn draw_voice(rng: &mut ChaCha8Rng, spread: f64) -> Voice {
    let n = Normal::new(0.0, 1.0).unwrap();
    let tract = (spread * n.sample(rng)).exp();
    let mut formants = VOWELS;
    for v in formants.iter_mut() {
        for f in v.iter_mut() {
            *f *= tract * (0.5 * spread * n.sample(rng)).exp();
        }
    }
    Voice {
        f0: (130.0 * (2.0 * spread * n.sample(rng)).exp()).clamp(70.0, 350.0),
        formants,
        bandwidth_scale: (2.0 * spread * n.sample(rng)).exp(),
        tilt: (0.6 + 2.0 * spread * n.sample(rng)).clamp(0.05, 0.95),
        aspiration: 0.05 * (spread * n.sample(rng)).exp(),
    }
}

/// Two-pole resonator with unit gain at DC.
fn resonate(x: &[f64], freq: f64, bw: f64, sr: f64) -> Vec<f64> {
    let r = (-PI * bw / sr).exp();
    let theta = 2.0 * PI * freq.min(0.45 * sr) / sr;
    let a1 = 2.0 * r * theta.cos();
    let a2 = -r * r;
    let gain = 1.0 - a1 - a2;
    let (mut y1, mut y2) = (0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = gain * v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

fn synthesize(voice: &Voice, frames: usize, within: f64, seed: u64) -> Waveform {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let total = frames * (sr as usize / 100) + (sr as usize * 15 / 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    let gain = 0.08 * (within * n.sample(&mut rng)).exp();
    let mut out = Vec::with_capacity(total);
    // leading silence so VAD has something to drop
    let silence = |len: usize, out: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
        out.extend((0..len).map(|_| 1e-3 * n.sample(rng)));
    };
    silence((0.05 * sr) as usize, &mut out, &mut rng);
    let mut phase = 0.0;
    while out.len() < total {
        let seg = rng.random_range((0.12 * sr) as usize..(0.25 * sr) as usize);
        let vowel = rng.random_range(0..VOWELS.len());
        let f0 = voice.f0 * (within * n.sample(&mut rng)).exp();
        let mut excitation = Vec::with_capacity(seg);
        for i in 0..seg {
            phase += f0 / sr;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            // raised-cosine envelope avoids clicks at segment edges
            let env = 0.5 - 0.5 * (2.0 * PI * i as f64 / seg as f64).cos();
            excitation.push(env * (pulse + voice.aspiration * n.sample(&mut rng)));
        }
        let mut y = excitation;
        let mut prev = 0.0;
        for v in y.iter_mut() {
            prev = (1.0 - voice.tilt) * *v + voice.tilt * prev;
            *v = prev;
        }
        for (k, &f) in voice.formants[vowel].iter().enumerate() {
            let f = f * (within * n.sample(&mut rng)).exp();
            y = resonate(&y, f, BANDWIDTHS[k] * voice.bandwidth_scale, sr);
        }
        out.extend(y.iter().map(|v| gain * 40.0 * v));
        let gap = rng.random_range((0.03 * sr) as usize..(0.1 * sr) as usize);
        silence(gap, &mut out, &mut rng);
    }
    out.truncate(total);
    for v in out.iter_mut() {
        *v = v.clamp(-0.99, 0.99);
    }
    Waveform {
        samples: out,
        sample_rate: DEFAULT_SAMPLE_RATE,
    }
}

fn balanced_trials(spec: &SyntheticCorpusSpec, rng: &mut ChaCha8Rng) -> Result<TrialList> {
    let mut trials = Vec::new();
    for s in 0..spec.n_speakers {
        let enroll = spec.utt_id(s, 0);
        for u in 1..spec.utts_per_speaker {
            trials.push(TrialKey {
                enroll: enroll.clone(),
                test: spec.utt_id(s, u),
                label: Label::Target,
            });
        }
        let mut used = std::collections::BTreeSet::new();
        while used.len() < spec.utts_per_speaker - 1 {
            let other = rng.random_range(0..spec.n_speakers - 1);
            let other = if other >= s { other + 1 } else { other };
            let u = rng.random_range(1..spec.utts_per_speaker);
            if used.insert((other, u)) {
                trials.push(TrialKey {
                    enroll: enroll.clone(),
                    test: spec.utt_id(other, u),
                    label: Label::Nontarget,
                });
            }
        }
    }
    TrialList::new(trials)
}

pub fn gen_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut corpus = SyntheticCorpus::default();
    match spec.mode {
        CorpusMode::Features => {
            for s in 0..spec.n_speakers {
                let mean = Vector::from_fn(spec.dim, |_, _| spec.between * normal.sample(&mut rng));
                for u in 0..spec.utts_per_speaker {
                    let x = Matrix::from_fn(spec.dim, spec.frames, |d, _| {
                        mean[d] + spec.within * normal.sample(&mut rng)
                    });
                    let id = spec.utt_id(s, u);
                    let mut utt = Utterance {
                        speaker: Some(spec.speaker_id(s)),
                        ..Default::default()
                    };
                    utt.set_features(FeatureMatrix::new(FeatureKind::Mfcc, x, 0.01, DEFAULT_SAMPLE_RATE));
                    corpus.store.insert(id.clone(), utt);
                    corpus.speakers.insert(id, spec.speaker_id(s));
                }
            }
        }
        CorpusMode::Waveform => {
            let mut jobs = Vec::new();
            for s in 0..spec.n_speakers {
                let voice = draw_voice(&mut rng, spec.between);
                for u in 0..spec.utts_per_speaker {
                    jobs.push((spec.utt_id(s, u), s, voice.clone(), rng.random::<u64>()));
                }
            }
            let waves: Vec<Waveform> = jobs
                .par_iter()
                .map(|(_, _, voice, seed)| synthesize(voice, spec.frames, spec.within, *seed))
                .collect();
            for ((id, s, _, _), w) in jobs.into_iter().zip(waves) {
                corpus.speakers.insert(id.clone(), spec.speaker_id(s));
                corpus.waveforms.insert(id, w);
            }
        }
    }
    corpus.trials = balanced_trials(spec, &mut rng)?;
    Ok(corpus)
}

/// Runs every front end over every waveform. LPMS phase is kept.
pub fn extract_store(
    waveforms: &BTreeMap<String, Waveform>,
    speakers: &BTreeMap<String, String>,
    configs: &[FeatureConfig],
) -> Result<FeatureStore> {
    let items: Vec<(&String, &Waveform)> = waveforms.iter().collect();
    let utts: Vec<Utterance> = items
        .par_iter()
        .map(|(id, w)| {
            let mut utt = Utterance {
                speaker: speakers.get(*id).cloned(),
                ..Default::default()
            };
            for cfg in configs {
                let (feat, phase) = extract_features(w, cfg)?;
                if phase.is_some() {
                    utt.phase = phase;
                }
                utt.set_features(feat);
            }
            Ok(utt)
        })
        .collect::<Result<_>>()?;
    let mut store = FeatureStore::default();
    for ((id, _), utt) in items.into_iter().zip(utts) {
        store.insert(id.clone(), utt);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature_spec(between: f64, within: f64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            mode: CorpusMode::Features,
            n_speakers: 6,
            utts_per_speaker: 4,
            frames: 20,
            dim: 3,
            between,
            within,
            seed: 7,
            id_prefix: String::new(),
        }
    }

    #[test]
    fn deterministic() {
        let a = gen_synthetic_corpus(&feature_spec(1.0, 0.5)).unwrap();
        let b = gen_synthetic_corpus(&feature_spec(1.0, 0.5)).unwrap();
        assert_eq!(a, b);
        let mut spec = SyntheticCorpusSpec::default();
        spec.n_speakers = 2;
        spec.utts_per_speaker = 2;
        spec.frames = 30;
        let a = gen_synthetic_corpus(&spec).unwrap();
        let b = gen_synthetic_corpus(&spec).unwrap();
        assert_eq!(a.waveforms, b.waveforms);
    }

    #[test]
    fn balanced_trial_list() {
        let c = gen_synthetic_corpus(&feature_spec(1.0, 0.5)).unwrap();
        let targets = c.trials.trials.iter().filter(|t| t.label == Label::Target).count();
        assert_eq!(targets * 2, c.trials.len());
        for t in &c.trials.trials {
            let same = c.speakers[&t.enroll] == c.speakers[&t.test];
            assert_eq!(same, t.label == Label::Target);
            assert!(c.store.get(&t.test).is_ok());
        }
    }

    #[test]
    fn spreads_validated() {
        assert!(gen_synthetic_corpus(&feature_spec(0.0, 1.0)).is_err());
        assert!(gen_synthetic_corpus(&feature_spec(1.0, -1.0)).is_err());
    }

    #[test]
    fn waveforms_are_bounded_and_sized() {
        let spec = SyntheticCorpusSpec {
            n_speakers: 2,
            utts_per_speaker: 2,
            frames: 50,
            ..Default::default()
        };
        let c = gen_synthetic_corpus(&spec).unwrap();
        for w in c.waveforms.values() {
            assert_eq!(w.samples.len(), 50 * 160 + 240);
            assert!(w.samples.iter().all(|v| v.abs() < 1.0));
            let rms = (w.samples.iter().map(|v| v * v).sum::<f64>() / w.samples.len() as f64).sqrt();
            assert!(rms > 1e-2, "rms {rms}");
        }
        let store = extract_store(&c.waveforms, &c.speakers, &[FeatureConfig::mfcc(), FeatureConfig::lpms()]).unwrap();
        let u = store.get(&spec.utt_id(0, 0)).unwrap();
        assert_eq!(u.mfcc.as_ref().unwrap().frames(), 50);
        assert!(u.phase.is_some());
        // leading silence is dropped by VAD
        let mask = crate::audio::energy_vad(u.mfcc.as_ref().unwrap(), crate::audio::DEFAULT_VAD_MARGIN);
        assert!(!mask[0] && mask.iter().any(|&k| k));
    }
}
