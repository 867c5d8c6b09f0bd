//! Waveforms and acoustic features: MFCC and log power magnitude spectra
//! (LPMS), energy VAD, CMVN, and LPMS-to-waveform inversion.

mod norm;
mod spectral;
mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use norm::{apply_cmvn, cmvn_stats, energy_proxy, energy_vad, CmvnStats, DEFAULT_VAD_MARGIN};
pub use spectral::{
    dct_ii_orthonormal, extract_features, extract_lpms, extract_mfcc, filterbank_energies,
    frame_count, invert_lpms, MelFilterbank,
};
pub use wav::{read_wav, write_wav};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::arg("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::EmptyInput("waveform has no samples".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc,
    Lpms,
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureKind::Mfcc => "MFCC",
            FeatureKind::Lpms => "LPMS",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    Blackman,
}

impl WindowKind {
    /// Symmetric window of `len` samples.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        use std::f64::consts::PI;
        if len == 1 {
            return vec![1.0];
        }
        let denom = (len - 1) as f64;
        (0..len)
            .map(|n| {
                let x = 2.0 * PI * n as f64 / denom;
                match self {
                    WindowKind::Hamming => 0.54 - 0.46 * x.cos(),
                    WindowKind::Blackman => 0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub window: WindowKind,
    pub win_len_s: f64,
    pub hop_s: f64,
    pub pre_emphasis: Option<f64>,
    pub n_mels: usize,
    pub n_ceps: usize,
    /// FFT size; `None` picks the next power of two at or above the window length.
    pub n_fft: Option<usize>,
    /// Additive floor inside every logarithm.
    pub log_floor: f64,
    pub low_freq_hz: f64,
}

impl FeatureConfig {
    pub fn mfcc() -> Self {
        FeatureConfig {
            kind: FeatureKind::Mfcc,
            window: WindowKind::Hamming,
            win_len_s: 0.025,
            hop_s: 0.010,
            pre_emphasis: Some(0.97),
            n_mels: 40,
            n_ceps: 24,
            n_fft: None,
            log_floor: 1e-10,
            low_freq_hz: 20.0,
        }
    }

    pub fn lpms() -> Self {
        FeatureConfig {
            kind: FeatureKind::Lpms,
            window: WindowKind::Blackman,
            win_len_s: 0.008,
            hop_s: 0.004,
            pre_emphasis: None,
            n_mels: 0,
            n_ceps: 0,
            n_fft: None,
            log_floor: 1e-10,
            low_freq_hz: 0.0,
        }
    }

    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_len_s * sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_s * sample_rate as f64).round() as usize
    }

    pub fn fft_size(&self, sample_rate: u32) -> usize {
        self.n_fft
            .unwrap_or_else(|| self.win_samples(sample_rate).next_power_of_two())
    }

    /// Feature dimension produced at `sample_rate`.
    pub fn dim(&self, sample_rate: u32) -> usize {
        match self.kind {
            FeatureKind::Mfcc => self.n_ceps,
            FeatureKind::Lpms => self.fft_size(sample_rate) / 2 + 1,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let win = self.win_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        if win == 0 || hop == 0 {
            return Err(Error::Config("window and hop must span at least one sample".into()));
        }
        if self.hop_s > self.win_len_s {
            return Err(Error::Config(format!(
                "hop ({} s) exceeds window length ({} s)",
                self.hop_s, self.win_len_s
            )));
        }
        if self.fft_size(sample_rate) < win {
            return Err(Error::Config("n_fft is shorter than the window".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        if self.kind == FeatureKind::Mfcc {
            if self.n_mels == 0 || self.n_ceps == 0 || self.n_ceps > self.n_mels {
                return Err(Error::Config(format!(
                    "need 0 < n_ceps ({}) <= n_mels ({})",
                    self.n_ceps, self.n_mels
                )));
            }
        }
        Ok(())
    }
}

/// Per-utterance feature matrix; columns are frames in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub kind: FeatureKind,
    pub values: Matrix,
    pub frame_hop_s: f64,
    pub sample_rate: u32,
    pub vad_mask: Option<Vec<bool>>,
}

impl FeatureMatrix {
    pub fn new(kind: FeatureKind, values: Matrix, frame_hop_s: f64, sample_rate: u32) -> Self {
        FeatureMatrix {
            kind,
            values,
            frame_hop_s,
            sample_rate,
            vad_mask: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_retained(&self, t: usize) -> bool {
        self.vad_mask.as_ref().map_or(true, |m| m[t])
    }

    pub fn retained_frames(&self) -> Vec<usize> {
        (0..self.frames()).filter(|&t| self.is_retained(t)).collect()
    }

    pub fn retained_count(&self) -> usize {
        self.vad_mask
            .as_ref()
            .map_or(self.frames(), |m| m.iter().filter(|&&k| k).count())
    }

    /// Columns of retained frames only.
    pub fn retained_values(&self) -> Matrix {
        match &self.vad_mask {
            None => self.values.clone(),
            Some(_) => self.values.select_columns(self.retained_frames().iter()),
        }
    }

    pub fn with_vad(mut self, margin: f64) -> Self {
        self.vad_mask = Some(energy_vad(&self, margin));
        self
    }

    pub fn with_values(&self, values: Matrix) -> Self {
        FeatureMatrix {
            values,
            ..self.clone()
        }
    }
}

/// Phase angles paired one-to-one with an LPMS feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMatrix {
    pub values: Matrix,
}

impl PhaseMatrix {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}
