use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureConfig, FeatureKind, FeatureMatrix, PhaseMatrix, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Floor on the summed squared synthesis window during overlap-add.
const OLA_FLOOR: f64 = 1e-8;

/// Number of full frames of `win` samples at stride `hop` in `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win || hop == 0 {
        0
    } else {
        1 + (len - win) / hop
    }
}

fn check_kind(cfg: &FeatureConfig, want: FeatureKind) -> Result<()> {
    if cfg.kind != want {
        return Err(Error::arg(format!(
            "feature config is {} but {} was requested",
            cfg.kind, want
        )));
    }
    Ok(())
}

/// Windowed half-spectrum STFT frames, `n_fft / 2 + 1` bins each.
fn stft(samples: &[f64], cfg: &FeatureConfig, sample_rate: u32) -> Result<Vec<Vec<Complex<f64>>>> {
    cfg.validate(sample_rate)?;
    let win = cfg.win_samples(sample_rate);
    let hop = cfg.hop_samples(sample_rate);
    let n_fft = cfg.fft_size(sample_rate);
    let frames = frame_count(samples.len(), win, hop);
    if frames == 0 {
        return Err(Error::EmptyInput(format!(
            "waveform has {} samples, shorter than one {}-sample window",
            samples.len(),
            win
        )));
    }
    let window = cfg.window.coefficients(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        out.push(buf[..n_bins].to_vec());
    }
    Ok(out)
}

fn pre_emphasize(samples: &[f64], coeff: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len());
    let mut prev = 0.0;
    for (i, &s) in samples.iter().enumerate() {
        out.push(if i == 0 { s } else { s - coeff * prev });
        prev = s;
    }
    out
}

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular filters on the HTK mel scale, evaluated at FFT bin centres.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels × (n_fft/2 + 1)`
    pub weights: Matrix,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, low_hz: f64, high_hz: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let lo = hz_to_mel(low_hz);
        let hi = hz_to_mel(high_hz);
        let step = (hi - lo) / (n_mels + 1) as f64;
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| lo + step * i as f64).collect();
        let mut weights = Matrix::zeros(n_mels, n_bins);
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let mel = hz_to_mel(k as f64 * sample_rate as f64 / n_fft as f64);
                let w = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                weights[(m, k)] = w;
            }
        }
        let centers_hz = (0..n_mels).map(|m| mel_to_hz(edges[m + 1])).collect();
        MelFilterbank {
            weights,
            centers_hz,
        }
    }

    pub fn for_config(cfg: &FeatureConfig, sample_rate: u32) -> Self {
        MelFilterbank::new(
            cfg.n_mels,
            cfg.fft_size(sample_rate),
            sample_rate,
            cfg.low_freq_hz,
            sample_rate as f64 / 2.0,
        )
    }
}

/// Orthonormal DCT-II basis, `n_out × n_in`.
pub fn dct_ii_orthonormal(n_in: usize, n_out: usize) -> Matrix {
    let n = n_in as f64;
    Matrix::from_fn(n_out, n_in, |k, i| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos()
    })
}

/// Linear mel filterbank energies (`n_mels × frames`), before the logarithm.
pub fn filterbank_energies(w: &Waveform, cfg: &FeatureConfig) -> Result<Matrix> {
    check_kind(cfg, FeatureKind::Mfcc)?;
    let emphasized;
    let samples = match cfg.pre_emphasis {
        Some(a) => {
            emphasized = pre_emphasize(&w.samples, a);
            &emphasized[..]
        }
        None => &w.samples[..],
    };
    let frames = stft(samples, cfg, w.sample_rate)?;
    let bank = MelFilterbank::for_config(cfg, w.sample_rate);
    let n_bins = bank.weights.ncols();
    let mut power = Matrix::zeros(n_bins, frames.len());
    for (t, spec) in frames.iter().enumerate() {
        for (k, c) in spec.iter().enumerate() {
            power[(k, t)] = c.norm_sqr();
        }
    }
    Ok(&bank.weights * power)
}

/// Pre-emphasis, framing, Hamming window, power spectrum, mel filterbank,
/// log, orthonormal DCT-II, first `n_ceps` coefficients.
pub fn extract_mfcc(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let energies = filterbank_energies(w, cfg)?;
    let log_mel = energies.map(|e| (e + cfg.log_floor).ln());
    let dct = dct_ii_orthonormal(cfg.n_mels, cfg.n_ceps);
    Ok(FeatureMatrix::new(
        FeatureKind::Mfcc,
        dct * log_mel,
        cfg.hop_s,
        w.sample_rate,
    ))
}

/// Log power magnitude spectrum `ln(|X|² + floor)` and the STFT phase.
pub fn extract_lpms(w: &Waveform, cfg: &FeatureConfig) -> Result<(FeatureMatrix, PhaseMatrix)> {
    check_kind(cfg, FeatureKind::Lpms)?;
    let emphasized;
    let samples = match cfg.pre_emphasis {
        Some(a) => {
            emphasized = pre_emphasize(&w.samples, a);
            &emphasized[..]
        }
        None => &w.samples[..],
    };
    let frames = stft(samples, cfg, w.sample_rate)?;
    let n_bins = frames[0].len();
    let mut lpms = Matrix::zeros(n_bins, frames.len());
    let mut phase = Matrix::zeros(n_bins, frames.len());
    for (t, spec) in frames.iter().enumerate() {
        for (k, c) in spec.iter().enumerate() {
            lpms[(k, t)] = (c.norm_sqr() + cfg.log_floor).ln();
            phase[(k, t)] = c.arg();
        }
    }
    Ok((
        FeatureMatrix::new(FeatureKind::Lpms, lpms, cfg.hop_s, w.sample_rate),
        PhaseMatrix { values: phase },
    ))
}

pub fn extract_features(
    w: &Waveform,
    cfg: &FeatureConfig,
) -> Result<(FeatureMatrix, Option<PhaseMatrix>)> {
    match cfg.kind {
        FeatureKind::Mfcc => Ok((extract_mfcc(w, cfg)?, None)),
        FeatureKind::Lpms => extract_lpms(w, cfg).map(|(f, p)| (f, Some(p))),
    }
}

/// Rebuilds a waveform from (possibly perturbed) LPMS and a phase matrix by
/// inverse FFT and weighted overlap-add, normalised by the summed squared
/// window.
pub fn invert_lpms(lpms: &FeatureMatrix, phase: &PhaseMatrix, cfg: &FeatureConfig) -> Result<Waveform> {
    check_kind(cfg, FeatureKind::Lpms)?;
    if lpms.kind != FeatureKind::Lpms {
        return Err(Error::arg("invert_lpms needs LPMS features"));
    }
    if lpms.values.shape() != phase.values.shape() {
        return Err(Error::arg(format!(
            "LPMS is {:?} but phase is {:?}",
            lpms.values.shape(),
            phase.values.shape()
        )));
    }
    let sr = lpms.sample_rate;
    cfg.validate(sr)?;
    let win = cfg.win_samples(sr);
    let hop = cfg.hop_samples(sr);
    let n_fft = cfg.fft_size(sr);
    let n_bins = n_fft / 2 + 1;
    if lpms.dim() != n_bins {
        return Err(Error::arg(format!(
            "LPMS has {} bins but the config implies {}",
            lpms.dim(),
            n_bins
        )));
    }
    let frames = lpms.frames();
    if frames == 0 {
        return Err(Error::EmptyInput("LPMS has no frames".into()));
    }
    let window = cfg.window.coefficients(win);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let out_len = (frames - 1) * hop + win;
    let mut acc = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        for k in 0..n_bins {
            // Undo the additive floor; perturbed bins may land below it.
            let mag = (lpms.values[(k, t)].exp() - cfg.log_floor).max(0.0).sqrt();
            buf[k] = Complex::from_polar(mag, phase.values[(k, t)]);
        }
        for k in n_bins..n_fft {
            buf[k] = buf[n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..win {
            let x = buf[i].re / n_fft as f64;
            acc[start + i] += x * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    let samples = acc
        .iter()
        .zip(&norm)
        .map(|(a, n)| (a / n.max(OLA_FLOOR)).clamp(-1.0, 1.0))
        .collect();
    Waveform::new(samples, sr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, n: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(frame_count(16000, 400, 160), 98);
        assert_eq!(frame_count(400, 400, 160), 1);
        assert_eq!(frame_count(399, 400, 160), 0);
        let w = Waveform::new(vec![0.1; 16000], 16000).unwrap();
        assert_eq!(extract_mfcc(&w, &FeatureConfig::mfcc()).unwrap().frames(), 98);
    }

    #[test]
    fn silence_mfcc_is_dct_of_log_floor() {
        let cfg = FeatureConfig::mfcc();
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let m = extract_mfcc(&w, &cfg).unwrap();
        let dct = dct_ii_orthonormal(cfg.n_mels, cfg.n_ceps);
        let expected = &dct * nalgebra::DVector::from_element(cfg.n_mels, cfg.log_floor.ln());
        for t in 0..m.frames() {
            for d in 0..m.dim() {
                assert!((m.values[(d, t)] - expected[d]).abs() < 1e-9);
            }
        }
        assert_eq!(m.dim(), 24);
    }

    #[test]
    fn sine_peaks_in_nearest_mel_band() {
        let cfg = FeatureConfig::mfcc();
        let w = sine(1000.0, 8000, 0.5);
        let e = filterbank_energies(&w, &cfg).unwrap();
        let bank = MelFilterbank::for_config(&cfg, 16000);
        let nearest = (0..cfg.n_mels)
            .min_by(|&a, &b| {
                (bank.centers_hz[a] - 1000.0)
                    .abs()
                    .partial_cmp(&(bank.centers_hz[b] - 1000.0).abs())
                    .unwrap()
            })
            .unwrap();
        for t in 0..e.ncols() {
            let (argmax, _) = e.column(t).argmax();
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn lpms_zeros_and_dims() {
        let cfg = FeatureConfig::lpms();
        assert_eq!(cfg.dim(16000), 65);
        let w = Waveform::new(vec![0.0; 1600], 16000).unwrap();
        let (f, p) = extract_lpms(&w, &cfg).unwrap();
        assert_eq!(f.dim(), 65);
        assert_eq!(p.values.shape(), f.values.shape());
        assert!(f.values.iter().all(|&v| v == cfg.log_floor.ln()));
    }

    #[test]
    fn lpms_impulse_matches_window_value() {
        let cfg = FeatureConfig::lpms();
        let mut s = vec![0.0; 1024];
        // frame 4 starts at 256; its centre sample is 256 + 64
        let center = 64;
        s[4 * 64 + center] = 1.0;
        let w = Waveform::new(s, 16000).unwrap();
        let (f, _) = extract_lpms(&w, &cfg).unwrap();
        let win = cfg.window.coefficients(128);
        let expected = (win[center] * win[center] + cfg.log_floor).ln();
        for k in 0..f.dim() {
            assert!((f.values[(k, 4)] - expected).abs() < 1e-9);
        }
    }

    fn noisy_signal(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = 0.0;
        let samples = (0..n)
            .map(|i| {
                let x: f64 = rng.random_range(-0.3..0.3);
                prev = 0.7 * prev + x;
                0.5 * prev * (1.0 + (i as f64 / 900.0).sin()) / 2.5
            })
            .collect();
        Waveform::new(samples, 16000).unwrap()
    }

    #[test]
    fn lpms_inversion_round_trip() {
        let cfg = FeatureConfig::lpms();
        let w = noisy_signal(1, 4000);
        let (f, p) = extract_lpms(&w, &cfg).unwrap();
        let back = invert_lpms(&f, &p, &cfg).unwrap();
        // interior: skip the first and last frame of samples
        for i in 128..back.len() - 128 {
            assert!((back.samples[i] - w.samples[i]).abs() < 1e-3, "sample {i}");
        }
    }

    #[test]
    fn floor_lpms_inverts_to_silence() {
        let cfg = FeatureConfig::lpms();
        let f = FeatureMatrix::new(
            FeatureKind::Lpms,
            Matrix::from_element(65, 20, cfg.log_floor.ln()),
            cfg.hop_s,
            16000,
        );
        let p = PhaseMatrix {
            values: Matrix::zeros(65, 20),
        };
        let w = invert_lpms(&f, &p, &cfg).unwrap();
        assert!(w.samples.iter().all(|s| s.abs() <= cfg.log_floor.sqrt()));
    }

    #[test]
    fn perturbed_inversion_differs_with_finite_snr() {
        let cfg = FeatureConfig::lpms();
        let w = noisy_signal(2, 4000);
        let (f, p) = extract_lpms(&w, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pert = f.with_values(f.values.map(|v| v + if rng.random_bool(0.5) { 1.0 } else { -1.0 }));
        let back = invert_lpms(&pert, &p, &cfg).unwrap();
        let n = back.len();
        let signal: f64 = w.samples[..n].iter().map(|s| s * s).sum();
        let noise: f64 = w.samples[..n]
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(noise > 0.0);
        let snr = 10.0 * (signal / noise).log10();
        assert!(snr.is_finite() && snr > 0.0, "snr {snr}");
    }

    #[test]
    fn lpms_extract_invert_extract() {
        let cfg = FeatureConfig::lpms();
        let w = noisy_signal(5, 3000);
        let (f, p) = extract_lpms(&w, &cfg).unwrap();
        let back = invert_lpms(&f, &p, &cfg).unwrap();
        let (f2, _) = extract_lpms(&back, &cfg).unwrap();
        for t in 1..f2.frames() - 1 {
            for k in 0..f.dim() {
                assert!((f.values[(k, t)] - f2.values[(k, t)]).abs() <= 1e-2);
            }
        }
    }

    #[test]
    fn mfcc_shift_by_one_hop() {
        let cfg = FeatureConfig::mfcc();
        let w = noisy_signal(9, 8000);
        let shifted = Waveform::new(w.samples[160..].to_vec(), 16000).unwrap();
        let a = extract_mfcc(&w, &cfg).unwrap();
        let b = extract_mfcc(&shifted, &cfg).unwrap();
        for t in 1..b.frames() - 1 {
            for d in 0..a.dim() {
                assert!((a.values[(d, t + 1)] - b.values[(d, t)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_short_is_empty_input() {
        let w = Waveform::new(vec![0.0; 100], 16000).unwrap();
        assert!(matches!(extract_mfcc(&w, &FeatureConfig::mfcc()), Err(Error::EmptyInput(_))));
        assert!(matches!(extract_lpms(&w, &FeatureConfig::lpms()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = FeatureConfig::lpms();
        let f = FeatureMatrix::new(FeatureKind::Lpms, Matrix::zeros(65, 4), 0.004, 16000);
        let p = PhaseMatrix {
            values: Matrix::zeros(65, 3),
        };
        assert!(matches!(invert_lpms(&f, &p, &cfg), Err(Error::Argument(_))));
    }
}
