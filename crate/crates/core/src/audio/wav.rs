use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

const PCM16_SCALE: f64 = 32768.0;

fn format_error(err: hound::Error, path: &Path) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::FormatError(msg) => {
            let chunk = if msg.contains("fmt") {
                "fmt "
            } else if msg.contains("data") {
                "data"
            } else {
                "RIFF"
            };
            Error::Format {
                chunk: chunk.into(),
                message: msg.into(),
            }
        }
        hound::Error::Unsupported => Error::Format {
            chunk: "fmt ".into(),
            message: "unsupported encoding".into(),
        },
        other => Error::Format {
            chunk: "fmt ".into(),
            message: other.to_string(),
        },
    }
}

/// Reads a 16-bit PCM WAV file. Multi-channel audio is averaged to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path).map_err(|e| format_error(e, path))?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format {
            chunk: "fmt ".into(),
            message: format!(
                "expected 16-bit integer PCM, found {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    let channels = spec.channels.max(1) as usize;
    let raw = reader
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_error(e, path))?;
    if raw.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no samples", path.display())));
    }
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64).sum::<f64>() / (channels as f64 * PCM16_SCALE))
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV file atomically.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut writer = WavWriter::new(&mut buf, spec).map_err(|e| format_error(e, path))?;
        for &s in &wave.samples {
            let q = (s * PCM16_SCALE).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(q).map_err(|e| format_error(e, path))?;
        }
        writer.finalize().map_err(|e| format_error(e, path))?;
    }
    let bytes = buf.into_inner();
    atomic_write(path, |w| w.write_all(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, spec: WavSpec, samples: &[i16]) {
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    fn mono16() -> WavSpec {
        WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        }
    }

    #[test]
    fn zeros_and_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_raw(&p, mono16(), &[0, 0, 0, 16384]);
        let w = read_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.0, 0.0, 0.0, 0.5]);
        assert_eq!(w.sample_rate, 16000);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            ..mono16()
        };
        write_raw(&p, spec, &[16384, 0, -16384, -16384]);
        let w = read_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.25, -0.5]);
    }

    #[test]
    fn sine_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sine.wav");
        let samples: Vec<f64> = (0..1600)
            .map(|n| 0.8 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16000.0).sin())
            .collect();
        let w = Waveform::new(samples.clone(), 16000).unwrap();
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn empty_and_float_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.wav");
        write_raw(&p, mono16(), &[]);
        assert!(matches!(read_wav(&p), Err(Error::EmptyInput(_))));

        let p = dir.path().join("f.wav");
        let spec = WavSpec {
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
            ..mono16()
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        match read_wav(&p) {
            Err(Error::Format { chunk, .. }) => assert_eq!(chunk, "fmt "),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn garbage_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.wav");
        std::fs::write(&p, b"not a wav file at all").unwrap();
        assert!(matches!(read_wav(&p), Err(Error::Format { .. })));
    }
}
