//! Mono waveforms and 16-bit PCM WAV I/O.
//!
//! Everything downstream works on two sample rates only: the separator
//! domain at 8 kHz and the speaker-encoder domain at 16 kHz.

use std::path::Path;

use crate::error::{Error, Result};

pub const RATE_SEPARATOR: u32 = 8_000;
pub const RATE_SPEAKER: u32 = 16_000;

/// A mono audio signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Builds a waveform, rejecting empty input, non-finite samples and
    /// sample rates other than 8 kHz / 16 kHz.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("empty sample buffer".into()));
        }
        if !matches!(sample_rate, RATE_SEPARATOR | RATE_SPEAKER) {
            return Err(Error::UnsupportedSampleRate(sample_rate));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Sub-range copy, `[start, start + len)` in samples.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() {
            return Err(Error::TooShort {
                got: self.samples.len(),
                need: start + len,
            });
        }
        Waveform::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }
}

/// Reads a mono 16-bit PCM WAV file into `[-1, 1]` floats.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::wav(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::wav(
            path,
            format!("expected mono, got {} channels", spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::wav(
            path,
            format!(
                "expected 16-bit PCM, got {:?}/{} bits",
                spec.sample_format, spec.bits_per_sample
            ),
        ));
    }
    let samples: Vec<f64> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::wav(path, e.to_string()))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a waveform as mono 16-bit PCM, clamping to `[-1, 1]`.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::wav(path, e.to_string()))?;
    for &s in w.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::wav(path, e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::wav(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_bad_rates() {
        assert!(Waveform::new(vec![], 8000).is_err());
        assert!(Waveform::new(vec![0.1], 44_100).is_err());
        assert!(Waveform::new(vec![f64::NAN], 8000).is_err());
        assert!(Waveform::new(vec![0.1], 16_000).is_ok());
    }

    #[test]
    fn wav_round_trip_preserves_sample_count_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..24_000)
            .map(|i| (i as f64 * 0.01).sin() * 0.5)
            .collect();
        let w = Waveform::new(samples, 8000).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), 24_000);
        assert_eq!(back.sample_rate(), 8000);
        let max_err = w
            .samples()
            .iter()
            .zip(back.samples())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        // 16-bit quantization
        assert!(max_err <= 1.0 / 32768.0 + 1e-12, "max_err={max_err}");
    }
}
