//! Shared signal-processing kernels: the band-limited resampler used both by
//! the dataset pipeline and (as a fixed linear map) inside the training graph,
//! and the log-mel front-end basis for the speaker encoder.

use std::f64::consts::PI;
use std::sync::OnceLock;

use ndarray::Array2;

use crate::audio::Waveform;
use crate::error::{Error, Result};

// ============================================================================
// Windowed-sinc polyphase resampler (8 kHz <-> 16 kHz)
// ============================================================================

/// Number of FIR taps (odd, so the group delay is an integer).
pub const RESAMPLE_TAPS: usize = 255;
/// Cutoff frequency in Hz, referred to the 16 kHz rate.
const RESAMPLE_CUTOFF_HZ: f64 = 3_800.0;

fn blackman(n: usize, len: usize) -> f64 {
    let x = 2.0 * PI * n as f64 / (len - 1) as f64;
    0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
}

/// Lowpass prototype at the 16 kHz rate, unity DC gain before the
/// interpolation-gain correction.
pub fn resample_taps() -> &'static [f64] {
    static TAPS: OnceLock<Vec<f64>> = OnceLock::new();
    TAPS.get_or_init(|| {
        let n = RESAMPLE_TAPS;
        let mid = (n - 1) / 2;
        let wc = 2.0 * PI * RESAMPLE_CUTOFF_HZ / 16_000.0;
        let mut taps: Vec<f64> = (0..n)
            .map(|k| {
                let d = k as f64 - mid as f64;
                let sinc = if k == mid { wc / PI } else { (wc * d).sin() / (PI * d) };
                sinc * blackman(k, n)
            })
            .collect();
        let dc: f64 = taps.iter().sum();
        for t in taps.iter_mut() {
            *t /= dc;
        }
        taps
    })
}

/// Output length contract: `round(len * dst / src)`.
pub fn resampled_len(len: usize, src: u32, dst: u32) -> usize {
    ((len as u64 * dst as u64 + src as u64 / 2) / src as u64) as usize
}

/// Core rate conversion with delay compensation. `up`/`down` are 1 or 2.
///
/// y[n] = sum_j h[n*down + mid - up*j] * x[j] * up
pub fn upfirdn(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    let taps = resample_taps();
    let n_taps = taps.len();
    let mid = (n_taps - 1) / 2;
    let out_len = resampled_len(x.len(), (8_000 * down) as u32, (8_000 * up) as u32);
    let gain = up as f64;
    let mut out = vec![0.0f64; out_len];
    for (n, o) in out.iter_mut().enumerate() {
        let m = n * down + mid;
        // j range with 0 <= m - up*j < n_taps
        let j_lo = (m + 1).saturating_sub(n_taps).div_ceil(up);
        let j_hi = (m / up + 1).min(x.len());
        let mut acc = 0.0;
        for j in j_lo..j_hi {
            acc += taps[m - up * j] * x[j];
        }
        *o = acc * gain;
    }
    out
}

/// Adjoint of [`upfirdn`] as a linear map (used by the backward pass of the
/// in-graph upsampler): gx[j] = sum_n gy[n] * h[n*down + mid - up*j] * up.
pub fn upfirdn_adjoint(gy: &[f64], up: usize, down: usize, in_len: usize) -> Vec<f64> {
    let taps = resample_taps();
    let n_taps = taps.len();
    let mid = (n_taps - 1) / 2;
    let gain = up as f64;
    let mut gx = vec![0.0f64; in_len];
    for (j, g) in gx.iter_mut().enumerate() {
        let mut acc = 0.0;
        // n range with 0 <= n*down + mid - up*j < n_taps
        let base = up * j;
        let n_lo = base.saturating_sub(mid).div_ceil(down);
        let n_hi = ((base + n_taps - mid - 1) / down + 1).min(gy.len());
        for n in n_lo..n_hi {
            let idx = n * down + mid - base;
            acc += taps[idx] * gy[n];
        }
        *g = acc * gain;
    }
    gx
}

/// Band-limited sample-rate conversion between 8 kHz and 16 kHz.
pub fn resample(w: &Waveform, dst_rate: u32) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::InvalidWaveform("resample of empty waveform".into()));
    }
    let src = w.sample_rate();
    if !matches!(dst_rate, 8_000 | 16_000) {
        return Err(Error::UnsupportedSampleRate(dst_rate));
    }
    if src == dst_rate {
        return Ok(w.clone());
    }
    let (up, down) = if dst_rate > src { (2, 1) } else { (1, 2) };
    Waveform::new(upfirdn(w.samples(), up, down), dst_rate)
}

// ============================================================================
// Log-mel front-end basis (16 kHz)
// ============================================================================

pub const MEL_WIN: usize = 400; // 25 ms @ 16 kHz
pub const MEL_HOP: usize = 160; // 10 ms @ 16 kHz
pub const MEL_NFFT: usize = 512;
pub const MEL_BINS: usize = MEL_NFFT / 2 + 1;
pub const N_MELS: usize = 40;
pub const MEL_FLOOR: f64 = 1e-6;

pub fn mel_frame_count(len: usize) -> Option<usize> {
    if len < MEL_WIN {
        None
    } else {
        Some((len - MEL_WIN) / MEL_HOP + 1)
    }
}

/// Precomputed windowed DFT bases and mel filterbank.
///
/// `cos`/`sin` are `[MEL_WIN, MEL_BINS]` with the Hann window folded in, so a
/// power spectrum is two GEMMs and a square; `mel` is `[MEL_BINS, N_MELS]`.
pub struct MelBasis {
    pub cos: Array2<f64>,
    pub sin: Array2<f64>,
    pub mel: Array2<f64>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelBasis {
    pub fn get() -> &'static MelBasis {
        static BASIS: OnceLock<MelBasis> = OnceLock::new();
        BASIS.get_or_init(|| {
            let window: Vec<f64> = (0..MEL_WIN)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / MEL_WIN as f64).cos())
                .collect();
            let mut cos = Array2::zeros((MEL_WIN, MEL_BINS));
            let mut sin = Array2::zeros((MEL_WIN, MEL_BINS));
            for n in 0..MEL_WIN {
                for k in 0..MEL_BINS {
                    let ang = 2.0 * PI * (k * n) as f64 / MEL_NFFT as f64;
                    cos[[n, k]] = window[n] * ang.cos();
                    sin[[n, k]] = window[n] * ang.sin();
                }
            }
            // HTK-style triangular filters, 0 Hz .. 8 kHz.
            let mel_lo = hz_to_mel(0.0);
            let mel_hi = hz_to_mel(8_000.0);
            let points: Vec<f64> = (0..N_MELS + 2)
                .map(|i| {
                    let m = mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64;
                    mel_to_hz(m)
                })
                .collect();
            let bin_hz = 16_000.0 / MEL_NFFT as f64;
            let mut mel = Array2::zeros((MEL_BINS, N_MELS));
            for b in 0..N_MELS {
                let (f_l, f_c, f_r) = (points[b], points[b + 1], points[b + 2]);
                for k in 0..MEL_BINS {
                    let f = k as f64 * bin_hz;
                    let w = if f >= f_l && f <= f_c {
                        (f - f_l) / (f_c - f_l)
                    } else if f > f_c && f <= f_r {
                        (f_r - f) / (f_r - f_c)
                    } else {
                        0.0
                    };
                    mel[[k, b]] = w;
                }
            }
            MelBasis { cos, sin, mel }
        })
    }
}

/// Log-mel features of a 16 kHz signal, `[frames, N_MELS]`.
pub fn log_mel(x: &[f64]) -> Result<Array2<f64>> {
    let frames = mel_frame_count(x.len()).ok_or(Error::TooShort {
        got: x.len(),
        need: MEL_WIN,
    })?;
    let basis = MelBasis::get();
    let mut framed = Array2::zeros((frames, MEL_WIN));
    for f in 0..frames {
        framed
            .row_mut(f)
            .assign(&ndarray::ArrayView1::from(&x[f * MEL_HOP..f * MEL_HOP + MEL_WIN]));
    }
    let re = framed.dot(&basis.cos);
    let im = framed.dot(&basis.sin);
    let power = &re * &re + &im * &im;
    let mel = power.dot(&basis.mel);
    Ok(mel.mapv(|v| (v + MEL_FLOOR).ln()))
}
