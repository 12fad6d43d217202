//! Test-set metrics (SI-SNRi / SDRi), report files, and single-file
//! extraction.
//!
//! SDR here is the plain energy-ratio definition
//! `10*log10(||s||^2 / (||s - s_hat||^2 + eps))` — deliberately NOT the
//! BSS-Eval variant, so absolute numbers are not comparable to toolkits
//! using that definition. Unlike SI-SNR it is not scale invariant.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, Waveform, RATE_SEPARATOR, RATE_SPEAKER};
use crate::dataset::Manifest;
use crate::dsp::resample;
use crate::error::{Error, Result};
use crate::objectives::si_snr;
use crate::trainer::TrainState;

pub const SDR_EPS: f64 = 1e-8;
pub const SDR_CAP_DB: f64 = 80.0;

/// Plain energy-ratio signal-to-distortion ratio in dB, capped at +-80.
pub fn sdr(s: &[f64], s_hat: &[f64]) -> Result<f64> {
    if s.len() != s_hat.len() {
        return Err(Error::LengthMismatch(s.len(), s_hat.len()));
    }
    let s_energy: f64 = s.iter().map(|v| v * v).sum();
    if s_energy == 0.0 {
        return Err(Error::InvalidWaveform(
            "sdr: reference signal has zero energy".into(),
        ));
    }
    let err_energy: f64 = s
        .iter()
        .zip(s_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let db = 10.0 * (s_energy / (err_energy + SDR_EPS)).log10();
    Ok(db.clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    SiSnr,
    Sdr,
}

/// `metric(s, s_hat) - metric(s, mixture)`: the "i" in SI-SNRi / SDRi.
pub fn improvement(metric: Metric, s: &[f64], s_hat: &[f64], mixture: &[f64]) -> Result<f64> {
    let f = match metric {
        Metric::SiSnr => si_snr,
        Metric::Sdr => sdr,
    };
    Ok(f(s, s_hat)? - f(s, mixture)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub si_snr_in: f64,
    pub si_snr_out: f64,
    pub si_snri: f64,
    pub sdr_in: f64,
    pub sdr_out: f64,
    pub sdri: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub count: usize,
    pub mean_si_snr_in: f64,
    pub mean_si_snr_out: f64,
    pub mean_si_snri: f64,
    pub mean_sdr_in: f64,
    pub mean_sdr_out: f64,
    pub mean_sdri: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedRow {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregate: EvalAggregate,
    pub skipped: Vec<SkippedRow>,
    /// Snapshot of the training configuration the checkpoint carries.
    pub config: serde_json::Value,
}

fn aggregate(rows: &[EvalRow]) -> EvalAggregate {
    let n = rows.len().max(1) as f64;
    let sum = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    EvalAggregate {
        count: rows.len(),
        mean_si_snr_in: sum(|r| r.si_snr_in),
        mean_si_snr_out: sum(|r| r.si_snr_out),
        mean_si_snri: sum(|r| r.si_snri),
        mean_sdr_in: sum(|r| r.sdr_in),
        mean_sdr_out: sum(|r| r.sdr_out),
        mean_sdri: sum(|r| r.sdri),
    }
}

/// Evaluates a trained state over a manifest. Missing or undecodable files
/// are listed in `skipped` and evaluation continues; rows are keyed by id
/// and sorted before aggregation, so a parallel caller would produce the
/// identical report.
pub fn evaluate(state: &TrainState, manifest: &Manifest) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (i, record) in manifest.records.iter().enumerate() {
        let id = format!(
            "{:05}:{}",
            i,
            record
                .mixture_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        );
        let ex = match manifest.load_example(i) {
            Ok(ex) => ex,
            Err(e) => {
                skipped.push(SkippedRow {
                    id,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let s_hat = state.extract_example(&ex)?;
        let s = ex.target.samples();
        let mix = ex.mixture.samples();
        let est = s_hat.samples();
        let si_snr_in = si_snr(s, mix)?;
        let si_snr_out = si_snr(s, est)?;
        let sdr_in = sdr(s, mix)?;
        let sdr_out = sdr(s, est)?;
        rows.push(EvalRow {
            id,
            si_snr_in,
            si_snr_out,
            si_snri: si_snr_out - si_snr_in,
            sdr_in,
            sdr_out,
            sdri: sdr_out - sdr_in,
        });
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let aggregate = aggregate(&rows);
    Ok(EvalReport {
        rows,
        aggregate,
        skipped,
        config: serde_json::to_value(&state.cfg).unwrap_or(serde_json::Value::Null),
    })
}

/// Convenience wrapper: load checkpoint, evaluate, optionally write JSON.
pub fn evaluate_checkpoint(
    manifest_path: &Path,
    checkpoint_path: &Path,
    out_path: Option<&Path>,
) -> Result<EvalReport> {
    let manifest = Manifest::read(manifest_path)?;
    let state = TrainState::load(checkpoint_path)?;
    let report = evaluate(&state, &manifest)?;
    if let Some(p) = out_path {
        write_report(&report, p)?;
    }
    Ok(report)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Dataset(format!("report serialization: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("report parse: {e}")))
}

/// Human-readable table of a report.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>10} {:>10} {:>9} {:>10} {:>10} {:>9}\n",
        "id", "si_snr_in", "si_snr_out", "si_snri", "sdr_in", "sdr_out", "sdri"
    ));
    for r in &report.rows {
        out.push_str(&format!(
            "{:<24} {:>10.3} {:>10.3} {:>9.3} {:>10.3} {:>10.3} {:>9.3}\n",
            r.id, r.si_snr_in, r.si_snr_out, r.si_snri, r.sdr_in, r.sdr_out, r.sdri
        ));
    }
    let a = &report.aggregate;
    out.push_str(&format!(
        "{:<24} {:>10.3} {:>10.3} {:>9.3} {:>10.3} {:>10.3} {:>9.3}\n",
        format!("mean ({} rows)", a.count),
        a.mean_si_snr_in,
        a.mean_si_snr_out,
        a.mean_si_snri,
        a.mean_sdr_in,
        a.mean_sdr_out,
        a.mean_sdri
    ));
    for s in &report.skipped {
        out.push_str(&format!("skipped {}: {}\n", s.id, s.reason));
    }
    out
}

/// Extracts the target speaker from `mixture_wav` (8 kHz) using
/// `reference_wav` (16 kHz, or 8 kHz which is resampled up) and the given
/// checkpoint; writes a 16-bit PCM 8 kHz WAV of the same length as the
/// input mixture.
pub fn extract_file(
    mixture_wav: &Path,
    reference_wav: &Path,
    checkpoint_path: &Path,
    out_wav: &Path,
) -> Result<()> {
    let state = TrainState::load(checkpoint_path)?;
    let mixture = read_wav(mixture_wav)?;
    if mixture.sample_rate() != RATE_SEPARATOR {
        return Err(Error::wav(
            mixture_wav,
            format!(
                "mixture must be {} Hz, got {}",
                RATE_SEPARATOR,
                mixture.sample_rate()
            ),
        ));
    }
    if mixture.len() < state.cfg.separator.kernel {
        return Err(Error::TooShort {
            got: mixture.len(),
            need: state.cfg.separator.kernel,
        });
    }
    let reference = read_wav(reference_wav)?;
    let reference = if reference.sample_rate() == RATE_SPEAKER {
        reference
    } else {
        resample(&reference, RATE_SPEAKER)?
    };
    let ex = crate::dataset::MixtureExample {
        target: mixture.clone(), // unused by extraction
        mixture,
        reference,
        target_speaker_id: "query".into(),
        interferer_speaker_id: "unknown".into(),
        gain_db: 0.0,
        target_region: (0, 0),
        reference_region: (0, 0),
    };
    let s_hat = state.extract_example(&ex)?;
    debug_assert_eq!(s_hat.len(), ex.mixture.len());
    let w = Waveform::new(s_hat.samples().to_vec(), RATE_SEPARATOR)?;
    write_wav(out_wav, &w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sdr_fixed_points() {
        let s: Vec<f64> = (0..64).map(|i| ((i % 7) as f64 - 3.0) * 0.2).collect();
        // s_hat = s -> cap
        assert_eq!(sdr(&s, &s).unwrap(), SDR_CAP_DB);
        // s_hat = 0 -> 0 dB
        let zeros = vec![0.0; 64];
        assert!(sdr(&s, &zeros).unwrap().abs() < 1e-6);
        // s_hat = 2s -> 0 dB: NOT scale invariant
        let doubled: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert!(sdr(&s, &doubled).unwrap().abs() < 1e-6);
        // while si_snr on the same inputs hits its cap
        assert_eq!(si_snr(&s, &doubled).unwrap(), 80.0);
    }

    #[test]
    fn improvement_identities() {
        let s: Vec<f64> = (0..64).map(|i| ((i % 5) as f64 - 2.0) * 0.3).collect();
        let mix: Vec<f64> = s.iter().enumerate().map(|(i, v)| v + 0.1 * ((i % 3) as f64 - 1.0)).collect();
        // estimate == mixture -> exactly 0 improvement
        assert_eq!(
            improvement(Metric::SiSnr, &s, &mix, &mix).unwrap(),
            0.0
        );
        assert_eq!(improvement(Metric::Sdr, &s, &mix, &mix).unwrap(), 0.0);
        // estimate == target -> cap minus mixture score, positive here
        let up = improvement(Metric::SiSnr, &s, &s, &mix).unwrap();
        assert!(up > 0.0);
        // degenerate: silent interferer (mixture == target) and perfect
        // estimate -> cap - cap = 0
        assert_eq!(improvement(Metric::SiSnr, &s, &s, &s).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_is_mean_of_rows() {
        let rows: Vec<EvalRow> = (0..5)
            .map(|i| EvalRow {
                id: format!("{i}"),
                si_snr_in: i as f64,
                si_snr_out: 2.0 * i as f64,
                si_snri: i as f64,
                sdr_in: 0.5 * i as f64,
                sdr_out: i as f64,
                sdri: 0.5 * i as f64,
            })
            .collect();
        let a = super::aggregate(&rows);
        assert!((a.mean_si_snri - 2.0).abs() < 1e-9);
        assert!((a.mean_si_snr_out - 4.0).abs() < 1e-9);
        assert_eq!(a.count, 5);
    }

    #[test]
    fn report_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport {
            rows: vec![EvalRow {
                id: "a".into(),
                si_snr_in: 1.0,
                si_snr_out: 2.0,
                si_snri: 1.0,
                sdr_in: 0.5,
                sdr_out: 1.5,
                sdri: 1.0,
            }],
            aggregate: super::aggregate(&[]),
            skipped: vec![SkippedRow {
                id: "b".into(),
                reason: "missing".into(),
            }],
            config: serde_json::json!({"seed": 1}),
        };
        let p = dir.path().join("report.json");
        write_report(&report, &p).unwrap();
        let back = read_report(&p).unwrap();
        assert_eq!(back.rows.len(), 1);
        assert_eq!(back.skipped.len(), 1);
        let table = render_report(&back);
        assert!(table.contains("si_snri"));
        assert!(table.contains("skipped b"));
    }
}
