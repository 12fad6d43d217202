//! Synthetic two-speaker mixture construction from clean single-speaker
//! corpora, plus the manifest plumbing that ties WAV triples to training.
//!
//! Layout per example: a 3 s target segment and a 2 s reference segment cut
//! from non-overlapping regions of the same target utterance, and a 3 s
//! interferer segment scaled by a uniform relative gain. The mixture/target
//! live at 8 kHz (separator domain), the reference at 16 kHz (speaker
//! encoder domain).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::{read_wav, write_wav, Waveform, RATE_SEPARATOR, RATE_SPEAKER};
use crate::dsp;
use crate::error::{Error, Result};

pub const TARGET_SECS: usize = 3;
pub const REFERENCE_SECS: usize = 2;
/// 3 s at 8 kHz.
pub const MIXTURE_SAMPLES: usize = TARGET_SECS * RATE_SEPARATOR as usize;
/// 2 s at 16 kHz.
pub const REFERENCE_SAMPLES: usize = REFERENCE_SECS * RATE_SPEAKER as usize;

/// Relative gain range for the interferer, dB.
pub const GAIN_RANGE_DB: (f64, f64) = (-5.0, 5.0);
/// Joint rescale target when the raw mixture would clip.
pub const CLIP_PEAK: f64 = 0.9;

/// One training example: (mixture, target) at 8 kHz plus a disjoint
/// reference at 16 kHz.
#[derive(Debug, Clone)]
pub struct MixtureExample {
    pub mixture: Waveform,
    pub target: Waveform,
    pub reference: Waveform,
    pub target_speaker_id: String,
    pub interferer_speaker_id: String,
    pub gain_db: f64,
    /// Source-sample region of the target segment in the target utterance.
    pub target_region: (usize, usize),
    /// Source-sample region of the reference segment (disjoint from above).
    pub reference_region: (usize, usize),
}

impl MixtureExample {
    pub fn validate(&self) -> Result<()> {
        if self.target_speaker_id == self.interferer_speaker_id {
            return Err(Error::Dataset("identical speaker ids".into()));
        }
        if self.mixture.len() != self.target.len() {
            return Err(Error::LengthMismatch(self.mixture.len(), self.target.len()));
        }
        let (a0, a1) = self.target_region;
        let (b0, b1) = self.reference_region;
        if a0 < b1 && b0 < a1 {
            return Err(Error::Dataset("reference overlaps target region".into()));
        }
        Ok(())
    }
}

pub use crate::dsp::resample;

/// Log-mel features for the speaker-encoder front-end (16 kHz input).
pub fn log_mel(w: &Waveform) -> Result<Array2<f64>> {
    if w.sample_rate() != RATE_SPEAKER {
        return Err(Error::SampleRateMismatch(w.sample_rate(), RATE_SPEAKER));
    }
    dsp::log_mel(w.samples())
}

/// Samplewise sum `a + 10^(gain_db/20) * b`, truncated to the shorter input
/// ("min" mode). Returns the mixture and the joint rescale factor applied
/// when the raw peak would exceed 1 (callers apply the same factor to the
/// stored target so metrics stay consistent).
pub fn mix_pair_scaled(a: &Waveform, b: &Waveform, gain_db: f64) -> Result<(Waveform, f64)> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::SampleRateMismatch(a.sample_rate(), b.sample_rate()));
    }
    let g = 10f64.powf(gain_db / 20.0);
    let n = a.len().min(b.len());
    let mut out: Vec<f64> = (0..n).map(|k| a.samples()[k] + g * b.samples()[k]).collect();
    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let scale = if peak > 1.0 { CLIP_PEAK / peak } else { 1.0 };
    if scale != 1.0 {
        for v in out.iter_mut() {
            *v *= scale;
        }
    }
    Ok((Waveform::new(out, a.sample_rate())?, scale))
}

pub fn mix_pair(a: &Waveform, b: &Waveform, gain_db: f64) -> Result<Waveform> {
    mix_pair_scaled(a, b, gain_db).map(|(w, _)| w)
}

/// Sample uniformly from a union of inclusive integer ranges.
fn sample_from_ranges(ranges: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Option<usize> {
    let sizes: Vec<usize> = ranges
        .iter()
        .filter(|(lo, hi)| lo <= hi)
        .map(|(lo, hi)| hi - lo + 1)
        .collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return None;
    }
    let mut pick = rng.random_range(0..total);
    for (lo, hi) in ranges.iter().filter(|(lo, hi)| lo <= hi) {
        let size = hi - lo + 1;
        if pick < size {
            return Some(lo + pick);
        }
        pick -= size;
    }
    None
}

/// Cuts a 3 s target window and a disjoint 2 s reference window out of
/// `target_utt`, a 3 s window out of `interferer_utt`, and mixes at a
/// relative gain drawn uniformly from [`GAIN_RANGE_DB`].
pub fn build_example(
    target_utt: &Waveform,
    interferer_utt: &Waveform,
    target_id: &str,
    interferer_id: &str,
    seed: u64,
) -> Result<MixtureExample> {
    let rate = target_utt.sample_rate() as usize;
    let s3 = TARGET_SECS * rate;
    let s2 = REFERENCE_SECS * rate;
    if target_utt.len() < s3 + s2 {
        return Err(Error::Skipped(format!(
            "target utterance too short: {} samples, need {}",
            target_utt.len(),
            s3 + s2
        )));
    }
    let i3 = TARGET_SECS * interferer_utt.sample_rate() as usize;
    if interferer_utt.len() < i3 {
        return Err(Error::Skipped(format!(
            "interferer utterance too short: {} samples, need {}",
            interferer_utt.len(),
            i3
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Feasible target starts: a 2 s reference must still fit entirely before
    // or entirely after the 3 s window.
    let len = target_utt.len();
    let last3 = len - s3;
    let mut t_ranges: Vec<(usize, usize)> = Vec::new();
    if last3 >= s2 {
        t_ranges.push((s2, last3)); // room before
    }
    if len >= s3 + s2 {
        t_ranges.push((0, len - s3 - s2)); // room after
    }
    let t_start =
        sample_from_ranges(&t_ranges, &mut rng).ok_or_else(|| Error::Skipped("no layout".into()))?;

    let mut r_ranges: Vec<(usize, usize)> = Vec::new();
    if t_start >= s2 {
        r_ranges.push((0, t_start - s2)); // before the target window
    }
    if len - (t_start + s3) >= s2 {
        r_ranges.push((t_start + s3, len - s2)); // after it
    }
    let r_start = sample_from_ranges(&r_ranges, &mut rng)
        .ok_or_else(|| Error::Skipped("no reference slot".into()))?;

    let i_start = rng.random_range(0..=interferer_utt.len() - i3);
    let gain_db = rng.random_range(GAIN_RANGE_DB.0..GAIN_RANGE_DB.1);

    let target_8k = resample(&target_utt.segment(t_start, s3)?, RATE_SEPARATOR)?;
    let reference_16k = resample(&target_utt.segment(r_start, s2)?, RATE_SPEAKER)?;
    let interferer_8k = resample(&interferer_utt.segment(i_start, i3)?, RATE_SEPARATOR)?;

    let (mixture, scale) = mix_pair_scaled(&target_8k, &interferer_8k, gain_db)?;
    let target = if scale != 1.0 {
        Waveform::new(
            target_8k.samples().iter().map(|v| v * scale).collect(),
            RATE_SEPARATOR,
        )?
    } else {
        target_8k
    };

    let ex = MixtureExample {
        mixture,
        target,
        reference: reference_16k,
        target_speaker_id: target_id.to_string(),
        interferer_speaker_id: interferer_id.to_string(),
        gain_db,
        target_region: (t_start, t_start + s3),
        reference_region: (r_start, r_start + s2),
    };
    ex.validate()?;
    Ok(ex)
}

// ============================================================================
// Manifest
// ============================================================================

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub mixture_path: PathBuf,
    pub target_path: PathBuf,
    pub reference_path: PathBuf,
    pub target_id: String,
    pub interferer_id: String,
    pub gain_db: f64,
}

/// Line-delimited, tab-separated index of emitted WAV triples. Relative
/// paths are resolved against the manifest's directory on read.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.mixture_path.display(),
                r.target_path.display(),
                r.reference_path.display(),
                r.target_id,
                r.interferer_id,
                r.gain_db
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::Manifest(format!(
                    "{}:{}: expected 6 tab-separated fields, got {}",
                    path.display(),
                    i + 1,
                    fields.len()
                )));
            }
            let resolve = |p: &str| {
                let pb = PathBuf::from(p);
                if pb.is_absolute() {
                    pb
                } else {
                    base.join(pb)
                }
            };
            records.push(ManifestRecord {
                mixture_path: resolve(fields[0]),
                target_path: resolve(fields[1]),
                reference_path: resolve(fields[2]),
                target_id: fields[3].to_string(),
                interferer_id: fields[4].to_string(),
                gain_db: fields[5]
                    .parse()
                    .map_err(|_| Error::Manifest(format!("bad gain_db {:?}", fields[5])))?,
            });
        }
        Ok(Self { records })
    }

    /// Loads one record's audio triple.
    pub fn load_example(&self, idx: usize) -> Result<MixtureExample> {
        let r = &self.records[idx];
        let mixture = read_wav(&r.mixture_path)?;
        let target = read_wav(&r.target_path)?;
        let reference = read_wav(&r.reference_path)?;
        Ok(MixtureExample {
            mixture,
            target,
            reference,
            target_speaker_id: r.target_id.clone(),
            interferer_speaker_id: r.interferer_id.clone(),
            gain_db: r.gain_db,
            target_region: (0, 0),
            reference_region: (0, 0),
        })
    }

    /// Checks that every referenced file exists and decodes.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            for p in [&r.mixture_path, &r.target_path, &r.reference_path] {
                read_wav(p).map_err(|e| Error::Manifest(format!("record {i}: {e}")))?;
            }
        }
        Ok(())
    }
}

// ============================================================================
// Corpus scan + batch synthesis
// ============================================================================

struct SpeakerFiles {
    id: String,
    files: Vec<PathBuf>,
}

fn scan_corpus(corpus_dir: &Path) -> Result<Vec<SpeakerFiles>> {
    let mut speakers = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(corpus_dir)
        .map_err(|e| Error::io(corpus_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
            .collect();
        files.sort();
        if !files.is_empty() {
            speakers.push(SpeakerFiles {
                id: dir.file_name().unwrap().to_string_lossy().into_owned(),
                files,
            });
        }
    }
    if speakers.len() < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 speakers with WAV files, found {}",
            speakers.len()
        )));
    }
    Ok(speakers)
}

fn mix64(a: u64, b: u64) -> u64 {
    // splitmix64 over the pair; per-example streams are independent of the
    // iteration order, so parallel and serial synthesis agree
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Synthesizes `n_examples` WAV triples under `out_dir` and writes
/// `manifest.tsv`. Returns the manifest (paths relative to `out_dir`).
pub fn synth_dataset(
    corpus_dir: &Path,
    out_dir: &Path,
    n_examples: usize,
    seed: u64,
) -> Result<Manifest> {
    let speakers = scan_corpus(corpus_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let results: Vec<Result<ManifestRecord>> = (0..n_examples)
        .into_par_iter()
        .map(|i| synth_one(&speakers, out_dir, i, seed))
        .collect();
    let mut records = Vec::with_capacity(n_examples);
    for r in results {
        records.push(r?);
    }
    let manifest = Manifest { records };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

fn utt_long_enough(path: &Path, secs: usize) -> Result<bool> {
    // cheap: decode and check duration; corpora here are small
    let w = read_wav(path)?;
    Ok(w.len() >= secs * w.sample_rate() as usize)
}

fn synth_one(
    speakers: &[SpeakerFiles],
    out_dir: &Path,
    idx: usize,
    seed: u64,
) -> Result<ManifestRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, idx as u64));
    // a handful of attempts in case a drawn utterance is too short
    for _attempt in 0..16 {
        let ti = rng.random_range(0..speakers.len());
        let mut ii = rng.random_range(0..speakers.len() - 1);
        if ii >= ti {
            ii += 1;
        }
        let tf = &speakers[ti].files[rng.random_range(0..speakers[ti].files.len())];
        let inf = &speakers[ii].files[rng.random_range(0..speakers[ii].files.len())];
        if !utt_long_enough(tf, TARGET_SECS + REFERENCE_SECS)? || !utt_long_enough(inf, TARGET_SECS)? {
            continue;
        }
        let target_utt = read_wav(tf)?;
        let interferer_utt = read_wav(inf)?;
        let ex = match build_example(
            &target_utt,
            &interferer_utt,
            &speakers[ti].id,
            &speakers[ii].id,
            rng.random::<u64>(),
        ) {
            Ok(ex) => ex,
            Err(Error::Skipped(_)) => continue,
            Err(e) => return Err(e),
        };
        let names = [
            format!("ex{idx:05}.mix.wav"),
            format!("ex{idx:05}.target.wav"),
            format!("ex{idx:05}.ref.wav"),
        ];
        for (name, w) in names
            .iter()
            .zip([&ex.mixture, &ex.target, &ex.reference])
        {
            // per-example-atomic: write to a temp name, then rename
            let tmp = out_dir.join(format!(".{name}.tmp"));
            write_wav(&tmp, w)?;
            fs::rename(&tmp, out_dir.join(name)).map_err(|e| Error::io(out_dir.join(name), e))?;
        }
        return Ok(ManifestRecord {
            mixture_path: PathBuf::from(&names[0]),
            target_path: PathBuf::from(&names[1]),
            reference_path: PathBuf::from(&names[2]),
            target_id: ex.target_speaker_id,
            interferer_id: ex.interferer_speaker_id,
            gain_db: ex.gain_db,
        });
    }
    Err(Error::Dataset(format!(
        "example {idx}: no eligible utterance pair after 16 attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, secs: f64, amp: f64) -> Waveform {
        let n = (secs * rate as f64) as usize;
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
                .collect(),
            rate,
        )
        .unwrap()
    }

    #[test]
    fn mix_pair_zero_gain_is_elementwise_sum() {
        let a = tone(200.0, 8000, 0.5, 0.3);
        let b = tone(300.0, 8000, 0.5, 0.3);
        let m = mix_pair(&a, &b, 0.0).unwrap();
        for k in 0..m.len() {
            assert!((m.samples()[k] - (a.samples()[k] + b.samples()[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_pair_cancellation() {
        let a = tone(200.0, 8000, 0.25, 0.4);
        let b = Waveform::new(a.samples().iter().map(|v| -v).collect(), 8000).unwrap();
        let m = mix_pair(&a, &b, 0.0).unwrap();
        assert!(m.samples().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn mix_pair_rescales_clipping_sum_to_peak_09() {
        // 0.8 + 0.8 = 1.6 -> rescale by 0.9/1.6
        let a = Waveform::new(vec![0.8; 100], 8000).unwrap();
        let b = Waveform::new(vec![0.8; 100], 8000).unwrap();
        let (m, scale) = mix_pair_scaled(&a, &b, 0.0).unwrap();
        assert!((scale - 0.9 / 1.6).abs() < 1e-12);
        assert!(m.samples().iter().all(|&v| (v - 0.9).abs() < 1e-12));
    }

    #[test]
    fn mix_pair_rejects_rate_mismatch() {
        let a = tone(200.0, 8000, 0.5, 0.3);
        let b = tone(200.0, 16000, 0.5, 0.3);
        assert!(matches!(
            mix_pair(&a, &b, 0.0),
            Err(Error::SampleRateMismatch(..))
        ));
    }

    #[test]
    fn mix_pair_commutative_at_zero_gain() {
        let a = tone(220.0, 8000, 0.5, 0.6);
        let b = tone(330.0, 8000, 0.5, 0.7);
        let (m1, s1) = mix_pair_scaled(&a, &b, 0.0).unwrap();
        let (m2, s2) = mix_pair_scaled(&b, &a, 0.0).unwrap();
        assert_eq!(s1, s2);
        for k in 0..m1.len() {
            assert!((m1.samples()[k] - m2.samples()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn build_example_deterministic_and_disjoint() {
        let t = tone(440.0, 16000, 6.0, 0.4);
        let i = tone(600.0, 16000, 4.0, 0.4);
        let e1 = build_example(&t, &i, "a", "b", 99).unwrap();
        let e2 = build_example(&t, &i, "a", "b", 99).unwrap();
        assert_eq!(e1.mixture.samples(), e2.mixture.samples());
        assert_eq!(e1.reference.samples(), e2.reference.samples());
        assert_eq!(e1.gain_db, e2.gain_db);
        e1.validate().unwrap();
        assert_eq!(e1.mixture.len(), MIXTURE_SAMPLES);
        assert_eq!(e1.target.len(), MIXTURE_SAMPLES);
        assert_eq!(e1.reference.len(), REFERENCE_SAMPLES);
    }

    #[test]
    fn build_example_five_second_forced_layout() {
        // exactly 5 s: the reference must be the 2 s complement
        let t = tone(440.0, 16000, 5.0, 0.4);
        let i = tone(600.0, 16000, 3.0, 0.4);
        for seed in 0..20 {
            let ex = build_example(&t, &i, "a", "b", seed).unwrap();
            let (t0, t1) = ex.target_region;
            let (r0, r1) = ex.reference_region;
            if t0 == 0 {
                assert_eq!((r0, r1), (t1, t1 + 2 * 16000));
            } else {
                assert_eq!((t0, t1), (2 * 16000, 5 * 16000));
                assert_eq!((r0, r1), (0, 2 * 16000));
            }
        }
    }

    #[test]
    fn build_example_silent_interferer_gives_mixture_equal_target() {
        let t = tone(440.0, 16000, 6.0, 0.4);
        let i = Waveform::new(vec![0.0; 4 * 16000], 16000).unwrap();
        let ex = build_example(&t, &i, "a", "b", 5).unwrap();
        for k in 0..ex.mixture.len() {
            assert_eq!(ex.mixture.samples()[k], ex.target.samples()[k]);
        }
    }

    #[test]
    fn build_example_too_short_is_skip() {
        let t = tone(440.0, 16000, 4.0, 0.4); // < 5 s
        let i = tone(600.0, 16000, 4.0, 0.4);
        assert!(matches!(
            build_example(&t, &i, "a", "b", 0),
            Err(Error::Skipped(_))
        ));
    }

    fn write_corpus(dir: &Path, speakers: &[(&str, f64)]) {
        for (id, freq) in speakers {
            let sd = dir.join(id);
            fs::create_dir_all(&sd).unwrap();
            for j in 0..2 {
                let w = tone(*freq + 10.0 * j as f64, 16000, 6.0, 0.4);
                write_wav(&sd.join(format!("utt{j}.wav")), &w).unwrap();
            }
        }
    }

    #[test]
    fn synth_dataset_writes_triples_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        write_corpus(&corpus, &[("sp0", 300.0), ("sp1", 500.0)]);
        let out = dir.path().join("out");
        let m = synth_dataset(&corpus, &out, 1, 7).unwrap();
        assert_eq!(m.records.len(), 1);
        let loaded = Manifest::read(&out.join("manifest.tsv")).unwrap();
        loaded.validate().unwrap();
        let ex = loaded.load_example(0).unwrap();
        assert_eq!(ex.mixture.len(), MIXTURE_SAMPLES);
        assert_eq!(ex.reference.len(), REFERENCE_SAMPLES);
        assert_eq!(ex.mixture.sample_rate(), 8000);
        assert_eq!(ex.reference.sample_rate(), 16000);
    }

    #[test]
    fn synth_dataset_same_seed_same_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        write_corpus(&corpus, &[("sp0", 300.0), ("sp1", 500.0), ("sp2", 700.0)]);
        let m1 = synth_dataset(&corpus, &dir.path().join("o1"), 4, 11).unwrap();
        let m2 = synth_dataset(&corpus, &dir.path().join("o2"), 4, 11).unwrap();
        for (a, b) in m1.records.iter().zip(&m2.records) {
            assert_eq!(a.target_id, b.target_id);
            assert_eq!(a.interferer_id, b.interferer_id);
            assert_eq!(a.gain_db, b.gain_db);
        }
        // and the audio bytes agree
        let b1 = fs::read(dir.path().join("o1/ex00000.mix.wav")).unwrap();
        let b2 = fs::read(dir.path().join("o2/ex00000.mix.wav")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn synth_dataset_distinct_speaker_ids_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        write_corpus(
            &corpus,
            &[("sp0", 300.0), ("sp1", 500.0), ("sp2", 700.0), ("sp3", 900.0)],
        );
        let m = synth_dataset(&corpus, &dir.path().join("out"), 20, 3).unwrap();
        for r in &m.records {
            assert_ne!(r.target_id, r.interferer_id);
        }
    }

    #[test]
    fn synth_dataset_needs_two_speakers() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        write_corpus(&corpus, &[("sp0", 300.0)]);
        assert!(synth_dataset(&corpus, &dir.path().join("out"), 1, 0).is_err());
    }
}
