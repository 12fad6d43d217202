//! Joint training: one Adam step for the generator (speaker encoder +
//! separator) followed by one AdamW step for the discriminator, per batch.
//! Batch composition is a pure function of (seed, epoch), validation is mean
//! SI-SNR improvement, and the best-validation checkpoint is retained.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, RATE_SEPARATOR, RATE_SPEAKER};
use crate::autograd::{
    clip_grad_norm, AdamConfig, AdamOptimizer, Graph, ParamId, ParamStore,
};
use crate::checkpoint::{self, CheckpointData, OptStateData};
use crate::dataset::{Manifest, MixtureExample};
use crate::error::{Error, Result};
use crate::objectives::{
    self, gen_adv_loss_graph, icl_graph, secl_graph, total_generator_loss, wrql_graph,
    LossBreakdown, LossWeights, Msd, MsdConfig,
};
use crate::separator::{Separator, SeparatorConfig};
use crate::speaker_encoder::{SpeakerEncoder, SpeakerEncoderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    DualPath,
    /// Reserved extension point; building it is out of scope here.
    ConvTasNet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub icl_on: bool,
    pub secl_on: bool,
    pub adv_on: bool,
    /// theta trainable (true) vs frozen speaker encoder (false).
    pub joint_training: bool,
    pub backbone: Backbone,
    pub seed: u64,
    pub grad_clip: f64,
    /// Adam second-moment decay for both optimizers.
    pub adam_beta2: f64,
    pub loss_weights: LossWeights,
    /// Validate every this many epochs (the final epoch always validates).
    pub val_every: usize,
    /// Stop once validation SI-SNRi reaches this value.
    pub target_val_si_snri: Option<f64>,
    pub max_steps: Option<u64>,
    pub separator: SeparatorConfig,
    pub speaker: SpeakerEncoderConfig,
    pub msd: MsdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 1e-7,
            epochs: 201,
            icl_on: true,
            secl_on: true,
            adv_on: true,
            joint_training: true,
            backbone: Backbone::DualPath,
            seed: 17,
            grad_clip: 5.0,
            adam_beta2: 0.999,
            loss_weights: LossWeights::default(),
            val_every: 1,
            target_val_si_snri: None,
            max_steps: None,
            separator: SeparatorConfig::full(),
            speaker: SpeakerEncoderConfig::full(),
            msd: MsdConfig::default(),
        }
    }
}

/// The loss/architecture axes of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationRow {
    /// Reconstruction loss only, frozen encoder.
    Baseline,
    BaselineIcl,
    BaselineIclSecl,
    BaselineIclSeclJoint,
    /// Same losses on the dual-path backbone (the CNN baseline backbone is a
    /// reserved extension point; every row here runs dual-path).
    DualPathIclSeclJoint,
    /// Full system: adversarial refinement on top.
    WithMsd,
}

impl TrainConfig {
    /// Desk-scale preset: smaller encoder and core, unchanged optimizer
    /// hyperparameters.
    pub fn toy(seed: u64) -> Self {
        Self {
            separator: SeparatorConfig::toy(),
            speaker: SpeakerEncoderConfig::toy(),
            seed,
            ..Self::default()
        }
    }

    pub fn ablation(row: AblationRow, base: &TrainConfig) -> Self {
        let mut cfg = base.clone();
        let (icl, secl, joint, adv) = match row {
            AblationRow::Baseline => (false, false, false, false),
            AblationRow::BaselineIcl => (true, false, false, false),
            AblationRow::BaselineIclSecl => (true, true, false, false),
            AblationRow::BaselineIclSeclJoint => (true, true, true, false),
            AblationRow::DualPathIclSeclJoint => (true, true, true, false),
            AblationRow::WithMsd => (true, true, true, true),
        };
        cfg.icl_on = icl;
        cfg.secl_on = secl;
        cfg.joint_training = joint;
        cfg.adv_on = adv;
        cfg.backbone = Backbone::DualPath;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig(
                "lr/weight_decay/grad_clip must be positive".into(),
            ));
        }
        if self.val_every == 0 {
            return Err(Error::InvalidConfig("val_every must be >= 1".into()));
        }
        if self.backbone != Backbone::DualPath {
            return Err(Error::InvalidConfig(
                "backbone conv_tas_net is a reserved extension point and not built".into(),
            ));
        }
        self.loss_weights.validate()?;
        self.separator.validate()
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-step losses (the logged breakdown).
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub breakdown: LossBreakdown,
    pub adv_d: Option<f64>,
    /// Pre-clip global gradient norm of the generator step.
    pub grad_norm: f64,
}

/// One line of the metric log; step records carry losses, validation records
/// carry `val_si_snri`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub wrql: Option<f64>,
    pub secl: Option<f64>,
    pub icl: Option<f64>,
    pub adv_g: Option<f64>,
    pub adv_d: Option<f64>,
    pub val_si_snri: Option<f64>,
}

pub struct TrainState {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub speaker: SpeakerEncoder,
    pub separator: Separator,
    pub msd: Msd,
    pub opt_g: AdamOptimizer,
    pub opt_d: AdamOptimizer,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    pub step: u64,
    pub best_val: Option<f64>,
}

pub(crate) fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let speaker = SpeakerEncoder::init(&mut store, &cfg.speaker, &mut rng);
        let separator = Separator::init(&mut store, &cfg.separator, &mut rng);
        let msd = Msd::init(&mut store, &cfg.msd, &mut rng);

        let mut gen_ids = speaker.param_ids();
        gen_ids.extend(separator.param_ids());
        let opt_g = AdamOptimizer::new(
            &store,
            gen_ids,
            AdamConfig {
                beta2: cfg.adam_beta2,
                ..AdamConfig::adam(cfg.lr, cfg.weight_decay)
            },
        );
        let opt_d = AdamOptimizer::new(
            &store,
            msd.param_ids(),
            AdamConfig {
                beta2: cfg.adam_beta2,
                ..AdamConfig::adamw(cfg.lr, cfg.weight_decay)
            },
        );
        Ok(Self {
            cfg,
            store,
            speaker,
            separator,
            msd,
            opt_g,
            opt_d,
            rng,
            epoch: 0,
            step: 0,
            best_val: None,
        })
    }

    fn batch_arrays(&self, batch: &[MixtureExample]) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Dataset("empty batch".into()));
        }
        let t_mix = batch[0].mixture.len();
        let t_ref = batch[0].reference.len();
        let mut mix = Array2::<f64>::zeros((b, t_mix));
        let mut tgt = Array2::<f64>::zeros((b, t_mix));
        let mut refs = Array2::<f64>::zeros((b, t_ref));
        for (i, ex) in batch.iter().enumerate() {
            if ex.mixture.sample_rate() != RATE_SEPARATOR
                || ex.reference.sample_rate() != RATE_SPEAKER
            {
                return Err(Error::Dataset("batch sample rates out of domain".into()));
            }
            if ex.mixture.len() != t_mix || ex.target.len() != t_mix || ex.reference.len() != t_ref
            {
                return Err(Error::Dataset("ragged batch lengths".into()));
            }
            mix.row_mut(i).assign(&ndarray::ArrayView1::from(ex.mixture.samples()));
            tgt.row_mut(i).assign(&ndarray::ArrayView1::from(ex.target.samples()));
            refs.row_mut(i).assign(&ndarray::ArrayView1::from(ex.reference.samples()));
        }
        Ok((mix, tgt, refs))
    }

    /// One optimization step: generator update, then (when adversarial
    /// training is on) a discriminator update on the detached estimate.
    pub fn train_step(&mut self, batch: &[MixtureExample]) -> Result<StepMetrics> {
        let cfg = self.cfg.clone();
        let (mix, tgt, refs) = self.batch_arrays(batch)?;

        // ---- generator pass ----
        let mut g = Graph::new();
        let mix_node = g.constant(mix.clone().into_dyn());
        let emb = {
            let r_node = g.constant(refs.clone().into_dyn());
            self.speaker
                .embed_graph(&mut g, &self.store, r_node, cfg.joint_training)
        };
        let out = self
            .separator
            .extract_graph(&mut g, &self.store, mix_node, emb, true);
        let (wrql, _per_item) = wrql_graph(&mut g, &tgt, out.s_hat);
        let secl = cfg
            .secl_on
            .then(|| secl_graph(&mut g, &self.store, &self.speaker, &refs, out.s_hat, cfg.joint_training));
        let icl = if cfg.icl_on {
            Some(icl_graph(&mut g, &self.store, &self.separator, out.masked_latent, true)?)
        } else {
            None
        };
        let adv_g = if cfg.adv_on {
            Some(gen_adv_loss_graph(&mut g, &self.store, &self.msd, out.s_hat)?)
        } else {
            None
        };
        let total = total_generator_loss(&mut g, wrql, secl, icl, adv_g, &cfg.loss_weights)?;
        let s_hat_detached = g
            .value(out.s_hat)
            .to_shape(mix.raw_dim())
            .unwrap()
            .to_owned();

        let grads = g.backward(total.node);
        let mut by_param = grads.by_param();
        let grad_norm = clip_grad_norm(&mut by_param, cfg.grad_clip);
        self.opt_g.step(&mut self.store, &by_param);
        drop(g);

        // ---- discriminator pass ----
        let adv_d = if cfg.adv_on {
            let mut gd = Graph::new();
            let d_loss =
                objectives::disc_loss_graph(&mut gd, &self.store, &self.msd, &tgt, &s_hat_detached)?;
            let v = gd.scalar_value(d_loss);
            if !v.is_finite() {
                return Err(Error::NonFinite("discriminator loss".into()));
            }
            let grads = gd.backward(d_loss);
            let mut by_param = grads.by_param();
            clip_grad_norm(&mut by_param, cfg.grad_clip);
            self.opt_d.step(&mut self.store, &by_param);
            Some(v)
        } else {
            None
        };

        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            epoch: self.epoch,
            breakdown: total.breakdown,
            adv_d,
            grad_norm,
        })
    }

    /// Inference-path extraction of a single example.
    pub fn extract_example(&self, ex: &MixtureExample) -> Result<Waveform> {
        let reference = if ex.reference.sample_rate() == RATE_SPEAKER {
            ex.reference.clone()
        } else {
            crate::dsp::resample(&ex.reference, RATE_SPEAKER)?
        };
        let emb = self.speaker.embed_one(&self.store, &reference)?;
        let mix = Array2::from_shape_vec((1, ex.mixture.len()), ex.mixture.samples().to_vec())
            .unwrap();
        let emb2 = emb.insert_axis(ndarray::Axis(0));
        let shat = self.separator.extract_eval(&self.store, &mix, &emb2);
        Waveform::new(shat.row(0).to_vec(), RATE_SEPARATOR)
    }

    /// Mean SI-SNR improvement over a manifest, inference mode.
    pub fn validate_si_snri(&self, examples: &[MixtureExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Dataset("empty validation set".into()));
        }
        let mut acc = 0.0;
        for ex in examples {
            let s_hat = self.extract_example(ex)?;
            let si_out = objectives::si_snr(ex.target.samples(), s_hat.samples())?;
            let si_in = objectives::si_snr(ex.target.samples(), ex.mixture.samples())?;
            acc += si_out - si_in;
        }
        Ok(acc / examples.len() as f64)
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        let params = self
            .store
            .iter()
            .map(|(_, name, v)| (name.to_string(), v.clone()))
            .collect();
        let opt_state = |opt: &AdamOptimizer| {
            let (t, m, v) = opt.state();
            OptStateData {
                t,
                entries: opt
                    .ids()
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| (self.store.name(id).to_string(), m[i].clone(), v[i].clone()))
                    .collect(),
            }
        };
        CheckpointData {
            config_json: serde_json::to_string(&self.cfg).expect("config serializes"),
            epoch: self.epoch,
            step: self.step,
            best_val: self.best_val,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            params,
            opt_g: opt_state(&self.opt_g),
            opt_d: opt_state(&self.opt_d),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(path, &self.to_checkpoint())
    }

    /// Rebuilds a state from a checkpoint; forward passes afterwards are
    /// bitwise identical to the saved state's.
    pub fn load(path: &Path) -> Result<Self> {
        let data = checkpoint::load_checkpoint(path)?;
        let cfg: TrainConfig = serde_json::from_str(&data.config_json)
            .map_err(|e| Error::Checkpoint(format!("bad config snapshot: {e}")))?;
        let mut state = TrainState::new(cfg)?;
        for (name, value) in &data.params {
            let id = state
                .store
                .id_by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if state.store.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            *state.store.value_mut(id) = value.clone();
        }
        let restore = |opt: &mut AdamOptimizer, st: &OptStateData, store: &ParamStore| -> Result<()> {
            let mut m = Vec::with_capacity(opt.ids().len());
            let mut v = Vec::with_capacity(opt.ids().len());
            for &id in opt.ids() {
                let name = store.name(id);
                let entry = st
                    .entries
                    .iter()
                    .find(|(n, _, _)| n == name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))?;
                m.push(entry.1.clone());
                v.push(entry.2.clone());
            }
            opt.restore(st.t, m, v);
            Ok(())
        };
        let store_snapshot = state.store.clone();
        restore(&mut state.opt_g, &data.opt_g, &store_snapshot)?;
        restore(&mut state.opt_d, &data.opt_d, &store_snapshot)?;
        state.rng = ChaCha8Rng::from_seed(data.rng_seed);
        state.rng.set_word_pos(data.rng_word_pos);
        state.epoch = data.epoch;
        state.step = data.step;
        state.best_val = data.best_val;
        Ok(state)
    }

    /// Ids in the generator optimizer (theta + gamma + blender + core + delta).
    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.opt_g.ids().to_vec()
    }
}

/// Outcome of a full `fit` run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub steps: u64,
    pub epochs: u64,
    pub best_val: Option<f64>,
    pub best_epoch: Option<u64>,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub log_path: PathBuf,
}

fn load_all(manifest: &Manifest) -> Result<Vec<MixtureExample>> {
    (0..manifest.records.len())
        .map(|i| manifest.load_example(i))
        .collect()
}

/// Epoch-deterministic example order.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0xE10C, epoch));
    order.shuffle(&mut rng);
    order
}

/// Trains per the config, logging one JSON line per step and per validation
/// pass, retaining the best-validation checkpoint as `best.ckpt` and the
/// final state as `last.ckpt`. A non-finite loss aborts after dumping
/// `abort.ckpt`.
pub fn fit(
    cfg: TrainConfig,
    train_manifest: &Manifest,
    val_manifest: &Manifest,
    out_dir: &Path,
) -> Result<FitReport> {
    if train_manifest.records.is_empty() || val_manifest.records.is_empty() {
        return Err(Error::Dataset("empty manifest".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train_examples = load_all(train_manifest)?;
    let val_examples = load_all(val_manifest)?;

    let mut state = TrainState::new(cfg.clone())?;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    let mut best_epoch = None;
    let mut stop = false;
    for epoch in 0..cfg.epochs as u64 {
        state.epoch = epoch;
        let order = epoch_order(cfg.seed, epoch, train_examples.len());
        let bs = cfg.batch_size.min(train_examples.len());
        for chunk in order.chunks(bs) {
            if chunk.len() < bs {
                break; // drop ragged tail batch
            }
            let batch: Vec<MixtureExample> =
                chunk.iter().map(|&i| train_examples[i].clone()).collect();
            let metrics = match state.train_step(&batch) {
                Ok(m) => m,
                Err(e @ Error::NonFinite(_)) => {
                    let dump = out_dir.join("abort.ckpt");
                    let _ = state.save(&dump);
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let rec = LogRecord {
                step: metrics.step,
                epoch,
                wrql: Some(metrics.breakdown.wrql),
                secl: metrics.breakdown.secl,
                icl: metrics.breakdown.icl,
                adv_g: metrics.breakdown.adv_g,
                adv_d: metrics.adv_d,
                val_si_snri: None,
            };
            writeln!(log, "{}", serde_json::to_string(&rec).unwrap())
                .and_then(|()| log.flush())
                .map_err(|e| Error::io(&log_path, e))?;
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                stop = true;
                break;
            }
        }

        let last_epoch = epoch + 1 == cfg.epochs as u64;
        if epoch % cfg.val_every as u64 == 0 || last_epoch || stop {
            let val = state.validate_si_snri(&val_examples)?;
            let is_best = state.best_val.is_none_or(|b| val > b);
            if is_best {
                state.best_val = Some(val);
                best_epoch = Some(epoch);
                state.save(&best_path)?;
            }
            let rec = LogRecord {
                step: state.step,
                epoch,
                wrql: None,
                secl: None,
                icl: None,
                adv_g: None,
                adv_d: None,
                val_si_snri: Some(val),
            };
            writeln!(log, "{}", serde_json::to_string(&rec).unwrap())
                .and_then(|()| log.flush())
                .map_err(|e| Error::io(&log_path, e))?;
            if cfg.target_val_si_snri.is_some_and(|t| val >= t) {
                stop = true;
            }
        }
        if stop {
            break;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    state.save(&last_path)?;
    if !best_path.exists() {
        state.save(&best_path)?;
    }
    Ok(FitReport {
        steps: state.step,
        epochs: state.epoch + 1,
        best_val: state.best_val,
        best_epoch,
        best_path,
        last_path,
        log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Arr;
    use crate::dataset;

    pub(crate) fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            separator: SeparatorConfig {
                n_filters: 8,
                kernel: 16,
                stride: 8,
                n_heads: 2,
                n_blocks: 1,
                chunk_size: 4,
                ff_hidden: 8,
            },
            speaker: SpeakerEncoderConfig {
                hidden: 8,
                layers: 2,
            },
            msd: MsdConfig {
                scales: vec![1, 2, 4],
                conv_layers: vec![(4, 7, 2), (4, 7, 2)],
                leaky_slope: 0.1,
            },
            seed,
            ..TrainConfig::default()
        }
    }

    pub(crate) fn tiny_examples(n: usize) -> Vec<MixtureExample> {
        // short utterances scaled down to keep unit tests quick: 0.5 s
        // mixtures at 8 kHz, 0.4 s references at 16 kHz
        let mut out = Vec::new();
        for i in 0..n {
            let f_t = 300.0 + 80.0 * i as f64;
            let f_i = 900.0 + 70.0 * i as f64;
            let t8: Vec<f64> = (0..4000)
                .map(|k| 0.4 * (2.0 * std::f64::consts::PI * f_t * k as f64 / 8000.0).sin())
                .collect();
            let i8: Vec<f64> = (0..4000)
                .map(|k| 0.4 * (2.0 * std::f64::consts::PI * f_i * k as f64 / 8000.0).sin())
                .collect();
            let target = Waveform::new(t8.clone(), 8000).unwrap();
            let interf = Waveform::new(i8, 8000).unwrap();
            let mixture = dataset::mix_pair(&target, &interf, 0.0).unwrap();
            let r16: Vec<f64> = (0..6400)
                .map(|k| 0.4 * (2.0 * std::f64::consts::PI * f_t * k as f64 / 16000.0).sin())
                .collect();
            out.push(MixtureExample {
                mixture,
                target,
                reference: Waveform::new(r16, 16000).unwrap(),
                target_speaker_id: format!("t{i}"),
                interferer_speaker_id: format!("i{i}"),
                gain_db: 0.0,
                target_region: (0, 0),
                reference_region: (0, 0),
            });
        }
        out
    }

    fn params_snapshot(state: &TrainState, ids: &[ParamId]) -> Vec<Arr> {
        ids.iter().map(|&id| state.store.value(id).clone()).collect()
    }

    fn changed(a: &[Arr], b: &[Arr]) -> Vec<bool> {
        a.iter().zip(b).map(|(x, y)| x != y).collect()
    }

    #[test]
    fn adv_off_leaves_discriminator_untouched() {
        let mut cfg = tiny_config(3);
        cfg.adv_on = false;
        let mut state = TrainState::new(cfg).unwrap();
        let batch = tiny_examples(2);
        let before = params_snapshot(&state, &state.msd.param_ids());
        let m = state.train_step(&batch).unwrap();
        let after = params_snapshot(&state, &state.msd.param_ids());
        assert!(changed(&before, &after).iter().all(|c| !c));
        assert!(m.adv_d.is_none());
        assert!(m.breakdown.adv_g.is_none());
    }

    #[test]
    fn frozen_encoder_leaves_theta_untouched() {
        let mut cfg = tiny_config(4);
        cfg.joint_training = false;
        cfg.secl_on = true;
        let mut state = TrainState::new(cfg).unwrap();
        let batch = tiny_examples(2);
        let theta_before = params_snapshot(&state, &state.speaker.param_ids());
        let sep_before = params_snapshot(&state, &state.separator.param_ids());
        state.train_step(&batch).unwrap();
        let theta_after = params_snapshot(&state, &state.speaker.param_ids());
        let sep_after = params_snapshot(&state, &state.separator.param_ids());
        assert!(changed(&theta_before, &theta_after).iter().all(|c| !c));
        assert!(changed(&sep_before, &sep_after).iter().any(|c| *c));
    }

    #[test]
    fn joint_training_updates_theta_even_without_secl() {
        // conditioning path alone carries gradient into the encoder
        let mut cfg = tiny_config(5);
        cfg.joint_training = true;
        cfg.secl_on = false;
        cfg.icl_on = false;
        cfg.adv_on = false;
        let mut state = TrainState::new(cfg).unwrap();
        let batch = tiny_examples(2);
        let before = params_snapshot(&state, &state.speaker.param_ids());
        state.train_step(&batch).unwrap();
        let after = params_snapshot(&state, &state.speaker.param_ids());
        assert!(changed(&before, &after).iter().any(|c| *c));
    }

    #[test]
    fn step_breakdown_sums_to_total() {
        let mut state = TrainState::new(tiny_config(6)).unwrap();
        let batch = tiny_examples(2);
        let m = state.train_step(&batch).unwrap();
        let w = state.cfg.loss_weights;
        let mut expect = w.wrql * m.breakdown.wrql;
        expect += w.secl * m.breakdown.secl.unwrap();
        expect += w.icl * m.breakdown.icl.unwrap();
        expect += w.adv_g * m.breakdown.adv_g.unwrap();
        assert!((expect - m.breakdown.total).abs() < 1e-6);
    }

    #[test]
    fn ten_steps_are_bitwise_reproducible() {
        let run = || {
            let mut state = TrainState::new(tiny_config(7)).unwrap();
            let batch = tiny_examples(4);
            let mut losses = Vec::new();
            for _ in 0..3 {
                losses.push(state.train_step(&batch).unwrap().breakdown.total);
            }
            (losses, state.to_checkpoint())
        };
        let (l1, c1) = run();
        let (l2, c2) = run();
        assert_eq!(l1, l2);
        for ((n1, a1), (n2, a2)) in c1.params.iter().zip(&c2.params) {
            assert_eq!(n1, n2);
            for (x, y) in a1.iter().zip(a2.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {n1} differs");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainState::new(tiny_config(8)).unwrap();
        let batch = tiny_examples(2);
        state.train_step(&batch).unwrap();
        let before = state.extract_example(&batch[0]).unwrap();
        let path = dir.path().join("x.ckpt");
        state.save(&path).unwrap();
        let restored = TrainState::load(&path).unwrap();
        let after = restored.extract_example(&batch[0]).unwrap();
        assert_eq!(before.samples().len(), after.samples().len());
        for (a, b) in before.samples().iter().zip(after.samples()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(restored.step, state.step);
    }

    #[test]
    fn discriminator_fits_a_static_target() {
        // with a frozen generator, 200 AdamW steps reduce the LSGAN
        // discriminator loss on a fixed pair
        let mut cfg = tiny_config(9);
        cfg.lr = 1e-3; // speed the tiny fit up; the direction is what matters
        let mut state = TrainState::new(cfg).unwrap();
        let batch = tiny_examples(2);
        let (_, tgt, _) = state.batch_arrays(&batch).unwrap();
        let fake = &tgt * 0.25 + 0.01;
        let loss_at = |state: &mut TrainState| {
            let mut g = Graph::new();
            let l = objectives::disc_loss_graph(&mut g, &state.store, &state.msd, &tgt, &fake)
                .unwrap();
            g.scalar_value(l)
        };
        let initial = loss_at(&mut state);
        for _ in 0..200 {
            let mut g = Graph::new();
            let l = objectives::disc_loss_graph(&mut g, &state.store, &state.msd, &tgt, &fake)
                .unwrap();
            let grads = g.backward(l);
            let mut by_param = grads.by_param();
            clip_grad_norm(&mut by_param, state.cfg.grad_clip);
            state.opt_d.step(&mut state.store, &by_param);
        }
        let final_loss = loss_at(&mut state);
        assert!(
            final_loss < initial * 0.5,
            "discriminator did not fit: {initial} -> {final_loss}"
        );
    }

    #[test]
    fn validation_equals_recomputation_from_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainState::new(tiny_config(10)).unwrap();
        let examples = tiny_examples(3);
        state.train_step(&examples[..2].to_vec()).unwrap();
        let v1 = state.validate_si_snri(&examples).unwrap();
        let path = dir.path().join("x.ckpt");
        state.save(&path).unwrap();
        let restored = TrainState::load(&path).unwrap();
        let v2 = restored.validate_si_snri(&examples).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
    }

    #[test]
    fn conv_tasnet_backbone_is_reserved() {
        let mut cfg = tiny_config(11);
        cfg.backbone = Backbone::ConvTasNet;
        assert!(matches!(
            TrainState::new(cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn ablation_rows_toggle_expected_flags() {
        let base = tiny_config(0);
        let rows = [
            (AblationRow::Baseline, (false, false, false, false)),
            (AblationRow::BaselineIcl, (true, false, false, false)),
            (AblationRow::BaselineIclSecl, (true, true, false, false)),
            (AblationRow::BaselineIclSeclJoint, (true, true, true, false)),
            (AblationRow::DualPathIclSeclJoint, (true, true, true, false)),
            (AblationRow::WithMsd, (true, true, true, true)),
        ];
        for (row, (icl, secl, joint, adv)) in rows {
            let cfg = TrainConfig::ablation(row, &base);
            assert_eq!(
                (cfg.icl_on, cfg.secl_on, cfg.joint_training, cfg.adv_on),
                (icl, secl, joint, adv),
                "{row:?}"
            );
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn best_checkpoint_selection_is_argmax() {
        // synthetic validation log [3.0, 5.0, 4.0] retains the middle epoch
        let vals = [3.0, 5.0, 4.0];
        let mut best: Option<(f64, usize)> = None;
        for (e, &v) in vals.iter().enumerate() {
            if best.is_none() || v > best.unwrap().0 {
                best = Some((v, e));
            }
        }
        assert_eq!(best, Some((5.0, 1)));
    }
}
