//! Recurrent speaker encoder: variable-length 16 kHz reference in, 256-d
//! unit-norm embedding out. Trained jointly with the separator; there are no
//! pretrained weights at this scale.
//!
//! Pipeline: log-mel (25 ms / 10 ms / 40 bands) -> 3-layer LSTM -> last
//! frame's hidden state -> linear projection to 256 -> L2 normalization.
//! The whole thing is built on tape ops, so gradients reach the encoder
//! parameters both through the conditioning path and through the embedding
//! consistency loss.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, RATE_SPEAKER};
use crate::autograd::{orthogonal_init, uniform_fan_in, Arr, Graph, NodeId, ParamId, ParamStore};
use crate::dsp::{self, MelBasis, MEL_HOP, MEL_WIN, N_MELS};
use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpeakerEncoderConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl SpeakerEncoderConfig {
    pub fn full() -> Self {
        Self {
            hidden: 256,
            layers: 3,
        }
    }

    pub fn toy() -> Self {
        Self {
            hidden: 64,
            layers: 3,
        }
    }
}

struct LstmIds {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

/// Parameter handle set for the encoder (the theta group).
pub struct SpeakerEncoder {
    pub cfg: SpeakerEncoderConfig,
    layers: Vec<LstmIds>,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// Orthogonal per-gate recurrent matrix `[h, gates*h]`.
fn recurrent_init(h: usize, gates: usize, rng: &mut ChaCha8Rng) -> Arr {
    let mut w = Array2::<f64>::zeros((h, gates * h));
    for g in 0..gates {
        let q = orthogonal_init(h, h, rng);
        w.slice_mut(ndarray::s![.., g * h..(g + 1) * h]).assign(&q);
    }
    w.into_dyn()
}

impl SpeakerEncoder {
    pub fn init(store: &mut ParamStore, cfg: &SpeakerEncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let d_in = if l == 0 { N_MELS } else { h };
            let wx = store.add(
                format!("spk.lstm{l}.wx"),
                uniform_fan_in(&[d_in, 4 * h], d_in, rng),
            );
            let wh = store.add(format!("spk.lstm{l}.wh"), recurrent_init(h, 4, rng));
            // forget-gate bias 1 helps gradient flow early in training
            let mut b = Array1::<f64>::zeros(4 * h);
            b.slice_mut(ndarray::s![h..2 * h]).fill(1.0);
            let b = store.add(format!("spk.lstm{l}.b"), b.into_dyn());
            layers.push(LstmIds { wx, wh, b });
        }
        let proj_w = store.add(
            "spk.proj.w",
            uniform_fan_in(&[h, EMBED_DIM], h, rng),
        );
        let proj_b = store.add("spk.proj.b", Arr::zeros(ndarray::IxDyn(&[EMBED_DIM])));
        Self {
            cfg: cfg.clone(),
            layers,
            proj_w,
            proj_b,
        }
    }

    /// The theta parameter group.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend([l.wx, l.wh, l.b]);
        }
        ids.extend([self.proj_w, self.proj_b]);
        ids
    }

    /// Embedding of a batch of equal-length 16 kHz waveforms `[B, t]`.
    /// `trainable: false` detaches the encoder parameters (frozen-encoder
    /// ablations); gradients still flow back into the waveform itself.
    pub fn embed_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        wave: NodeId,
        trainable: bool,
    ) -> NodeId {
        let t = g.shape(wave)[1];
        assert!(
            t >= MEL_WIN,
            "speaker encoder input shorter than one analysis window"
        );
        let b = g.shape(wave)[0];
        let frames_n = (t - MEL_WIN) / MEL_HOP + 1;

        // log-mel front-end as tape ops over fixed DFT/mel bases
        let basis = MelBasis::get();
        let cos = g.constant(basis.cos.clone().into_dyn());
        let sin = g.constant(basis.sin.clone().into_dyn());
        let melw = g.constant(basis.mel.clone().into_dyn());
        let framed = g.frame_signal(wave, MEL_WIN, MEL_HOP); // [B, F, win]
        let flat = g.reshape(framed, &[b * frames_n, MEL_WIN]);
        let re = g.matmul(flat, cos);
        let im = g.matmul(flat, sin);
        let re2 = g.mul(re, re);
        let im2 = g.mul(im, im);
        let power = g.add(re2, im2);
        let mel = g.matmul(power, melw);
        let mel = g.add_scalar(mel, dsp::MEL_FLOOR);
        let logmel = g.ln(mel);
        let feats = g.reshape(logmel, &[b, frames_n, N_MELS]);
        let mut x = g.permute(feats, &[1, 0, 2]); // [F, B, n_mels]

        for l in &self.layers {
            let w = crate::autograd::RnnWeights {
                wx: g.param(store, l.wx, trainable),
                wh: g.param(store, l.wh, trainable),
                b: g.param(store, l.b, trainable),
            };
            x = g.lstm_seq(x, &w);
        }
        let last = g.select_axis0(x, frames_n - 1); // [B, H]
        let pw = g.param(store, self.proj_w, trainable);
        let pb = g.param(store, self.proj_b, trainable);
        let emb = g.linear(last, pw, pb);
        g.l2_normalize_rows(emb)
    }

    /// Inference-path embedding of one reference waveform.
    pub fn embed_one(&self, store: &ParamStore, w: &Waveform) -> Result<Array1<f64>> {
        if w.sample_rate() != RATE_SPEAKER {
            return Err(Error::SampleRateMismatch(w.sample_rate(), RATE_SPEAKER));
        }
        if w.len() < MEL_WIN {
            return Err(Error::TooShort {
                got: w.len(),
                need: MEL_WIN,
            });
        }
        let mut g = Graph::new();
        let batch =
            Array2::from_shape_vec((1, w.len()), w.samples().to_vec()).unwrap();
        let wave = g.constant(batch.into_dyn());
        let emb = self.embed_graph(&mut g, store, wave, false);
        let v = g.value(emb).to_shape(EMBED_DIM).unwrap().to_owned();
        Ok(v)
    }
}

/// Plain dot product of two unit-norm embeddings.
pub fn cosine(e1: &Array1<f64>, e2: &Array1<f64>) -> f64 {
    e1.dot(e2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_encoder() -> (ParamStore, SpeakerEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SpeakerEncoderConfig {
            hidden: 8,
            layers: 3,
        };
        let enc = SpeakerEncoder::init(&mut store, &cfg, &mut rng);
        (store, enc)
    }

    fn noise_wave(seed: u64, len: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.random_range(-0.5..0.5)).collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let (store, enc) = tiny_encoder();
        let w = noise_wave(3, 8000);
        let e1 = enc.embed_one(&store, &w).unwrap();
        let e2 = enc.embed_one(&store, &w).unwrap();
        assert_eq!(e1, e2);
        let norm = e1.dot(&e1).sqrt();
        assert!((norm - 1.0).abs() < 1e-5, "norm={norm}");
        assert!(e1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn squared_distance_matches_cosine_identity() {
        // for unit vectors ||e1-e2||^2 = 2 - 2 cos
        let (store, enc) = tiny_encoder();
        let e1 = enc.embed_one(&store, &noise_wave(4, 9000)).unwrap();
        let e2 = enc.embed_one(&store, &noise_wave(5, 7000)).unwrap();
        let d2: f64 = (&e1 - &e2).iter().map(|v| v * v).sum();
        let c = cosine(&e1, &e2);
        assert!((d2 - (2.0 - 2.0 * c)).abs() < 1e-6);
    }

    #[test]
    fn rejects_wrong_rate_and_short_input() {
        let (store, enc) = tiny_encoder();
        let w8 = Waveform::new(vec![0.1; 8000], 8000).unwrap();
        assert!(enc.embed_one(&store, &w8).is_err());
        let short = Waveform::new(vec![0.1; 399], 16000).unwrap();
        assert!(enc.embed_one(&store, &short).is_err());
    }

    #[test]
    fn all_theta_params_receive_gradient() {
        let (store, enc) = tiny_encoder();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wave = g.constant(Arr::from_shape_fn(ndarray::IxDyn(&[2, 1200]), |_| {
            rng.random_range(-0.5..0.5)
        }));
        let emb = enc.embed_graph(&mut g, &store, wave, true);
        // a generic scalar head so no direction is privileged
        let weights = g.constant(Arr::from_shape_fn(ndarray::IxDyn(&[2, 256]), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let prod = g.mul(emb, weights);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let by_param = grads.by_param();
        for id in enc.param_ids() {
            let found = by_param
                .iter()
                .find(|(pid, _)| *pid == id)
                .unwrap_or_else(|| panic!("no grad for {}", store.name(id)));
            assert!(
                found.1.iter().any(|&v| v != 0.0),
                "zero grad for {}",
                store.name(id)
            );
        }
    }
}
