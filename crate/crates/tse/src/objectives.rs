//! Training objectives: negative SI-SNR reconstruction (WRQL), speaker
//! embedding consistency (SECL), waveform encoder/decoder inverse
//! consistency (ICL), and the least-squares adversarial pair around a
//! multi-scale waveform discriminator (MSD).
//!
//! Every loss exists as tape ops so its gradient can be checked against
//! central finite differences; `si_snr` also has a plain evaluation-path
//! implementation shared with the metrics module.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{uniform_fan_in, Arr, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::separator::Separator;
use crate::speaker_encoder::SpeakerEncoder;

/// Numerical floor inside the SI-SNR ratio; Eq-level SI-SNR is singular at
/// zero noise, the floor caps the value at 80 dB either way.
pub const SI_SNR_EPS: f64 = 1e-8;
pub const SI_SNR_CAP_DB: f64 = 80.0;

const LOG10_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

// ============================================================================
// SI-SNR / WRQL
// ============================================================================

/// Scale-invariant SNR in dB of estimate `s_hat` against ground truth `s`.
/// Both are zero-meaned internally; the result is capped at +-80 dB.
pub fn si_snr(s: &[f64], s_hat: &[f64]) -> Result<f64> {
    if s.len() != s_hat.len() {
        return Err(Error::LengthMismatch(s.len(), s_hat.len()));
    }
    let n = s.len() as f64;
    let ms = s.iter().sum::<f64>() / n;
    let mh = s_hat.iter().sum::<f64>() / n;
    let mut dot = 0.0;
    let mut s_energy = 0.0;
    for k in 0..s.len() {
        let sv = s[k] - ms;
        let hv = s_hat[k] - mh;
        dot += sv * hv;
        s_energy += sv * sv;
    }
    if s_energy == 0.0 {
        return Err(Error::InvalidWaveform(
            "si_snr: reference signal has zero energy".into(),
        ));
    }
    let coef = dot / s_energy;
    let target_energy = coef * coef * s_energy;
    let mut noise_energy = 0.0;
    for k in 0..s.len() {
        let sv = s[k] - ms;
        let hv = s_hat[k] - mh;
        let e = hv - coef * sv;
        noise_energy += e * e;
    }
    let db = LOG10_SCALE * ((target_energy + SI_SNR_EPS).ln() - (noise_energy + SI_SNR_EPS).ln());
    Ok(db.clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

/// Per-item SI-SNR `[B]` as tape ops; `s` is the (constant) ground truth.
pub fn si_snr_graph(g: &mut Graph, s: &Array2<f64>, s_hat: NodeId) -> NodeId {
    let (b, n) = s.dim();
    assert_eq!(g.shape(s_hat), &[b, n], "si_snr: estimate shape");
    // constants derived from s: zero-mean rows, their energies, and
    // rows pre-divided by the energy so the projection is one row-dot
    let mut s0 = s.clone();
    let mut energies = Array1::<f64>::zeros(b);
    for (mut row, e) in s0.outer_iter_mut().zip(energies.iter_mut()) {
        let m = row.mean().unwrap();
        row.mapv_inplace(|v| v - m);
        *e = row.dot(&row);
        assert!(*e > 0.0, "si_snr: reference signal has zero energy");
    }
    let mut s0_over_e = s0.clone();
    for (mut row, &e) in s0_over_e.outer_iter_mut().zip(energies.iter()) {
        row.mapv_inplace(|v| v / e);
    }
    let s0_node = g.constant(s0.into_dyn());
    let s0e_node = g.constant(s0_over_e.into_dyn());
    let energies_node = g.constant(energies.into_dyn());

    let h0 = g.sub_row_mean(s_hat);
    let coef = g.row_dot(h0, s0e_node); // [B]
    let coef_sq = g.mul(coef, coef);
    let target_energy = g.mul(coef_sq, energies_node); // coef^2 * ||s0||^2
    let proj = g.mul_row_broadcast(s0_node, coef); // [B, n]
    let noise = g.sub(h0, proj);
    let noise_energy = g.row_dot(noise, noise);
    let num = g.add_scalar(target_energy, SI_SNR_EPS);
    let den = g.add_scalar(noise_energy, SI_SNR_EPS);
    let ln_num = g.ln(num);
    let ln_den = g.ln(den);
    let ratio = g.sub(ln_num, ln_den);
    let db = g.scale(ratio, LOG10_SCALE);
    g.clamp(db, -SI_SNR_CAP_DB, SI_SNR_CAP_DB)
}

/// Waveform reconstruction quality loss: batch mean of -SI-SNR. Returns the
/// scalar loss and the per-item SI-SNR node for logging.
pub fn wrql_graph(g: &mut Graph, s: &Array2<f64>, s_hat: NodeId) -> (NodeId, NodeId) {
    let per_item = si_snr_graph(g, s, s_hat);
    let mean = g.mean_all(per_item);
    (g.neg(mean), per_item)
}

// ============================================================================
// SECL
// ============================================================================

/// Squared distance of two embeddings (diagnostics-path counterpart of the
/// in-graph loss).
pub fn embedding_sq_dist(e1: &Array1<f64>, e2: &Array1<f64>) -> f64 {
    (e1 - e2).iter().map(|v| v * v).sum()
}

/// Speaker embedding consistency: `||SE(r) - SE(upsample(s_hat))||^2`,
/// batch-meaned. `reference` is 16 kHz `[B, 2t]`-ish, `s_hat` is the 8 kHz
/// estimate `[B, t]`. Gradients flow into theta through both embedding
/// branches when `joint` is set, and into the separator through `s_hat`
/// either way.
pub fn secl_graph(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &SpeakerEncoder,
    reference: &Array2<f64>,
    s_hat: NodeId,
    joint: bool,
) -> NodeId {
    let r_node = g.constant(reference.clone().into_dyn());
    let e_ref = encoder.embed_graph(g, store, r_node, joint);
    let up = g.upsample_2x(s_hat);
    let e_hat = encoder.embed_graph(g, store, up, joint);
    let d = g.sub(e_ref, e_hat);
    let per_item = g.row_dot(d, d);
    g.mean_all(per_item)
}

// ============================================================================
// ICL
// ============================================================================

/// Inverse consistency: mean squared error between the masked latent `m` and
/// its decode-then-encode round trip. Errors if the round trip changes the
/// latent shape (which would mean broken length arithmetic).
pub fn icl_graph(
    g: &mut Graph,
    store: &ParamStore,
    separator: &Separator,
    m: NodeId,
    trainable: bool,
) -> Result<NodeId> {
    let m_shape = g.shape(m).to_vec();
    let decoded = separator.decode_graph(g, store, m, None, trainable);
    let re = separator.encode_graph(g, store, decoded, trainable);
    if g.shape(re) != m_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "icl round trip {:?} vs {:?}",
            g.shape(re),
            m_shape
        )));
    }
    let diff = g.sub(m, re);
    let sq = g.mul(diff, diff);
    Ok(g.mean_all(sq))
}

// ============================================================================
// Multi-scale discriminator
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MsdConfig {
    /// Average-pool factors of the sub-discriminators.
    pub scales: Vec<usize>,
    /// Strided conv stack per sub-discriminator: (out_channels, kernel, stride).
    pub conv_layers: Vec<(usize, usize, usize)>,
    pub leaky_slope: f64,
}

impl Default for MsdConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 4],
            conv_layers: vec![(16, 15, 4), (32, 15, 4), (32, 15, 4)],
            leaky_slope: 0.1,
        }
    }
}

struct SubDisc {
    convs: Vec<(ParamId, ParamId)>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Three waveform discriminators at successive downsampling factors; each is
/// a stack of strided convolutions with leaky-rectifier activations, a
/// pointwise head and a temporal mean, giving one unbounded score per item.
pub struct Msd {
    pub cfg: MsdConfig,
    subs: Vec<SubDisc>,
}

impl Msd {
    pub fn init(store: &mut ParamStore, cfg: &MsdConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut subs = Vec::new();
        for (si, _) in cfg.scales.iter().enumerate() {
            let mut convs = Vec::new();
            let mut c_in = 1;
            for (li, &(c_out, k, _)) in cfg.conv_layers.iter().enumerate() {
                let w = store.add(
                    format!("msd{si}.conv{li}.w"),
                    uniform_fan_in(&[c_out, c_in, k], c_in * k, rng),
                );
                let b = store.add(
                    format!("msd{si}.conv{li}.b"),
                    Arr::zeros(ndarray::IxDyn(&[c_out])),
                );
                convs.push((w, b));
                c_in = c_out;
            }
            let head_w = store.add(
                format!("msd{si}.head.w"),
                uniform_fan_in(&[1, c_in, 1], c_in, rng),
            );
            let head_b = store.add(format!("msd{si}.head.b"), Arr::zeros(ndarray::IxDyn(&[1])));
            subs.push(SubDisc {
                convs,
                head_w,
                head_b,
            });
        }
        Self {
            cfg: cfg.clone(),
            subs,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.subs {
            for (w, b) in &s.convs {
                ids.extend([*w, *b]);
            }
            ids.extend([s.head_w, s.head_b]);
        }
        ids
    }

    /// Smallest input length that survives every conv stack.
    pub fn min_input_len(&self) -> usize {
        let mut need = 1usize;
        for &(_, k, stride) in self.cfg.conv_layers.iter().rev() {
            need = (need - 1) * stride + k;
        }
        need * self.cfg.scales.iter().max().copied().unwrap_or(1)
    }

    /// Scores of a batch of 8 kHz waveforms `[B, t]`: one `[B]` node per
    /// scale.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        wave: NodeId,
        trainable: bool,
    ) -> Result<Vec<NodeId>> {
        let (b, t) = (g.shape(wave)[0], g.shape(wave)[1]);
        if t < self.min_input_len() {
            return Err(Error::TooShort {
                got: t,
                need: self.min_input_len(),
            });
        }
        let x0 = g.reshape(wave, &[b, 1, t]);
        let mut scores = Vec::new();
        for (sub, &scale) in self.subs.iter().zip(self.cfg.scales.iter()) {
            let mut x = if scale == 1 {
                x0
            } else {
                g.avg_pool1d(x0, scale)
            };
            for ((w, bias), &(_, _, stride)) in sub.convs.iter().zip(self.cfg.conv_layers.iter()) {
                let wn = g.param(store, *w, trainable);
                let bn = g.param(store, *bias, trainable);
                let y = g.conv1d(x, wn, stride);
                let y = g.add_bias_axis(y, bn, 1);
                x = g.leaky_relu(y, self.cfg.leaky_slope);
            }
            let hw = g.param(store, sub.head_w, trainable);
            let hb = g.param(store, sub.head_b, trainable);
            let y = g.conv1d(x, hw, 1); // pointwise head
            let y = g.add_bias_axis(y, hb, 1);
            let l = g.shape(y)[2];
            let flat = g.reshape(y, &[b, l]);
            let mean_basis = g.constant(Arr::from_elem(ndarray::IxDyn(&[b, l]), 1.0 / l as f64));
            scores.push(g.row_dot(flat, mean_basis)); // temporal mean -> [B]
        }
        Ok(scores)
    }
}

/// Least-squares discriminator loss from per-scale score nodes:
/// mean over scales and batch of `(D(real) - 1)^2 + D(fake)^2`.
pub fn disc_loss_from_scores(g: &mut Graph, real: &[NodeId], fake: &[NodeId]) -> NodeId {
    assert_eq!(real.len(), fake.len());
    let mut acc: Option<NodeId> = None;
    for (&r, &f) in real.iter().zip(fake.iter()) {
        let rm1 = g.add_scalar(r, -1.0);
        let rsq = g.mul(rm1, rm1);
        let fsq = g.mul(f, f);
        let both = g.add(rsq, fsq);
        let m = g.mean_all(both);
        acc = Some(match acc {
            Some(a) => g.add(a, m),
            None => m,
        });
    }
    let total = acc.expect("at least one scale");
    g.scale(total, 1.0 / real.len() as f64)
}

/// Least-squares generator loss from per-scale fake scores:
/// mean over scales and batch of `(D(fake) - 1)^2`.
pub fn gen_adv_loss_from_scores(g: &mut Graph, fake: &[NodeId]) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &f in fake {
        let fm1 = g.add_scalar(f, -1.0);
        let sq = g.mul(fm1, fm1);
        let m = g.mean_all(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, m),
            None => m,
        });
    }
    let total = acc.expect("at least one scale");
    g.scale(total, 1.0 / fake.len() as f64)
}

/// Full discriminator objective: both forwards on constants (`s_hat` is
/// detached by construction), D parameters trainable.
pub fn disc_loss_graph(
    g: &mut Graph,
    store: &ParamStore,
    msd: &Msd,
    s: &Array2<f64>,
    s_hat_detached: &Array2<f64>,
) -> Result<NodeId> {
    let real_in = g.constant(s.clone().into_dyn());
    let fake_in = g.constant(s_hat_detached.clone().into_dyn());
    let real = msd.forward_graph(g, store, real_in, true)?;
    let fake = msd.forward_graph(g, store, fake_in, true)?;
    Ok(disc_loss_from_scores(g, &real, &fake))
}

/// Generator-side adversarial term: D parameters frozen, gradient flows into
/// `s_hat` only.
pub fn gen_adv_loss_graph(
    g: &mut Graph,
    store: &ParamStore,
    msd: &Msd,
    s_hat: NodeId,
) -> Result<NodeId> {
    let fake = msd.forward_graph(g, store, s_hat, false)?;
    Ok(gen_adv_loss_from_scores(g, &fake))
}

// ============================================================================
// Weighted total
// ============================================================================

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub wrql: f64,
    pub secl: f64,
    pub icl: f64,
    pub adv_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            wrql: 1.0,
            secl: 1.0,
            icl: 1.0,
            adv_g: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("wrql", self.wrql),
            ("secl", self.secl),
            ("icl", self.icl),
            ("adv_g", self.adv_g),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-component values of one generator step; weighted parts sum to total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub wrql: f64,
    pub secl: Option<f64>,
    pub icl: Option<f64>,
    pub adv_g: Option<f64>,
    pub total: f64,
}

pub struct GeneratorLoss {
    pub node: NodeId,
    pub breakdown: LossBreakdown,
}

/// Weighted sum of the active components. Errors on any non-finite
/// component, naming it.
pub fn total_generator_loss(
    g: &mut Graph,
    wrql: NodeId,
    secl: Option<NodeId>,
    icl: Option<NodeId>,
    adv_g: Option<NodeId>,
    weights: &LossWeights,
) -> Result<GeneratorLoss> {
    weights.validate()?;
    let check = |name: &str, v: f64| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("loss component {name}")))
        }
    };
    let wrql_v = check("wrql", g.scalar_value(wrql))?;
    let mut total = g.scale(wrql, weights.wrql);
    let mut total_v = weights.wrql * wrql_v;
    let mut secl_v = None;
    if let Some(n) = secl {
        let v = check("secl", g.scalar_value(n))?;
        secl_v = Some(v);
        let scaled = g.scale(n, weights.secl);
        total = g.add(total, scaled);
        total_v += weights.secl * v;
    }
    let mut icl_v = None;
    if let Some(n) = icl {
        let v = check("icl", g.scalar_value(n))?;
        icl_v = Some(v);
        let scaled = g.scale(n, weights.icl);
        total = g.add(total, scaled);
        total_v += weights.icl * v;
    }
    let mut adv_v = None;
    if let Some(n) = adv_g {
        let v = check("adv_g", g.scalar_value(n))?;
        adv_v = Some(v);
        let scaled = g.scale(n, weights.adv_g);
        total = g.add(total, scaled);
        total_v += weights.adv_g * v;
    }
    check("total", g.scalar_value(total))?;
    debug_assert!((g.scalar_value(total) - total_v).abs() <= 1e-9 * total_v.abs().max(1.0));
    Ok(GeneratorLoss {
        node: total,
        breakdown: LossBreakdown {
            wrql: wrql_v,
            secl: secl_v,
            icl: icl_v,
            adv_g: adv_v,
            total: g.scalar_value(total),
        },
    })
}
