//! The conditional extraction network: waveform encoder, condition blender,
//! dual-path transformer masking core, waveform decoder.
//!
//! Latent layout is `[B, N, T]` with N=64 filters. The core segments T into
//! 50%-overlapped chunks of length C and alternates attention within chunks
//! (intra) and across chunks (inter); each pass is a transformer block whose
//! feed-forward is a GRU followed by a linear map, with post-norm residuals.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{
    chunk_count, uniform_fan_in, Arr, Graph, MhaWeights, NodeId, ParamId, ParamStore, RnnWeights,
};
use crate::error::{Error, Result};
use crate::speaker_encoder::EMBED_DIM;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeparatorConfig {
    /// Latent channels N (also the core model dim).
    pub n_filters: usize,
    /// Waveform encoder kernel size k.
    pub kernel: usize,
    /// Waveform encoder stride st.
    pub stride: usize,
    pub n_heads: usize,
    /// Dual-path block count B.
    pub n_blocks: usize,
    /// Chunk length C (hop is C/2).
    pub chunk_size: usize,
    /// GRU width inside each block's feed-forward.
    pub ff_hidden: usize,
}

impl SeparatorConfig {
    pub fn full() -> Self {
        Self {
            n_filters: 64,
            kernel: 16,
            stride: 8,
            n_heads: 8,
            n_blocks: 6,
            chunk_size: 100,
            ff_hidden: 64,
        }
    }

    pub fn toy() -> Self {
        Self {
            n_blocks: 2,
            chunk_size: 16,
            ff_hidden: 32,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel <= self.stride {
            return Err(Error::InvalidConfig("kernel must exceed stride".into()));
        }
        if self.n_filters % self.n_heads != 0 {
            return Err(Error::InvalidConfig(
                "attention heads must divide latent channels".into(),
            ));
        }
        if self.chunk_size % 2 != 0 || self.chunk_size < 2 {
            return Err(Error::InvalidConfig("chunk size must be even".into()));
        }
        Ok(())
    }

    /// Latent frame count for a t-sample input.
    pub fn frames_for(&self, t: usize) -> usize {
        (t - self.kernel) / self.stride + 1
    }
}

struct TransformerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    gru_wx: ParamId,
    gru_wh: ParamId,
    gru_b: ParamId,
    ff_w: ParamId,
    ff_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

struct BlockIds {
    intra: TransformerIds,
    inter: TransformerIds,
}

/// Parameter handles for the whole separator. The waveform encoder is the
/// gamma group, the decoder the delta group; blender/core/mask-head make up
/// the rest of the generator.
pub struct Separator {
    pub cfg: SeparatorConfig,
    enc_w: ParamId,
    enc_b: ParamId,
    blend_w: ParamId,
    blend_b: ParamId,
    blocks: Vec<BlockIds>,
    mask_w: ParamId,
    mask_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

/// All graph outputs of one extraction pass.
pub struct ExtractOut {
    /// Estimated target waveform, `[B, t]`.
    pub s_hat: NodeId,
    /// Masked latent m, `[B, N, T]` (input of the inverse-consistency loss).
    pub masked_latent: NodeId,
    /// Encoder output X, `[B, N, T]`.
    pub latent: NodeId,
    /// Mask in [0, 1], `[B, N, T]`.
    pub mask: NodeId,
}

fn init_transformer(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    ff_hidden: usize,
    rng: &mut ChaCha8Rng,
) -> TransformerIds {
    let mut dense = |name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        store.add(format!("{prefix}.{name}"), uniform_fan_in(&[rows, cols], rows, rng))
    };
    let wq = dense("wq", dim, dim, rng);
    let wk = dense("wk", dim, dim, rng);
    let wv = dense("wv", dim, dim, rng);
    let wo = dense("wo", dim, dim, rng);
    let gru_wx = dense("gru.wx", dim, 3 * ff_hidden, rng);
    let ff_w = dense("ff.w", ff_hidden, dim, rng);
    let gru_wh = store.add(
        format!("{prefix}.gru.wh"),
        {
            let mut w = Array2::<f64>::zeros((ff_hidden, 3 * ff_hidden));
            for gate in 0..3 {
                let q = crate::autograd::orthogonal_init(ff_hidden, ff_hidden, rng);
                w.slice_mut(ndarray::s![.., gate * ff_hidden..(gate + 1) * ff_hidden])
                    .assign(&q);
            }
            w.into_dyn()
        },
    );
    let zeros = |store: &mut ParamStore, name: &str, n: usize| {
        store.add(format!("{prefix}.{name}"), Arr::zeros(ndarray::IxDyn(&[n])))
    };
    let ones = |store: &mut ParamStore, name: &str, n: usize| {
        store.add(format!("{prefix}.{name}"), Arr::ones(ndarray::IxDyn(&[n])))
    };
    TransformerIds {
        wq,
        bq: zeros(store, "bq", dim),
        wk,
        bk: zeros(store, "bk", dim),
        wv,
        bv: zeros(store, "bv", dim),
        wo,
        bo: zeros(store, "bo", dim),
        ln1_g: ones(store, "ln1.g", dim),
        ln1_b: zeros(store, "ln1.b", dim),
        gru_wx,
        gru_wh,
        gru_b: zeros(store, "gru.b", 3 * ff_hidden),
        ff_w,
        ff_b: zeros(store, "ff.b", dim),
        ln2_g: ones(store, "ln2.g", dim),
        ln2_b: zeros(store, "ln2.b", dim),
    }
}

impl TransformerIds {
    fn ids(&self) -> Vec<ParamId> {
        vec![
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.ln1_g,
            self.ln1_b, self.gru_wx, self.gru_wh, self.gru_b, self.ff_w, self.ff_b, self.ln2_g,
            self.ln2_b,
        ]
    }
}

impl Separator {
    pub fn init(store: &mut ParamStore, cfg: &SeparatorConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate().expect("invalid separator config");
        let n = cfg.n_filters;
        let enc_w = store.add(
            "sep.enc.w",
            uniform_fan_in(&[n, 1, cfg.kernel], cfg.kernel, rng),
        );
        let enc_b = store.add("sep.enc.b", Arr::zeros(ndarray::IxDyn(&[n])));
        let blend_in = n + EMBED_DIM;
        let blend_w = store.add(
            "sep.blend.w",
            uniform_fan_in(&[blend_in, n], blend_in, rng),
        );
        let blend_b = store.add("sep.blend.b", Arr::zeros(ndarray::IxDyn(&[n])));
        let mut blocks = Vec::new();
        for bi in 0..cfg.n_blocks {
            let intra = init_transformer(store, &format!("sep.block{bi}.intra"), n, cfg.ff_hidden, rng);
            let inter = init_transformer(store, &format!("sep.block{bi}.inter"), n, cfg.ff_hidden, rng);
            blocks.push(BlockIds { intra, inter });
        }
        let mask_w = store.add("sep.mask.w", uniform_fan_in(&[n, n], n, rng));
        let mask_b = store.add("sep.mask.b", Arr::zeros(ndarray::IxDyn(&[n])));
        // decoder shares (N, k, st) with the encoder; fan-in counts the
        // latent channels feeding each output sample through k/st frames
        let dec_w = store.add(
            "sep.dec.w",
            uniform_fan_in(&[n, 1, cfg.kernel], n * cfg.kernel / cfg.stride, rng),
        );
        let dec_b = store.add("sep.dec.b", Arr::zeros(ndarray::IxDyn(&[1])));
        Self {
            cfg: cfg.clone(),
            enc_w,
            enc_b,
            blend_w,
            blend_b,
            blocks,
            mask_w,
            mask_b,
            dec_w,
            dec_b,
        }
    }

    /// Waveform-encoder parameter group (gamma).
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        vec![self.enc_w, self.enc_b]
    }

    /// Waveform-decoder parameter group (delta).
    pub fn decoder_ids(&self) -> Vec<ParamId> {
        vec![self.dec_w, self.dec_b]
    }

    pub fn blender_ids(&self) -> Vec<ParamId> {
        vec![self.blend_w, self.blend_b]
    }

    /// Core + mask-head parameter group.
    pub fn core_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.extend(b.intra.ids());
            ids.extend(b.inter.ids());
        }
        ids.extend([self.mask_w, self.mask_b]);
        ids
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_ids();
        ids.extend(self.blender_ids());
        ids.extend(self.core_ids());
        ids.extend(self.decoder_ids());
        ids
    }

    /// Waveform encoder: `[B, t]` -> ReLU(conv1d) `[B, N, T]`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        trainable: bool,
    ) -> NodeId {
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
        assert!(
            t >= self.cfg.kernel,
            "input shorter than the encoder kernel"
        );
        let x3 = g.reshape(x, &[b, 1, t]);
        let w = g.param(store, self.enc_w, trainable);
        let bias = g.param(store, self.enc_b, trainable);
        let conv = g.conv1d(x3, w, self.cfg.stride);
        let conv = g.add_bias_axis(conv, bias, 1);
        g.relu(conv)
    }

    /// Condition blender: the embedding is broadcast along T, concatenated
    /// on the channel axis and mapped back to N channels by a 1x1 conv.
    /// Splitting the conv weight over the concatenation evaluates the same
    /// map as two partial products without materializing the N+E channels:
    /// the embedding part is time-invariant, so it is one `[B, E] x [E, N]`
    /// product broadcast along T.
    pub fn blend_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latent: NodeId,
        emb: NodeId,
        trainable: bool,
    ) -> NodeId {
        let shape = g.shape(latent).to_vec();
        let (b, n, t) = (shape[0], shape[1], shape[2]);
        assert_eq!(n, self.cfg.n_filters, "latent channel count");
        assert_eq!(g.shape(emb), &[b, EMBED_DIM], "embedding shape");
        let w = g.param(store, self.blend_w, trainable); // [N+E, N]
        let bias = g.param(store, self.blend_b, trainable);
        let w_latent = g.slice_axis(w, 0, 0, n);
        let w_emb = g.slice_axis(w, 0, n, EMBED_DIM);

        let xt = g.permute(latent, &[0, 2, 1]); // [B, T, N]
        let flat = g.reshape(xt, &[b * t, n]);
        let x_part = g.matmul(flat, w_latent);
        let x_part = g.add_bias_axis(x_part, bias, 1);
        let x_part = g.reshape(x_part, &[b, t, n]);
        let x_part = g.permute(x_part, &[0, 2, 1]); // [B, N, T]

        let e_part = g.matmul(emb, w_emb); // [B, N]
        let e_bcast = g.broadcast_time(e_part, t); // [B, N, T]
        g.add(x_part, e_bcast)
    }

    /// 1x1 convolution over channels via a dense map on `[B*T, C]`.
    fn pointwise(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        w: ParamId,
        bias: ParamId,
        trainable: bool,
    ) -> NodeId {
        let shape = g.shape(x).to_vec();
        let (b, c, t) = (shape[0], shape[1], shape[2]);
        let xt = g.permute(x, &[0, 2, 1]); // [B, T, C]
        let flat = g.reshape(xt, &[b * t, c]);
        let wn = g.param(store, w, trainable);
        let bn = g.param(store, bias, trainable);
        let y = g.linear(flat, wn, bn);
        let c_out = g.shape(y)[1];
        let y3 = g.reshape(y, &[b, t, c_out]);
        g.permute(y3, &[0, 2, 1])
    }

    fn transformer_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &TransformerIds,
        x: NodeId, // [M, L, D]
        trainable: bool,
    ) -> NodeId {
        let shape = g.shape(x).to_vec();
        let (m, l, d) = (shape[0], shape[1], shape[2]);
        let w = MhaWeights {
            wq: g.param(store, ids.wq, trainable),
            bq: g.param(store, ids.bq, trainable),
            wk: g.param(store, ids.wk, trainable),
            bk: g.param(store, ids.bk, trainable),
            wv: g.param(store, ids.wv, trainable),
            bv: g.param(store, ids.bv, trainable),
            wo: g.param(store, ids.wo, trainable),
            bo: g.param(store, ids.bo, trainable),
        };
        let attn = g.multi_head_attention(x, &w, self.cfg.n_heads);
        let res1 = g.add(x, attn);
        let ln1_g = g.param(store, ids.ln1_g, trainable);
        let ln1_b = g.param(store, ids.ln1_b, trainable);
        let y = g.layer_norm(res1, ln1_g, ln1_b);

        // recurrent feed-forward: GRU over the sequence axis, then linear
        let y_tm = g.permute(y, &[1, 0, 2]); // [L, M, D]
        let rnn = RnnWeights {
            wx: g.param(store, ids.gru_wx, trainable),
            wh: g.param(store, ids.gru_wh, trainable),
            b: g.param(store, ids.gru_b, trainable),
        };
        let hs = g.gru_seq(y_tm, &rnn); // [L, M, H]
        let h = g.shape(hs)[2];
        let hs_flat = g.reshape(hs, &[l * m, h]);
        let ff_w = g.param(store, ids.ff_w, trainable);
        let ff_b = g.param(store, ids.ff_b, trainable);
        let ff = g.linear(hs_flat, ff_w, ff_b); // [L*M, D]
        let ff = g.reshape(ff, &[l, m, d]);
        let ff = g.permute(ff, &[1, 0, 2]); // [M, L, D]
        let res2 = g.add(y, ff);
        let ln2_g = g.param(store, ids.ln2_g, trainable);
        let ln2_b = g.param(store, ids.ln2_b, trainable);
        g.layer_norm(res2, ln2_g, ln2_b)
    }

    /// Intra-chunk pass of block `bi` on a chunked tensor `[B, N, C, S]`
    /// (exposed for the chunk-equivariance test).
    pub fn intra_pass(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bi: usize,
        chunked: NodeId,
        trainable: bool,
    ) -> NodeId {
        let shape = g.shape(chunked).to_vec();
        let (b, n, c, s) = (shape[0], shape[1], shape[2], shape[3]);
        let seq = g.permute(chunked, &[0, 3, 2, 1]); // [B, S, C, N]
        let seq = g.reshape(seq, &[b * s, c, n]);
        let out = self.transformer_block(g, store, &self.blocks[bi].intra, seq, trainable);
        let out = g.reshape(out, &[b, s, c, n]);
        g.permute(out, &[0, 3, 2, 1]) // [B, N, C, S]
    }

    fn inter_pass(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bi: usize,
        chunked: NodeId,
        trainable: bool,
    ) -> NodeId {
        let shape = g.shape(chunked).to_vec();
        let (b, n, c, s) = (shape[0], shape[1], shape[2], shape[3]);
        let seq = g.permute(chunked, &[0, 2, 3, 1]); // [B, C, S, N]
        let seq = g.reshape(seq, &[b * c, s, n]);
        let out = self.transformer_block(g, store, &self.blocks[bi].inter, seq, trainable);
        let out = g.reshape(out, &[b, c, s, n]);
        g.permute(out, &[0, 3, 1, 2]) // [B, N, C, S]
    }

    /// Dual-path core: chunk, B x (intra + inter), overlap-add, pointwise
    /// head, sigmoid. Returns the mask `[B, N, T]`.
    pub fn core_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cond: NodeId,
        trainable: bool,
    ) -> NodeId {
        let shape = g.shape(cond).to_vec();
        let (b, n, t) = (shape[0], shape[1], shape[2]);
        let c = self.cfg.chunk_size;
        let mut x = g.chunk(cond, c); // [B, N, C, S]
        debug_assert_eq!(g.shape(x)[3], chunk_count(t, c));
        for bi in 0..self.cfg.n_blocks {
            x = self.intra_pass(g, store, bi, x, trainable);
            x = self.inter_pass(g, store, bi, x, trainable);
        }
        let merged = g.overlap_add(x, t); // [B, N, T]
        let head = self.pointwise(g, store, merged, self.mask_w, self.mask_b, trainable);
        let mask = g.sigmoid(head);
        assert_eq!(g.shape(mask), &[b, n, t], "mask shape");
        mask
    }

    /// Waveform decoder: transposed conv of the masked latent back to
    /// `[B, t_out]`, cropped (or zero-padded by at most stride-1 samples)
    /// to `target_len` when given.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        m: NodeId,
        target_len: Option<usize>,
        trainable: bool,
    ) -> NodeId {
        let wn = g.param(store, self.dec_w, trainable);
        let bn = g.param(store, self.dec_b, trainable);
        let y = g.conv_transpose1d(m, wn, self.cfg.stride); // [B, 1, t']
        let y = g.add_bias_axis(y, bn, 1);
        let shape = g.shape(y).to_vec();
        let (b, t_raw) = (shape[0], shape[2]);
        let mut out = g.reshape(y, &[b, t_raw]);
        if let Some(t) = target_len {
            if t_raw > t {
                out = g.slice_axis(out, 1, 0, t);
            } else if t_raw < t {
                out = g.pad_tail(out, 1, t);
            }
        }
        out
    }

    /// Full conditional extraction. Asserts the shape pipeline and the mask
    /// range on every call.
    pub fn extract_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mixture: NodeId,
        emb: NodeId,
        trainable: bool,
    ) -> ExtractOut {
        let (b, t) = (g.shape(mixture)[0], g.shape(mixture)[1]);
        let n = self.cfg.n_filters;
        let t_frames = self.cfg.frames_for(t);

        let latent = self.encode_graph(g, store, mixture, trainable);
        assert_eq!(g.shape(latent), &[b, n, t_frames], "latent shape");
        let cond = self.blend_graph(g, store, latent, emb, trainable);
        assert_eq!(g.shape(cond), &[b, n, t_frames], "blended shape");
        let mask = self.core_graph(g, store, cond, trainable);
        {
            let mv = g.value(mask);
            assert!(
                mv.iter().all(|&v| (0.0..=1.0).contains(&v)),
                "mask out of [0,1]"
            );
        }
        let masked = g.mul(latent, mask);
        let s_hat = self.decode_graph(g, store, masked, Some(t), trainable);
        assert_eq!(g.shape(s_hat), &[b, t], "output length");
        ExtractOut {
            s_hat,
            masked_latent: masked,
            latent,
            mask,
        }
    }

    /// Inference path on plain arrays: returns the estimate `[B, t]`.
    pub fn extract_eval(
        &self,
        store: &ParamStore,
        mixtures: &Array2<f64>,
        embeddings: &Array2<f64>,
    ) -> Array2<f64> {
        let mut g = Graph::new();
        let mix = g.constant(mixtures.clone().into_dyn());
        let emb = g.constant(embeddings.clone().into_dyn());
        let out = self.extract_graph(&mut g, store, mix, emb, false);
        let t = mixtures.dim().1;
        g.value(out.s_hat)
            .to_shape((mixtures.dim().0, t))
            .unwrap()
            .to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> (ParamStore, Separator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SeparatorConfig {
            n_filters: 8,
            kernel: 16,
            stride: 8,
            n_heads: 2,
            n_blocks: 1,
            chunk_size: 4,
            ff_hidden: 8,
        };
        let sep = Separator::init(&mut store, &cfg, &mut rng);
        (store, sep)
    }

    fn rand2(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| rng.random_range(-0.5..0.5))
    }

    #[test]
    fn encoder_frame_arithmetic() {
        // floor((24000-16)/8)+1 = 2999; floor((16-16)/8)+1 = 1
        let cfg = SeparatorConfig::full();
        assert_eq!(cfg.frames_for(24_000), 2_999);
        assert_eq!(cfg.frames_for(16), 1);
    }

    #[test]
    fn encoder_nonnegative_and_zero_on_zero_input() {
        let (store, sep) = tiny();
        let mut g = Graph::new();
        let x = g.constant(Arr::zeros(ndarray::IxDyn(&[1, 160])));
        let latent = sep.encode_graph(&mut g, &store, x, false);
        // zero bias at init, so zero input -> exactly zero latent
        assert!(g.value(latent).iter().all(|&v| v == 0.0));

        let x2 = g.constant(Arr::from_shape_fn(ndarray::IxDyn(&[1, 160]), |ix| {
            ((ix[1] * 37 % 11) as f64 - 5.0) * 0.05
        }));
        let latent2 = sep.encode_graph(&mut g, &store, x2, false);
        assert!(g.value(latent2).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn blender_shape_and_zero_case() {
        let (store, sep) = tiny();
        let mut g = Graph::new();
        let x = g.constant(Arr::zeros(ndarray::IxDyn(&[2, 8, 11])));
        let e = g.constant(Arr::zeros(ndarray::IxDyn(&[2, EMBED_DIM])));
        let out = sep.blend_graph(&mut g, &store, x, e, false);
        assert_eq!(g.shape(out), &[2, 8, 11]);
        // zero inputs and zero bias -> zero output
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blender_responds_to_embedding() {
        let (store, sep) = tiny();
        let mut g = Graph::new();
        let x_arr = Arr::from_shape_fn(ndarray::IxDyn(&[1, 8, 7]), |ix| {
            (ix[2] as f64 - 3.0) * 0.1
        });
        let x = g.constant(x_arr);
        let e1 = g.constant(rand2((1, EMBED_DIM), 1).into_dyn());
        let e2 = g.constant(rand2((1, EMBED_DIM), 2).into_dyn());
        let o1 = sep.blend_graph(&mut g, &store, x, e1, false);
        let o2 = sep.blend_graph(&mut g, &store, x, e2, false);
        let diff = (g.value(o1) - g.value(o2))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff > 0.0, "changing the embedding must change the output");
    }

    #[test]
    fn mask_in_unit_interval_and_same_shape() {
        let (store, sep) = tiny();
        let mut g = Graph::new();
        let cond = g.constant(rand2((2, 8 * 13), 3).into_dyn().into_shape_with_order(ndarray::IxDyn(&[2, 8, 13])).unwrap());
        let mask = sep.core_graph(&mut g, &store, cond, false);
        assert_eq!(g.shape(mask), &[2, 8, 13]);
        assert!(g
            .value(mask)
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decode_length_arithmetic_and_linearity() {
        let (store, sep) = tiny();
        let mut g = Graph::new();
        // T=2999 -> 2998*8+16 = 24000
        let m = g.constant(Arr::zeros(ndarray::IxDyn(&[1, 8, 2_999])));
        let y = sep.decode_graph(&mut g, &store, m, None, false);
        assert_eq!(g.shape(y), &[1, 24_000]);
        // zero latent, zero bias -> zero waveform
        assert!(g.value(y).iter().all(|&v| v == 0.0));

        // linearity in m with the (zero) bias fixed: decode(2m) = 2 decode(m)
        let m1_arr = Arr::from_shape_fn(ndarray::IxDyn(&[1, 8, 5]), |ix| {
            (ix[2] as f64 + 1.0) * 0.1 * (ix[1] as f64 - 3.5)
        });
        let m1 = g.constant(m1_arr.clone());
        let m2 = g.constant(m1_arr * 2.0);
        let y1 = sep.decode_graph(&mut g, &store, m1, None, false);
        let y2 = sep.decode_graph(&mut g, &store, m2, None, false);
        let max_err = g
            .value(y2)
            .iter()
            .zip(g.value(y1).iter())
            .fold(0.0f64, |mx, (a, b)| mx.max((a - 2.0 * b).abs()));
        assert!(max_err < 1e-12);
    }

    #[test]
    fn extract_shape_pipeline_and_determinism() {
        let (store, sep) = tiny();
        let mix = rand2((2, 320), 5);
        let emb = rand2((2, EMBED_DIM), 6);
        let y1 = sep.extract_eval(&store, &mix, &emb);
        let y2 = sep.extract_eval(&store, &mix, &emb);
        assert_eq!(y1, y2);
        assert_eq!(y1.dim(), (2, 320));
    }

    #[test]
    fn mask_stays_in_range_on_many_random_inputs() {
        let (store, sep) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..1000 {
            let t = rng.random_range(1..40);
            let mut g = Graph::new();
            let cond = g.constant(Arr::from_shape_fn(ndarray::IxDyn(&[1, 8, t]), |_| {
                rng.random_range(-3.0..3.0)
            }));
            let mask = sep.core_graph(&mut g, &store, cond, false);
            assert!(
                g.value(mask).iter().all(|&v| (0.0..=1.0).contains(&v)),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn intra_pass_is_chunk_equivariant() {
        // permuting the chunk axis before the intra pass permutes its output
        // the same way (the intra block never mixes chunks)
        let (store, sep) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (b, n, c, s) = (1, 8, 4, 5);
        let x = Arr::from_shape_fn(ndarray::IxDyn(&[b, n, c, s]), |_| rng.random_range(-1.0..1.0));
        let perm: Vec<usize> = vec![3, 0, 4, 2, 1];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for bi in 0..b {
                for ni in 0..n {
                    for u in 0..c {
                        xp[[bi, ni, u, dst]] = x[[bi, ni, u, src]];
                    }
                }
            }
        }
        let run = |arr: &Arr| {
            let mut g = Graph::new();
            let node = g.constant(arr.clone());
            let out = sep.intra_pass(&mut g, &store, 0, node, false);
            g.value(out).clone()
        };
        let y = run(&x);
        let yp = run(&xp);
        for (dst, &src) in perm.iter().enumerate() {
            for bi in 0..b {
                for ni in 0..n {
                    for u in 0..c {
                        let a = yp[[bi, ni, u, dst]];
                        let e = y[[bi, ni, u, src]];
                        assert!((a - e).abs() < 1e-12, "intra not equivariant");
                    }
                }
            }
        }
    }
}
