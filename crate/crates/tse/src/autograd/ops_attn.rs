//! Fused multi-head self-attention over a batch of sequences.
//!
//! Input `[M, L, D]` is M independent sequences of length L. Projections are
//! single GEMMs over all tokens. The per-head attention contractions have a
//! tiny inner dimension (D/heads), where a general GEMM wastes most of its
//! time, so they run as hand-rolled kernels directly on each head's column
//! block; the attention matrices are recomputed in the backward pass instead
//! of being saved, which keeps the inter-chunk pass (large L) from holding
//! `M*H*L*L` floats on the tape.

use ndarray::{Array1, Array2, Axis, Ix3};
use rayon::prelude::*;

use super::fastmath::{dot_slice, fast_exp, max_slice, sum_slice};
use super::{Arr, Graph, NodeId, Op};

struct MhaOp {
    heads: usize,
    m: usize,
    l: usize,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    ctx: Array2<f64>,
}

/// Copy one head's column block into a packed `[l, dh]` buffer.
fn pack_head(src: &[f64], d: usize, off: usize, dh: usize, l: usize, row0: usize, out: &mut [f64]) {
    for i in 0..l {
        let sb = (row0 + i) * d + off;
        out[i * dh..(i + 1) * dh].copy_from_slice(&src[sb..sb + dh]);
    }
}

/// Scatter a packed `[l, dh]` buffer back into a head's column block.
fn unpack_head(src: &[f64], d: usize, off: usize, dh: usize, l: usize, out: &mut [f64]) {
    for i in 0..l {
        let db = i * d + off;
        out[db..db + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

/// `[l, dh] -> [dh, l]` transpose of a packed head buffer.
fn transpose_packed(src: &[f64], l: usize, dh: usize, out: &mut [f64]) {
    for i in 0..l {
        for t in 0..dh {
            out[t * l + i] = src[i * dh + t];
        }
    }
}

const MAX_DH: usize = 64;

/// One score row as a rank-dh update over the transposed keys, so the row
/// stays in L1 across the dh axpy passes: `srow[j] = scale * <q_i, k_j>`.
fn score_row(qrow: &[f64], kt: &[f64], dh: usize, l: usize, scale: f64, srow: &mut [f64]) {
    srow.fill(0.0);
    for (t, &qv) in qrow.iter().enumerate().take(dh) {
        let c = qv * scale;
        let krow = &kt[t * l..(t + 1) * l];
        for (o, kv) in srow.iter_mut().zip(krow.iter()) {
            *o = c.mul_add(*kv, *o);
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let mx = max_slice(row);
    for v in row.iter_mut() {
        *v = fast_exp(*v - mx);
    }
    let inv = 1.0 / sum_slice(row);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `acc[0..dh] = sum_j w[j] * src_row(j)`: the per-row mix with the
/// accumulator held in registers.
fn mix_row(w: &[f64], src: &[f64], dh: usize, acc: &mut [f64]) {
    acc[..dh].fill(0.0);
    for (j, &wj) in w.iter().enumerate() {
        let srow = &src[j * dh..(j + 1) * dh];
        for (a, sv) in acc[..dh].iter_mut().zip(srow.iter()) {
            *a = wj.mul_add(*sv, *a);
        }
    }
}

/// Rank-1 scatter `dst_row(j) += w[j] * src[0..dh]` over all j.
fn scatter_rows(w: &[f64], src: &[f64], dh: usize, dst: &mut [f64]) {
    for (j, &wj) in w.iter().enumerate() {
        let drow = &mut dst[j * dh..(j + 1) * dh];
        for (o, sv) in drow.iter_mut().zip(src.iter()) {
            *o = wj.mul_add(*sv, *o);
        }
    }
}

impl Op for MhaOp {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        let (m, l, heads) = (self.m, self.l, self.heads);
        let d = self.q.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let xf = i[0].to_shape((m * l, d)).unwrap().to_owned();
        let wq = i[1].to_shape((d, d)).unwrap().to_owned();
        let wk = i[3].to_shape((d, d)).unwrap().to_owned();
        let wv = i[5].to_shape((d, d)).unwrap().to_owned();
        let wo = i[7].to_shape((d, d)).unwrap().to_owned();
        let gf = g.to_shape((m * l, d)).unwrap().to_owned();

        let gctx = gf.dot(&wo.t());
        let gwo = self.ctx.t().dot(&gf);
        let gbo = gf.sum_axis(Axis(0));

        let q = self.q.as_slice().unwrap();
        let k = self.k.as_slice().unwrap();
        let v = self.v.as_slice().unwrap();
        let gctx_s = gctx.as_slice().unwrap();

        let mut gq = Array2::<f64>::zeros((m * l, d));
        let mut gk = Array2::<f64>::zeros((m * l, d));
        let mut gv = Array2::<f64>::zeros((m * l, d));
        {
            let blocks: Vec<_> = gq
                .axis_chunks_iter_mut(Axis(0), l)
                .zip(gk.axis_chunks_iter_mut(Axis(0), l))
                .zip(gv.axis_chunks_iter_mut(Axis(0), l))
                .enumerate()
                .map(|(mi, ((a, b), c))| (mi, a, b, c))
                .collect();
            blocks.into_par_iter().for_each(|(mi, gqm, gkm, gvm)| {
                let row0 = mi * l;
                let gqm = gqm.into_slice().unwrap();
                let gkm = gkm.into_slice().unwrap();
                let gvm = gvm.into_slice().unwrap();
                let mut p_row = vec![0.0f64; l];
                let mut gp_row = vec![0.0f64; l];
                let mut qp = vec![0.0f64; l * dh];
                let mut kp = vec![0.0f64; l * dh];
                let mut vp = vec![0.0f64; l * dh];
                let mut gcp = vec![0.0f64; l * dh];
                let mut kt = vec![0.0f64; l * dh];
                let mut vt = vec![0.0f64; l * dh];
                let mut gq_p = vec![0.0f64; l * dh];
                let mut gk_p = vec![0.0f64; l * dh];
                let mut gv_p = vec![0.0f64; l * dh];
                let mut acc = [0.0f64; MAX_DH];
                for h in 0..heads {
                    let off = h * dh;
                    pack_head(q, d, off, dh, l, row0, &mut qp);
                    pack_head(k, d, off, dh, l, row0, &mut kp);
                    pack_head(v, d, off, dh, l, row0, &mut vp);
                    pack_head(gctx_s, d, off, dh, l, row0, &mut gcp);
                    transpose_packed(&kp, l, dh, &mut kt);
                    transpose_packed(&vp, l, dh, &mut vt);
                    gq_p.fill(0.0);
                    gk_p.fill(0.0);
                    gv_p.fill(0.0);
                    for i in 0..l {
                        let qrow = &qp[i * dh..(i + 1) * dh];
                        let gcrow = &gcp[i * dh..(i + 1) * dh];
                        // p_i = softmax(scale * q_i . K^T)
                        score_row(qrow, &kt, dh, l, scale, &mut p_row);
                        softmax_row(&mut p_row);
                        // gp_i = gctx_i . V^T
                        score_row(gcrow, &vt, dh, l, 1.0, &mut gp_row);
                        // gv += p_i (outer) gctx_i
                        scatter_rows(&p_row, gcrow, dh, &mut gv_p);
                        // gs_i = p_i * (gp_i - <p_i, gp_i>)
                        let dot = dot_slice(&p_row, &gp_row);
                        for (gp_v, &pv) in gp_row.iter_mut().zip(p_row.iter()) {
                            *gp_v = pv * (*gp_v - dot);
                        }
                        // gq_i = scale * gs_i . K ; gk += scale * gs_i (outer) q_i
                        mix_row(&gp_row, &kp, dh, &mut acc);
                        let gq_dst = &mut gq_p[i * dh..(i + 1) * dh];
                        for (o, a) in gq_dst.iter_mut().zip(acc[..dh].iter()) {
                            *o = a * scale;
                        }
                        for v in gp_row.iter_mut() {
                            *v *= scale;
                        }
                        scatter_rows(&gp_row, qrow, dh, &mut gk_p);
                    }
                    unpack_head(&gq_p, d, off, dh, l, gqm);
                    unpack_head(&gk_p, d, off, dh, l, gkm);
                    unpack_head(&gv_p, d, off, dh, l, gvm);
                }
            });
        }

        let gx = wants[0].then(|| {
            let mut gx = gq.dot(&wq.t());
            gx += &gk.dot(&wk.t());
            gx += &gv.dot(&wv.t());
            gx.into_shape_with_order((m, l, d)).unwrap().into_dyn()
        });
        let mk_w = |gp: &Array2<f64>| xf.t().dot(gp).into_dyn();
        let mk_b = |gp: &Array2<f64>| gp.sum_axis(Axis(0)).into_dyn();
        vec![
            gx,
            wants[1].then(|| mk_w(&gq)),
            wants[2].then(|| mk_b(&gq)),
            wants[3].then(|| mk_w(&gk)),
            wants[4].then(|| mk_b(&gk)),
            wants[5].then(|| mk_w(&gv)),
            wants[6].then(|| mk_b(&gv)),
            wants[7].then(|| gwo.into_dyn()),
            wants[8].then(|| Array1::from(gbo.to_vec()).into_dyn()),
        ]
    }
    fn name(&self) -> &'static str {
        "mha"
    }
}

pub struct MhaWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

impl Graph {
    /// Self-attention over `[M, L, D]`, `heads` must divide `D`.
    pub fn multi_head_attention(&mut self, x: NodeId, w: &MhaWeights, heads: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (m, l, d) = xv.dim();
        assert_eq!(d % heads, 0, "heads must divide model dim");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let xf = xv.to_shape((m * l, d)).unwrap().to_owned();

        let project = |g: &Graph, w: NodeId, b: NodeId| -> Array2<f64> {
            let wv = g.value(w).to_shape((d, d)).unwrap().to_owned();
            let bv = g.value(b).as_slice().unwrap().to_vec();
            let mut p = xf.dot(&wv);
            for mut row in p.outer_iter_mut() {
                let rs = row.as_slice_mut().unwrap();
                for (v, b) in rs.iter_mut().zip(bv.iter()) {
                    *v += b;
                }
            }
            p
        };
        let q = project(self, w.wq, w.bq);
        let k = project(self, w.wk, w.bk);
        let v = project(self, w.wv, w.bv);

        let mut ctx = Array2::<f64>::zeros((m * l, d));
        {
            let qs = q.as_slice().unwrap();
            let ks = k.as_slice().unwrap();
            let vs = v.as_slice().unwrap();
            let blocks: Vec<_> = ctx.axis_chunks_iter_mut(Axis(0), l).enumerate().collect();
            blocks.into_par_iter().for_each(|(mi, ctxm)| {
                let row0 = mi * l;
                let ctxm = ctxm.into_slice().unwrap();
                let mut p_row = vec![0.0f64; l];
                let mut qp = vec![0.0f64; l * dh];
                let mut kp = vec![0.0f64; l * dh];
                let mut vp = vec![0.0f64; l * dh];
                let mut kt = vec![0.0f64; l * dh];
                let mut acc = [0.0f64; MAX_DH];
                for h in 0..heads {
                    let off = h * dh;
                    pack_head(qs, d, off, dh, l, row0, &mut qp);
                    pack_head(ks, d, off, dh, l, row0, &mut kp);
                    pack_head(vs, d, off, dh, l, row0, &mut vp);
                    transpose_packed(&kp, l, dh, &mut kt);
                    for i in 0..l {
                        let qrow = &qp[i * dh..(i + 1) * dh];
                        score_row(qrow, &kt, dh, l, scale, &mut p_row);
                        softmax_row(&mut p_row);
                        mix_row(&p_row, &vp, dh, &mut acc);
                        ctxm[i * d + off..i * d + off + dh].copy_from_slice(&acc[..dh]);
                    }
                }
            });
        }

        let wo = self.value(w.wo).to_shape((d, d)).unwrap().to_owned();
        let bo = self.value(w.bo).as_slice().unwrap().to_vec();
        let mut out = ctx.dot(&wo);
        for mut row in out.outer_iter_mut() {
            let rs = row.as_slice_mut().unwrap();
            for (v, b) in rs.iter_mut().zip(bo.iter()) {
                *v += b;
            }
        }
        let out = out.into_shape_with_order((m, l, d)).unwrap().into_dyn();
        self.push_op(
            out,
            vec![x, w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo],
            Box::new(MhaOp {
                heads,
                m,
                l,
                q,
                k,
                v,
                ctx,
            }),
        )
    }
}
