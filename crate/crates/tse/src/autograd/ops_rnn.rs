//! Fused sequence GRU and LSTM (single direction, zero initial state).
//!
//! Inputs are time-major `[L, M, D]`. The recurrence is independent per
//! batch row, so both passes parallelize over row chunks; every
//! cross-element reduction happens afterwards in one fixed-order GEMM, which
//! keeps results independent of the thread count. Inner loops run on flat
//! slices: a per-step view of an axis-1 chunk of `[L, M, G]` is contiguous,
//! so `to_slice` always succeeds.

use ndarray::{s, Array2, Array3, Axis, Ix2, Ix3};
use rayon::prelude::*;

use super::{Arr, Graph, NodeId, Op};

pub struct RnnWeights {
    pub wx: NodeId,
    pub wh: NodeId,
    pub b: NodeId,
}

use super::fastmath::{fast_sigmoid as sigmoid, fast_tanh};

fn chunk_size(m: usize) -> usize {
    // fixed policy; the math is chunk-size independent
    m.div_ceil(rayon::current_num_threads().max(1)).max(1)
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

struct GruOp {
    hdim: usize,
    gates: Array3<f64>,    // [L, M, 3H]: r, z, n (post-activation)
    u: Array3<f64>,        // [L, M, H]: h_prev . wh_n
    h_states: Array3<f64>, // [L+1, M, H]
}

impl Op for GruOp {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        let h = self.hdim;
        let x = i[0].view().into_dimensionality::<Ix3>().unwrap();
        let (l, m, d) = x.dim();
        let wh = i[2].view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let ghs = g.view().into_dimensionality::<Ix3>().unwrap();

        let mut da_all = Array3::<f64>::zeros((l, m, 3 * h));
        let mut dah_all = Array3::<f64>::zeros((l, m, 3 * h));
        let sz = chunk_size(m);
        {
            let tasks: Vec<_> = da_all
                .axis_chunks_iter_mut(Axis(1), sz)
                .zip(dah_all.axis_chunks_iter_mut(Axis(1), sz))
                .zip(self.gates.axis_chunks_iter(Axis(1), sz))
                .zip(self.u.axis_chunks_iter(Axis(1), sz))
                .zip(self.h_states.axis_chunks_iter(Axis(1), sz))
                .enumerate()
                .map(|(ci, ((((da, dah), gates), u), hs))| (ci, da, dah, gates, u, hs))
                .collect();
            tasks
                .into_par_iter()
                .for_each(|(ci, mut da_c, mut dah_c, gates_c, u_c, hs_c)| {
                    let rows = ci * sz..(ci * sz + gates_c.dim().1);
                    let mc = rows.len();
                    let mut dh = Array2::<f64>::zeros((mc, h));
                    let mut dah_t = Array2::<f64>::zeros((mc, 3 * h));
                    for t in (0..l).rev() {
                        let gates_t = gates_c.index_axis(Axis(0), t);
                        let gates_t = gates_t.to_slice().unwrap();
                        let u_t = u_c.index_axis(Axis(0), t);
                        let u_t = u_t.to_slice().unwrap();
                        let hp_t = hs_c.index_axis(Axis(0), t);
                        let hp_t = hp_t.to_slice().unwrap();
                        let g_up = ghs.slice(s![t, rows.clone(), ..]);
                        let g_up = g_up.to_slice().unwrap();
                        {
                            let da_t = da_c.index_axis_mut(Axis(0), t);
                            let da_t = da_t.into_slice().unwrap();
                            let dah_s = dah_t.as_slice_mut().unwrap();
                            let dh_s = dh.as_slice_mut().unwrap();
                            for r_i in 0..mc {
                                let b3 = r_i * 3 * h;
                                let bh = r_i * h;
                                for j in 0..h {
                                    let dht = g_up[bh + j] + dh_s[bh + j];
                                    let r = gates_t[b3 + j];
                                    let z = gates_t[b3 + h + j];
                                    let n = gates_t[b3 + 2 * h + j];
                                    let u = u_t[bh + j];
                                    let dn = dht * (1.0 - z);
                                    let da_n = dn * (1.0 - n * n);
                                    let dz = dht * (hp_t[bh + j] - n);
                                    let da_z = dz * z * (1.0 - z);
                                    let dr = da_n * u;
                                    let da_r = dr * r * (1.0 - r);
                                    let du = da_n * r;
                                    da_t[b3 + j] = da_r;
                                    da_t[b3 + h + j] = da_z;
                                    da_t[b3 + 2 * h + j] = da_n;
                                    dah_s[b3 + j] = da_r;
                                    dah_s[b3 + h + j] = da_z;
                                    dah_s[b3 + 2 * h + j] = du;
                                    // direct path to h_prev
                                    dh_s[bh + j] = dht * z;
                                }
                            }
                        }
                        dh += &dah_t.dot(&wh.t());
                        dah_c.index_axis_mut(Axis(0), t).assign(&dah_t);
                    }
                });
        }

        let da_flat = da_all.to_shape((l * m, 3 * h)).unwrap().to_owned();
        let dah_flat = dah_all.to_shape((l * m, 3 * h)).unwrap().to_owned();
        let xflat = x.to_shape((l * m, d)).unwrap().to_owned();
        let hprev_flat = self
            .h_states
            .slice(s![0..l, .., ..])
            .to_shape((l * m, h))
            .unwrap()
            .to_owned();

        let gx = wants[0].then(|| {
            let wx = i[1].view().into_dimensionality::<Ix2>().unwrap();
            da_flat
                .dot(&wx.t())
                .into_shape_with_order((l, m, d))
                .unwrap()
                .into_dyn()
        });
        let gwx = wants[1].then(|| xflat.t().dot(&da_flat).into_dyn());
        let gwh = wants[2].then(|| hprev_flat.t().dot(&dah_flat).into_dyn());
        let gb = wants[3].then(|| da_flat.sum_axis(Axis(0)).into_dyn());
        vec![gx, gwx, gwh, gb]
    }
    fn name(&self) -> &'static str {
        "gru_seq"
    }
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

struct LstmOp {
    hdim: usize,
    gates: Array3<f64>,    // [L, M, 4H]: i, f, g, o (post-activation)
    c_states: Array3<f64>, // [L+1, M, H]
    h_states: Array3<f64>, // [L+1, M, H]
}

impl Op for LstmOp {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        let h = self.hdim;
        let x = i[0].view().into_dimensionality::<Ix3>().unwrap();
        let (l, m, d) = x.dim();
        let wh = i[2].view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let ghs = g.view().into_dimensionality::<Ix3>().unwrap();

        let mut da_all = Array3::<f64>::zeros((l, m, 4 * h));
        let sz = chunk_size(m);
        {
            let tasks: Vec<_> = da_all
                .axis_chunks_iter_mut(Axis(1), sz)
                .zip(self.gates.axis_chunks_iter(Axis(1), sz))
                .zip(self.c_states.axis_chunks_iter(Axis(1), sz))
                .enumerate()
                .map(|(ci, ((da, gates), cs))| (ci, da, gates, cs))
                .collect();
            tasks.into_par_iter().for_each(|(ci, mut da_c, gates_c, cs_c)| {
                let rows = ci * sz..(ci * sz + gates_c.dim().1);
                let mc = rows.len();
                let mut dh = Array2::<f64>::zeros((mc, h));
                let mut dc = Array2::<f64>::zeros((mc, h));
                for t in (0..l).rev() {
                    let gates_t = gates_c.index_axis(Axis(0), t);
                    let gates_t = gates_t.to_slice().unwrap();
                    let c_t = cs_c.index_axis(Axis(0), t + 1);
                    let c_t = c_t.to_slice().unwrap();
                    let c_prev = cs_c.index_axis(Axis(0), t);
                    let c_prev = c_prev.to_slice().unwrap();
                    let g_up = ghs.slice(s![t, rows.clone(), ..]);
                    let g_up = g_up.to_slice().unwrap();

                    {
                        let da_t = da_c.index_axis_mut(Axis(0), t);
                        let da_t = da_t.into_slice().unwrap();
                        let dh_s = dh.as_slice_mut().unwrap();
                        let dc_s = dc.as_slice_mut().unwrap();
                        for r_i in 0..mc {
                            let b4 = r_i * 4 * h;
                            let bh = r_i * h;
                            for j in 0..h {
                                let dht = g_up[bh + j] + dh_s[bh + j];
                                let iv = gates_t[b4 + j];
                                let fv = gates_t[b4 + h + j];
                                let gv = gates_t[b4 + 2 * h + j];
                                let ov = gates_t[b4 + 3 * h + j];
                                let tc = fast_tanh(c_t[bh + j]);
                                let mut dct = dc_s[bh + j] + dht * ov * (1.0 - tc * tc);
                                let da_o = dht * tc * ov * (1.0 - ov);
                                let da_i = dct * gv * iv * (1.0 - iv);
                                let da_g = dct * iv * (1.0 - gv * gv);
                                let da_f = dct * c_prev[bh + j] * fv * (1.0 - fv);
                                dct *= fv;
                                da_t[b4 + j] = da_i;
                                da_t[b4 + h + j] = da_f;
                                da_t[b4 + 2 * h + j] = da_g;
                                da_t[b4 + 3 * h + j] = da_o;
                                dc_s[bh + j] = dct;
                                dh_s[bh + j] = 0.0; // replaced by the recurrent term
                            }
                        }
                    }
                    let da_owned = da_c.index_axis(Axis(0), t).to_owned();
                    dh += &da_owned.dot(&wh.t());
                }
            });
        }

        let da_flat = da_all.to_shape((l * m, 4 * h)).unwrap().to_owned();
        let xflat = x.to_shape((l * m, d)).unwrap().to_owned();
        let hprev_flat = self
            .h_states
            .slice(s![0..l, .., ..])
            .to_shape((l * m, h))
            .unwrap()
            .to_owned();

        let gx = wants[0].then(|| {
            let wx = i[1].view().into_dimensionality::<Ix2>().unwrap();
            da_flat
                .dot(&wx.t())
                .into_shape_with_order((l, m, d))
                .unwrap()
                .into_dyn()
        });
        let gwx = wants[1].then(|| xflat.t().dot(&da_flat).into_dyn());
        let gwh = wants[2].then(|| hprev_flat.t().dot(&da_flat).into_dyn());
        let gb = wants[3].then(|| da_flat.sum_axis(Axis(0)).into_dyn());
        vec![gx, gwx, gwh, gb]
    }
    fn name(&self) -> &'static str {
        "lstm_seq"
    }
}

impl Graph {
    /// GRU over `[L, M, D]` -> hidden states `[L, M, H]`.
    pub fn gru_seq(&mut self, x: NodeId, w: &RnnWeights) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (l, m, d) = xv.dim();
        let wxv = self.value(w.wx).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let whv = self.value(w.wh).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let bv = self.value(w.b).as_slice().unwrap().to_vec();
        assert_eq!(wxv.dim().0, d, "gru: wx rows");
        let h = wxv.dim().1 / 3;
        assert_eq!(whv.dim(), (h, 3 * h), "gru: wh shape");
        assert_eq!(bv.len(), 3 * h, "gru: bias length");

        let xflat = xv.to_shape((l * m, d)).unwrap().to_owned();
        let mut xproj = xflat.dot(&wxv);
        for mut row in xproj.outer_iter_mut() {
            let rs = row.as_slice_mut().unwrap();
            for (v, b) in rs.iter_mut().zip(bv.iter()) {
                *v += b;
            }
        }
        let xproj = xproj.into_shape_with_order((l, m, 3 * h)).unwrap();

        let mut gates = Array3::<f64>::zeros((l, m, 3 * h));
        let mut u_all = Array3::<f64>::zeros((l, m, h));
        let mut h_states = Array3::<f64>::zeros((l + 1, m, h));
        let sz = chunk_size(m);
        {
            let tasks: Vec<_> = gates
                .axis_chunks_iter_mut(Axis(1), sz)
                .zip(u_all.axis_chunks_iter_mut(Axis(1), sz))
                .zip(h_states.axis_chunks_iter_mut(Axis(1), sz))
                .zip(xproj.axis_chunks_iter(Axis(1), sz))
                .map(|(((a, b), c), d)| (a, b, c, d))
                .collect();
            tasks.into_par_iter().for_each(|(mut gates_c, mut u_c, mut hs_c, xp_c)| {
                let mc = xp_c.dim().1;
                let mut h_cur = Array2::<f64>::zeros((mc, h));
                for t in 0..l {
                    let hp = h_cur.dot(&whv); // [mc, 3H]
                    let hp_s = hp.as_slice().unwrap();
                    let xt = xp_c.index_axis(Axis(0), t);
                    let xt = xt.to_slice().unwrap();
                    let g_t = gates_c.index_axis_mut(Axis(0), t);
                    let g_t = g_t.into_slice().unwrap();
                    let u_t = u_c.index_axis_mut(Axis(0), t);
                    let u_t = u_t.into_slice().unwrap();
                    let mut h_new = Array2::<f64>::zeros((mc, h));
                    {
                        let h_prev = h_cur.as_slice().unwrap();
                        let hn = h_new.as_slice_mut().unwrap();
                        for r_i in 0..mc {
                            let b3 = r_i * 3 * h;
                            let bh = r_i * h;
                            for j in 0..h {
                                let r = sigmoid(xt[b3 + j] + hp_s[b3 + j]);
                                let z = sigmoid(xt[b3 + h + j] + hp_s[b3 + h + j]);
                                let u = hp_s[b3 + 2 * h + j];
                                let n = fast_tanh(xt[b3 + 2 * h + j] + r * u);
                                let hv = (1.0 - z) * n + z * h_prev[bh + j];
                                g_t[b3 + j] = r;
                                g_t[b3 + h + j] = z;
                                g_t[b3 + 2 * h + j] = n;
                                u_t[bh + j] = u;
                                hn[bh + j] = hv;
                            }
                        }
                    }
                    hs_c.index_axis_mut(Axis(0), t + 1).assign(&h_new);
                    h_cur = h_new;
                }
            });
        }
        let out = h_states.slice(s![1.., .., ..]).to_owned().into_dyn();
        self.push_op(
            out,
            vec![x, w.wx, w.wh, w.b],
            Box::new(GruOp {
                hdim: h,
                gates,
                u: u_all,
                h_states,
            }),
        )
    }

    /// LSTM over `[L, M, D]` -> hidden states `[L, M, H]`.
    pub fn lstm_seq(&mut self, x: NodeId, w: &RnnWeights) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (l, m, d) = xv.dim();
        let wxv = self.value(w.wx).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let whv = self.value(w.wh).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let bv = self.value(w.b).as_slice().unwrap().to_vec();
        assert_eq!(wxv.dim().0, d, "lstm: wx rows");
        let h = wxv.dim().1 / 4;
        assert_eq!(whv.dim(), (h, 4 * h), "lstm: wh shape");
        assert_eq!(bv.len(), 4 * h, "lstm: bias length");

        let xflat = xv.to_shape((l * m, d)).unwrap().to_owned();
        let mut xproj = xflat.dot(&wxv);
        for mut row in xproj.outer_iter_mut() {
            let rs = row.as_slice_mut().unwrap();
            for (v, b) in rs.iter_mut().zip(bv.iter()) {
                *v += b;
            }
        }
        let xproj = xproj.into_shape_with_order((l, m, 4 * h)).unwrap();

        let mut gates = Array3::<f64>::zeros((l, m, 4 * h));
        let mut c_states = Array3::<f64>::zeros((l + 1, m, h));
        let mut h_states = Array3::<f64>::zeros((l + 1, m, h));
        let sz = chunk_size(m);
        {
            let tasks: Vec<_> = gates
                .axis_chunks_iter_mut(Axis(1), sz)
                .zip(c_states.axis_chunks_iter_mut(Axis(1), sz))
                .zip(h_states.axis_chunks_iter_mut(Axis(1), sz))
                .zip(xproj.axis_chunks_iter(Axis(1), sz))
                .map(|(((a, b), c), d)| (a, b, c, d))
                .collect();
            tasks.into_par_iter().for_each(|(mut gates_c, mut cs_c, mut hs_c, xp_c)| {
                let mc = xp_c.dim().1;
                let mut h_cur = Array2::<f64>::zeros((mc, h));
                let mut c_cur = Array2::<f64>::zeros((mc, h));
                for t in 0..l {
                    let hp = h_cur.dot(&whv); // [mc, 4H]
                    let hp_s = hp.as_slice().unwrap();
                    let xt = xp_c.index_axis(Axis(0), t);
                    let xt = xt.to_slice().unwrap();
                    let g_t = gates_c.index_axis_mut(Axis(0), t);
                    let g_t = g_t.into_slice().unwrap();
                    {
                        let hs = h_cur.as_slice_mut().unwrap();
                        let cs = c_cur.as_slice_mut().unwrap();
                        for r_i in 0..mc {
                            let b4 = r_i * 4 * h;
                            let bh = r_i * h;
                            for j in 0..h {
                                let iv = sigmoid(xt[b4 + j] + hp_s[b4 + j]);
                                let fv = sigmoid(xt[b4 + h + j] + hp_s[b4 + h + j]);
                                let gv = fast_tanh(xt[b4 + 2 * h + j] + hp_s[b4 + 2 * h + j]);
                                let ov = sigmoid(xt[b4 + 3 * h + j] + hp_s[b4 + 3 * h + j]);
                                let cv = fv * cs[bh + j] + iv * gv;
                                let hv = ov * fast_tanh(cv);
                                g_t[b4 + j] = iv;
                                g_t[b4 + h + j] = fv;
                                g_t[b4 + 2 * h + j] = gv;
                                g_t[b4 + 3 * h + j] = ov;
                                cs[bh + j] = cv;
                                hs[bh + j] = hv;
                            }
                        }
                    }
                    cs_c.index_axis_mut(Axis(0), t + 1).assign(&c_cur);
                    hs_c.index_axis_mut(Axis(0), t + 1).assign(&h_cur);
                }
            });
        }
        let out = h_states.slice(s![1.., .., ..]).to_owned().into_dyn();
        self.push_op(
            out,
            vec![x, w.wx, w.wh, w.b],
            Box::new(LstmOp {
                hdim: h,
                gates,
                c_states,
                h_states,
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::{finite_diff_max_rel_err, Arr, Graph, NodeId};
    use super::RnnWeights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
        Arr::from_shape_fn(ndarray::IxDyn(shape), |_| rng.random_range(-0.7..0.7))
    }

    fn check(gru: bool) {
        let (l, m, d, h) = (5, 3, 4, 3);
        let gate_mult = if gru { 3 } else { 4 };
        let shapes: Vec<Vec<usize>> = vec![
            vec![l, m, d],
            vec![d, gate_mult * h],
            vec![h, gate_mult * h],
            vec![gate_mult * h],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let inputs: Vec<Arr> = shapes.iter().map(|s| rand_arr(s, &mut rng)).collect();
        let build = |g: &mut Graph, leaves: &[NodeId]| {
            let w = RnnWeights {
                wx: leaves[1],
                wh: leaves[2],
                b: leaves[3],
            };
            let hs = if gru {
                g.gru_seq(leaves[0], &w)
            } else {
                g.lstm_seq(leaves[0], &w)
            };
            let sq = g.mul(hs, hs);
            g.mean_all(sq)
        };
        let mut g = Graph::new();
        let leaves: Vec<_> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
        let root = build(&mut g, &leaves);
        let grads = g.backward(root);
        let analytic: Vec<Arr> = leaves.iter().map(|&l| grads.wrt(l).unwrap().clone()).collect();
        let eval = |vals: &[Arr]| {
            let mut g = Graph::new();
            let leaves: Vec<_> = vals.iter().map(|v| g.leaf(v.clone())).collect();
            let r = build(&mut g, &leaves);
            g.scalar_value(r)
        };
        let err = finite_diff_max_rel_err(&eval, &inputs, &analytic, 60, 1e-6, &mut rng);
        assert!(err < 5e-5, "max rel err {err} (gru={gru})");
    }

    #[test]
    fn gradcheck_gru() {
        check(true);
    }

    #[test]
    fn gradcheck_lstm() {
        check(false);
    }

    #[test]
    fn sequences_are_independent_across_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w_arrs = [
            rand_arr(&[2, 9], &mut rng),
            rand_arr(&[3, 9], &mut rng),
            rand_arr(&[9], &mut rng),
        ];
        let x1 = rand_arr(&[6, 2, 2], &mut rng);
        let mut x2 = x1.clone();
        x2[[0, 1, 0]] += 0.5; // perturb batch row 1 only

        let run = |x: &Arr| {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let w = RnnWeights {
                wx: g.constant(w_arrs[0].clone()),
                wh: g.constant(w_arrs[1].clone()),
                b: g.constant(w_arrs[2].clone()),
            };
            let hs = g.gru_seq(xn, &w);
            g.value(hs).clone()
        };
        let y1 = run(&x1);
        let y2 = run(&x2);
        for t in 0..6 {
            for j in 0..3 {
                assert_eq!(y1[[t, 0, j]], y2[[t, 0, j]], "row 0 must be untouched");
            }
        }
        assert!((&y1 - &y2).iter().any(|&v| v.abs() > 1e-9));
    }
}
