//! Segmentation of a latent `[B, N, T]` into 50%-overlapped chunks
//! `[B, N, C, S]` and the exact inverse overlap-add.
//!
//! Layout: the signal is placed at offset `hop` in a zero-padded buffer of
//! length `(S + 1) * hop` with `S = ceil(T / hop) + 1` frames, so every
//! signal position is covered by exactly two frames. Overlap-add with
//! constant-one windows then reconstructs `2x`, and the 0.5 compensation
//! makes `overlap_add(chunk(x)) == x` bitwise.

use ndarray::{Array3, Array4, Ix3, Ix4};

use super::{Arr, Graph, NodeId, Op};

pub fn chunk_count(t: usize, c: usize) -> usize {
    let hop = c / 2;
    t.div_ceil(hop) + 1
}

/// For each frame position `(u, s)`, the signal index `s*hop + u - hop`, if
/// it lands inside `[0, T)`.
fn signal_index(s: usize, u: usize, hop: usize, t: usize) -> Option<usize> {
    (s * hop + u).checked_sub(hop).filter(|&idx| idx < t)
}

struct Chunk {
    c: usize,
    t: usize,
}
impl Op for Chunk {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let hop = self.c / 2;
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let (b, n, c, s_cnt) = g4.dim();
        let gs = g.as_slice().unwrap();
        let mut gx = Array3::<f64>::zeros((b, n, self.t));
        let gxs = gx.as_slice_mut().unwrap();
        for lane in 0..b * n {
            let src = &gs[lane * c * s_cnt..(lane + 1) * c * s_cnt];
            let dst = &mut gxs[lane * self.t..(lane + 1) * self.t];
            for u in 0..c {
                let row = &src[u * s_cnt..(u + 1) * s_cnt];
                for (si, &v) in row.iter().enumerate() {
                    if let Some(t_idx) = signal_index(si, u, hop, self.t) {
                        dst[t_idx] += v;
                    }
                }
            }
        }
        let _ = i;
        vec![Some(gx.into_dyn())]
    }
    fn name(&self) -> &'static str {
        "chunk"
    }
}

struct OverlapAdd {
    c: usize,
    t: usize,
}
impl Op for OverlapAdd {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let hop = self.c / 2;
        let shape = i[0].shape();
        let (b, n, c, s_cnt) = (shape[0], shape[1], shape[2], shape[3]);
        let gs = g.as_slice().unwrap();
        let mut gy = Array4::<f64>::zeros((b, n, c, s_cnt));
        let gys = gy.as_slice_mut().unwrap();
        for lane in 0..b * n {
            let src = &gs[lane * self.t..(lane + 1) * self.t];
            let dst = &mut gys[lane * c * s_cnt..(lane + 1) * c * s_cnt];
            for u in 0..c {
                let row = &mut dst[u * s_cnt..(u + 1) * s_cnt];
                for (si, o) in row.iter_mut().enumerate() {
                    if let Some(t_idx) = signal_index(si, u, hop, self.t) {
                        *o = 0.5 * src[t_idx];
                    }
                }
            }
        }
        vec![Some(gy.into_dyn())]
    }
    fn name(&self) -> &'static str {
        "overlap_add"
    }
}

impl Graph {
    /// `[B, N, T]` -> `[B, N, C, S]` with hop `C/2`.
    pub fn chunk(&mut self, x: NodeId, c: usize) -> NodeId {
        assert!(c >= 2 && c % 2 == 0, "chunk size must be even");
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (b, n, t) = xv.dim();
        let hop = c / 2;
        let s_cnt = chunk_count(t, c);
        let xs = self.value(x).as_slice().unwrap();
        let mut out = Array4::<f64>::zeros((b, n, c, s_cnt));
        {
            let os = out.as_slice_mut().unwrap();
            for lane in 0..b * n {
                let src = &xs[lane * t..(lane + 1) * t];
                let dst = &mut os[lane * c * s_cnt..(lane + 1) * c * s_cnt];
                for u in 0..c {
                    let row = &mut dst[u * s_cnt..(u + 1) * s_cnt];
                    for (si, o) in row.iter_mut().enumerate() {
                        if let Some(t_idx) = signal_index(si, u, hop, t) {
                            *o = src[t_idx];
                        }
                    }
                }
            }
        }
        let _ = xv;
        self.push_op(out.into_dyn(), vec![x], Box::new(Chunk { c, t }))
    }

    /// `[B, N, C, S]` -> `[B, N, T]`; exact inverse of [`Graph::chunk`] for
    /// an unmodified chunking.
    pub fn overlap_add(&mut self, y: NodeId, t: usize) -> NodeId {
        let yv = self.value(y).view().into_dimensionality::<Ix4>().unwrap();
        let (b, n, c, s_cnt) = yv.dim();
        let hop = c / 2;
        assert_eq!(s_cnt, chunk_count(t, c), "overlap_add: frame count vs T");
        let ys = self.value(y).as_slice().unwrap();
        let mut out = Array3::<f64>::zeros((b, n, t));
        {
            let os = out.as_slice_mut().unwrap();
            for lane in 0..b * n {
                let src = &ys[lane * c * s_cnt..(lane + 1) * c * s_cnt];
                let dst = &mut os[lane * t..(lane + 1) * t];
                for u in 0..c {
                    let row = &src[u * s_cnt..(u + 1) * s_cnt];
                    for (si, &v) in row.iter().enumerate() {
                        if let Some(t_idx) = signal_index(si, u, hop, t) {
                            dst[t_idx] += v;
                        }
                    }
                }
            }
        }
        let _ = yv;
        out.mapv_inplace(|v| v * 0.5);
        self.push_op(out.into_dyn(), vec![y], Box::new(OverlapAdd { c, t }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Arr, Graph};
    use super::chunk_count;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn segmentation_example_t4_c4() {
        // T=4, C=4, hop=2 -> S=3, padded length 8
        assert_eq!(chunk_count(4, 4), 3);
        let mut g = Graph::new();
        let x = g.constant(
            ndarray::Array3::from_shape_vec((1, 1, 4), vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .into_dyn(),
        );
        let ch = g.chunk(x, 4);
        assert_eq!(g.shape(ch), &[1, 1, 4, 3]);
        let v = g.value(ch);
        // frame 0 covers padded [0..4) = [0, 0, x0, x1]
        assert_eq!(
            (0..4).map(|u| v[[0, 1 * 0, u, 0]]).collect::<Vec<_>>(),
            vec![0.0, 0.0, 1.0, 2.0]
        );
        // frame 1 covers padded [2..6) = [x0, x1, x2, x3]
        assert_eq!(
            (0..4).map(|u| v[[0, 0, u, 1]]).collect::<Vec<_>>(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        // frame 2 covers padded [4..8) = [x2, x3, 0, 0]
        assert_eq!(
            (0..4).map(|u| v[[0, 0, u, 2]]).collect::<Vec<_>>(),
            vec![3.0, 4.0, 0.0, 0.0]
        );
    }

    #[test]
    fn round_trip_exact_over_random_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut cases: Vec<(usize, usize)> = vec![(1, 2), (1, 16), (257, 16), (100, 8)];
        for _ in 0..28 {
            let t = rng.random_range(1..=257);
            let c = *[2usize, 4, 8, 16].get(rng.random_range(0..4)).unwrap();
            cases.push((t, c));
        }
        for (t, c) in cases {
            let mut g = Graph::new();
            let x_arr = Arr::from_shape_fn(ndarray::IxDyn(&[2, 3, t]), |_| {
                rng.random_range(-1.0..1.0)
            });
            let x = g.constant(x_arr.clone());
            let ch = g.chunk(x, c);
            let back = g.overlap_add(ch, t);
            // bitwise: 0.5*(a+a) == a in IEEE 754
            assert_eq!(g.value(back), &x_arr, "t={t} c={c}");
        }
    }

    #[test]
    fn zero_latent_gives_zero_chunks() {
        let mut g = Graph::new();
        let x = g.constant(Arr::zeros(ndarray::IxDyn(&[1, 2, 10])));
        let ch = g.chunk(x, 4);
        assert!(g.value(ch).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcheck_chunk_overlap_add() {
        use super::super::finite_diff_max_rel_err;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Arr::from_shape_fn(ndarray::IxDyn(&[1, 2, 11]), |_| rng.random_range(-1.0..1.0));
        let w0 = Arr::from_shape_fn(ndarray::IxDyn(&[1, 2, 4, 7]), |_| rng.random_range(-1.0..1.0));
        let build = |g: &mut Graph, l: &[super::NodeId]| {
            let ch = g.chunk(l[0], 4); // [1,2,4,7]
            let m = g.mul(ch, l[1]);
            let back = g.overlap_add(m, 11);
            let sq = g.mul(back, back);
            g.sum_all(sq)
        };
        let inputs = vec![x0, w0];
        let mut g = Graph::new();
        let leaves: Vec<_> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
        let root = build(&mut g, &leaves);
        let grads = g.backward(root);
        let analytic: Vec<Arr> = leaves.iter().map(|&l| grads.wrt(l).unwrap().clone()).collect();
        let eval = |vals: &[Arr]| {
            let mut g = Graph::new();
            let leaves: Vec<_> = vals.iter().map(|v| g.leaf(v.clone())).collect();
            { let r = build(&mut g, &leaves); g.scalar_value(r) }
        };
        let err = finite_diff_max_rel_err(&eval, &inputs, &analytic, 40, 1e-6, &mut rng);
        assert!(err < 1e-6, "max rel err {err}");
    }
}
