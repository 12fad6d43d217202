//! Audio-specific tape ops: analysis framing and the fixed 2x upsampler
//! (the same FIR as the dataset resampler, differentiable because it is a
//! constant linear map).

use ndarray::{Array2, Array3, Ix2, Ix3};

use crate::dsp;

use super::{Arr, Graph, NodeId, Op};

struct FrameSignal {
    win: usize,
    hop: usize,
}
impl Op for FrameSignal {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let (b, f, _) = g3.dim();
        let t = i[0].shape()[1];
        let mut gx = Array2::<f64>::zeros((b, t));
        for bi in 0..b {
            for fi in 0..f {
                let start = fi * self.hop;
                for u in 0..self.win {
                    gx[[bi, start + u]] += g3[[bi, fi, u]];
                }
            }
        }
        vec![Some(gx.into_dyn())]
    }
    fn name(&self) -> &'static str {
        "frame_signal"
    }
}

struct Upsample2x;
impl Op for Upsample2x {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, _w: &[bool]) -> Vec<Option<Arr>> {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let t = i[0].shape()[1];
        let b = g2.dim().0;
        let mut gx = Array2::<f64>::zeros((b, t));
        for bi in 0..b {
            let grow = g2.row(bi).as_standard_layout().to_owned();
            let gr = dsp::upfirdn_adjoint(grow.as_slice().unwrap(), 2, 1, t);
            gx.row_mut(bi)
                .assign(&ndarray::ArrayView1::from(gr.as_slice()));
        }
        vec![Some(gx.into_dyn())]
    }
    fn name(&self) -> &'static str {
        "upsample_2x"
    }
}

impl Graph {
    /// Overlapping analysis frames: `[B, t]` -> `[B, F, win]`.
    pub fn frame_signal(&mut self, x: NodeId, win: usize, hop: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let (b, t) = xv.dim();
        assert!(t >= win, "frame_signal: input shorter than window");
        let f = (t - win) / hop + 1;
        let mut out = Array3::<f64>::zeros((b, f, win));
        for bi in 0..b {
            for fi in 0..f {
                let start = fi * hop;
                for u in 0..win {
                    out[[bi, fi, u]] = xv[[bi, start + u]];
                }
            }
        }
        self.push_op(out.into_dyn(), vec![x], Box::new(FrameSignal { win, hop }))
    }

    /// Band-limited 8 kHz -> 16 kHz upsampling of each row of `[B, t]`.
    pub fn upsample_2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let (b, t) = xv.dim();
        let mut out = Array2::<f64>::zeros((b, 2 * t));
        for bi in 0..b {
            let row = xv.row(bi).as_standard_layout().to_owned();
            let up = dsp::upfirdn(row.as_slice().unwrap(), 2, 1);
            out.row_mut(bi)
                .assign(&ndarray::ArrayView1::from(up.as_slice()));
        }
        self.push_op(out.into_dyn(), vec![x], Box::new(Upsample2x))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{finite_diff_max_rel_err, Arr, Graph, NodeId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradcheck_frame_and_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x0 = Arr::from_shape_fn(ndarray::IxDyn(&[2, 30]), |_| rng.random_range(-1.0..1.0));
        let build = |g: &mut Graph, l: &[NodeId]| {
            let up = g.upsample_2x(l[0]); // [2, 60]
            let fr = g.frame_signal(up, 8, 4); // [2, 14, 8]
            let sq = g.mul(fr, fr);
            g.sum_all(sq)
        };
        let inputs = vec![x0];
        let mut g = Graph::new();
        let leaves: Vec<_> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
        let root = build(&mut g, &leaves);
        let grads = g.backward(root);
        let analytic = vec![grads.wrt(leaves[0]).unwrap().clone()];
        let eval = |vals: &[Arr]| {
            let mut g = Graph::new();
            let leaves: Vec<_> = vals.iter().map(|v| g.leaf(v.clone())).collect();
            { let r = build(&mut g, &leaves); g.scalar_value(r) }
        };
        let err = finite_diff_max_rel_err(&eval, &inputs, &analytic, 40, 1e-6, &mut rng);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn upsample_matches_dataset_resampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..500).map(|_| rng.random_range(-0.9..0.9)).collect();
        let direct = crate::dsp::upfirdn(&x, 2, 1);
        let mut g = Graph::new();
        let xn = g.constant(
            ndarray::Array2::from_shape_vec((1, 500), x.clone())
                .unwrap()
                .into_dyn(),
        );
        let up = g.upsample_2x(xn);
        assert_eq!(g.value(up).as_slice().unwrap(), direct.as_slice());
    }
}
