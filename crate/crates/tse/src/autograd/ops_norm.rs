//! Layer normalization over the trailing (feature) axis.

use ndarray::Array1;

use super::{Arr, Graph, NodeId, Op};

const LN_EPS: f64 = 1e-8;

struct LayerNorm;

impl Op for LayerNorm {
    fn backward(&self, i: &[&Arr], _o: &Arr, g: &Arr, wants: &[bool]) -> Vec<Option<Arr>> {
        let d = *i[0].shape().last().unwrap();
        let rows = i[0].len() / d;
        let x = i[0].to_shape((rows, d)).unwrap();
        let gamma = i[1].as_slice().unwrap();
        let g2 = g.to_shape((rows, d)).unwrap();

        let mut gx = wants[0].then(|| ndarray::Array2::<f64>::zeros((rows, d)));
        let mut ggamma = wants[1].then(|| Array1::<f64>::zeros(d));
        let mut gbeta = wants[2].then(|| Array1::<f64>::zeros(d));

        let inv_d = 1.0 / d as f64;
        let mut xhat = vec![0.0f64; d];
        let xs = x.as_slice().unwrap();
        let gsl = g2.as_slice().unwrap();
        for r in 0..rows {
            let xr = &xs[r * d..(r + 1) * d];
            let gr = &gsl[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() * inv_d;
            let var = xr.iter().fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                xhat[j] = (xr[j] - mean) * inv_std;
            }
            if let Some(gb) = gbeta.as_mut() {
                for j in 0..d {
                    gb[j] += gr[j];
                }
            }
            if let Some(gg) = ggamma.as_mut() {
                for j in 0..d {
                    gg[j] += gr[j] * xhat[j];
                }
            }
            if let Some(gx) = gx.as_mut() {
                // gxhat = g * gamma; gx = inv_std*(gxhat - mean(gxhat) - xhat*mean(gxhat*xhat))
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    let gh = gr[j] * gamma[j];
                    m1 += gh;
                    m2 += gh * xhat[j];
                }
                m1 *= inv_d;
                m2 *= inv_d;
                let orow = gx.as_slice_mut().unwrap();
                let orow = &mut orow[r * d..(r + 1) * d];
                for j in 0..d {
                    let gh = gr[j] * gamma[j];
                    orow[j] = inv_std * (gh - m1 - xhat[j] * m2);
                }
            }
        }
        let shape = i[0].raw_dim();
        vec![
            gx.map(|a| a.into_shape_with_order(shape).unwrap()),
            ggamma.map(|a| a.into_dyn()),
            gbeta.map(|a| a.into_dyn()),
        ]
    }
    fn name(&self) -> &'static str {
        "layer_norm"
    }
}

impl Graph {
    /// Normalize over the last axis; `gamma`/`beta` have that axis' length.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.value(gamma).len(), d, "layer_norm: gamma length");
        assert_eq!(self.value(beta).len(), d, "layer_norm: beta length");
        let shape = self.value(x).raw_dim();
        let rows = self.value(x).len() / d;
        let xv = self.value(x).to_shape((rows, d)).unwrap().to_owned();
        let gam = self.value(gamma).as_slice().unwrap().to_vec();
        let bet = self.value(beta).as_slice().unwrap().to_vec();
        let mut out = xv;
        let inv_d = 1.0 / d as f64;
        for mut row in out.outer_iter_mut() {
            let rs = row.as_slice_mut().unwrap();
            let mean = rs.iter().sum::<f64>() * inv_d;
            let var = rs.iter().fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in rs.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * gam[j] + bet[j];
            }
        }
        let v = out.into_shape_with_order(shape).unwrap();
        self.push_op(v, vec![x, gamma, beta], Box::new(LayerNorm))
    }
}


#[cfg(test)]
mod tests {
    use super::super::{finite_diff_max_rel_err, Arr, Graph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut g = Graph::new();
        let x = g.constant(Arr::from_shape_fn(ndarray::IxDyn(&[2, 3, 8]), |ix| {
            (ix[0] * 7 + ix[1] * 3 + ix[2]) as f64 * 0.37 - 1.0
        }));
        let gamma = g.constant(Arr::ones(ndarray::IxDyn(&[8])));
        let beta = g.constant(Arr::zeros(ndarray::IxDyn(&[8])));
        let y = g.layer_norm(x, gamma, beta);
        let yv = g.value(y).to_shape((6, 8)).unwrap().to_owned();
        for row in yv.outer_iter() {
            let mean = row.mean().unwrap();
            let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradcheck_layer_norm() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |shape: &[usize], rng: &mut ChaCha8Rng| {
            Arr::from_shape_fn(ndarray::IxDyn(shape), |_| rng.random_range(-1.0..1.0))
        };
        let inputs = vec![mk(&[3, 6], &mut rng), mk(&[6], &mut rng), mk(&[6], &mut rng)];
        let build = |g: &mut Graph, l: &[super::NodeId]| {
            let y = g.layer_norm(l[0], l[1], l[2]);
            let z = g.mul(y, y);
            g.mean_all(z)
        };
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
        assert!(err < 1e-5, "max rel err {err}");
    }
}
