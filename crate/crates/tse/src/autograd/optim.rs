//! Adaptive-moment optimizers: Adam (L2 decay folded into the gradient) and
//! AdamW (decoupled decay), plus global gradient-norm clipping.

use super::{Arr, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// false: classic Adam, decay added to the gradient.
    /// true: AdamW, decay applied directly to the parameter.
    pub decoupled_decay: bool,
}

impl AdamConfig {
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decoupled_decay: false,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            decoupled_decay: true,
            ..Self::adam(lr, weight_decay)
        }
    }
}

/// Optimizer over a fixed set of parameters.
pub struct AdamOptimizer {
    cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Arr>,
    v: Vec<Arr>,
    t: u64,
}

impl AdamOptimizer {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, cfg: AdamConfig) -> Self {
        let m = ids.iter().map(|&id| Arr::zeros(store.value(id).raw_dim())).collect();
        let v = ids.iter().map(|&id| Arr::zeros(store.value(id).raw_dim())).collect();
        Self {
            cfg,
            ids,
            m,
            v,
            t: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. Parameters without a gradient this step are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Arr)]) {
        self.t += 1;
        let t = self.t as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (slot, &id) in self.ids.iter().enumerate() {
            let Some((_, g)) = grads.iter().find(|(gid, _)| *gid == id) else {
                continue;
            };
            let p = store.value_mut(id);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let (ps, ms, vs, gs) = (
                p.as_slice_mut().unwrap(),
                m.as_slice_mut().unwrap(),
                v.as_slice_mut().unwrap(),
                g.as_slice().unwrap(),
            );
            for i in 0..ps.len() {
                let mut grad = gs[i];
                if !c.decoupled_decay && c.weight_decay != 0.0 {
                    grad += c.weight_decay * ps[i];
                }
                ms[i] = c.beta1 * ms[i] + (1.0 - c.beta1) * grad;
                vs[i] = c.beta2 * vs[i] + (1.0 - c.beta2) * grad * grad;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                if c.decoupled_decay && c.weight_decay != 0.0 {
                    ps[i] -= c.lr * c.weight_decay * ps[i];
                }
                ps[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }

    /// Checkpoint plumbing: moment tensors in `ids` order plus step count.
    pub fn state(&self) -> (u64, &[Arr], &[Arr]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Arr>, v: Vec<Arr>) {
        assert_eq!(m.len(), self.m.len(), "optimizer state length");
        assert_eq!(v.len(), self.v.len(), "optimizer state length");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Scales gradients in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [(ParamId, Arr)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, g) in grads.iter() {
        sq += g.iter().map(|&v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", arr1(&[1.0, -1.0]).into_dyn());
        let mut opt = AdamOptimizer::new(&store, vec![id], AdamConfig::adam(0.1, 0.0));
        let g = arr1(&[1.0, -1.0]).into_dyn();
        opt.step(&mut store, &[(id, g)]);
        let w = store.value(id).as_slice().unwrap();
        assert!(w[0] < 1.0);
        assert!(w[1] > -1.0);
    }

    #[test]
    fn adamw_decays_without_gradient_coupling() {
        // zero gradient: AdamW still shrinks the weight, Adam does not move it
        let mut store = ParamStore::new();
        let id = store.add("w", arr1(&[2.0]).into_dyn());
        let mut opt = AdamOptimizer::new(&store, vec![id], AdamConfig::adamw(0.5, 0.1));
        opt.step(&mut store, &[(id, arr1(&[0.0]).into_dyn())]);
        let w = store.value(id).as_slice().unwrap()[0];
        assert!((w - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn params_without_grads_are_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("a", arr1(&[1.0]).into_dyn());
        let b = store.add("b", arr1(&[1.0]).into_dyn());
        let mut opt = AdamOptimizer::new(&store, vec![a, b], AdamConfig::adam(0.1, 0.0));
        opt.step(&mut store, &[(a, arr1(&[1.0]).into_dyn())]);
        assert_ne!(store.value(a).as_slice().unwrap()[0], 1.0);
        assert_eq!(store.value(b).as_slice().unwrap()[0], 1.0);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", arr1(&[0.0]).into_dyn());
        let mut grads = vec![(a, arr1(&[3.0, 4.0]).into_dyn())];
        let pre = clip_grad_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post: f64 = grads[0].1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((post - 1.0).abs() < 1e-12);
    }
}
