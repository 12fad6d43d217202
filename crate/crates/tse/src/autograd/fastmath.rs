//! Branch-light transcendentals for the hot loops (softmax rows, recurrent
//! gates). Accuracy is ~1e-14 relative, which is far inside every tolerance
//! the losses and gradient checks use; backward passes consume the saved
//! forward activations, so gradients stay consistent with these values by
//! construction.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2: f64 = std::f64::consts::LN_2;

/// Saturating exp(x) via 2^k * e^r with |r| <= ln2/2 and a degree-12 Taylor
/// tail. Branchless (inputs clamp to +-700, where the result is 1e-304 /
/// 1e304) so row loops auto-vectorize.
#[inline(always)]
pub fn fast_exp(x: f64) -> f64 {
    let x = x.clamp(-700.0, 700.0);
    let k = (x * LOG2E).round_ties_even();
    let r = (-k).mul_add(LN2, x);
    // Horner over r^n / n!, n = 12 .. 0
    let mut p: f64 = 1.0 / 479_001_600.0; // 1/12!
    p = p.mul_add(r, 1.0 / 39_916_800.0);
    p = p.mul_add(r, 1.0 / 3_628_800.0);
    p = p.mul_add(r, 1.0 / 362_880.0);
    p = p.mul_add(r, 1.0 / 40_320.0);
    p = p.mul_add(r, 1.0 / 5_040.0);
    p = p.mul_add(r, 1.0 / 720.0);
    p = p.mul_add(r, 1.0 / 120.0);
    p = p.mul_add(r, 1.0 / 24.0);
    p = p.mul_add(r, 1.0 / 6.0);
    p = p.mul_add(r, 0.5);
    p = p.mul_add(r, 1.0);
    p = p.mul_add(r, 1.0);
    // |k| <= 1010 after the clamp, so the biased exponent stays normal
    let two_k = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    p * two_k
}

#[inline(always)]
pub fn fast_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + fast_exp(-x))
}

#[inline(always)]
pub fn fast_tanh(x: f64) -> f64 {
    // (e^{2x} - 1) / (e^{2x} + 1); fast_exp's clamp saturates the tails to
    // exactly +-1 in f64 well before the clamp bound matters
    let e2 = fast_exp(2.0 * x);
    (e2 - 1.0) / (e2 + 1.0)
}

/// Deterministic 8-lane tree sum; vectorizes without relaxing FP semantics
/// because the lane order is fixed by construction.
#[inline(always)]
pub fn sum_slice(x: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = x.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for (l, v) in lanes.iter_mut().zip(c.iter()) {
            *l += v;
        }
    }
    let mut tail = 0.0;
    for &v in rem {
        tail += v;
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

/// Deterministic 8-lane dot product, same lane scheme as [`sum_slice`].
#[inline(always)]
pub fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let ra = ca.remainder();
    let cb = b.chunks_exact(8);
    let rb = cb.remainder();
    for (x8, y8) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x8[i] * y8[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb.iter()) {
        tail += x * y;
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

/// 8-lane max (order-independent; max is associative).
#[inline(always)]
pub fn max_slice(x: &[f64]) -> f64 {
    let mut lanes = [f64::NEG_INFINITY; 8];
    let chunks = x.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for (l, v) in lanes.iter_mut().zip(c.iter()) {
            *l = l.max(*v);
        }
    }
    let mut m = f64::NEG_INFINITY;
    for &v in rem {
        m = m.max(v);
    }
    for &l in &lanes {
        m = m.max(l);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_std_within_1e13() {
        let mut x = -60.0f64;
        while x < 60.0 {
            let a = fast_exp(x);
            let b = x.exp();
            let rel = (a - b).abs() / b;
            assert!(rel < 1e-13, "x={x}: {a} vs {b} rel {rel}");
            x += 0.0173;
        }
        // saturation beyond +-700
        assert!(fast_exp(-800.0) < 1e-300);
        assert!(fast_exp(800.0) > 1e300);
    }

    #[test]
    fn sigmoid_tanh_match_std() {
        let mut x = -30.0f64;
        while x < 30.0 {
            let s = fast_sigmoid(x);
            let s_ref = 1.0 / (1.0 + (-x).exp());
            assert!((s - s_ref).abs() < 1e-14, "sigmoid at {x}");
            let t = fast_tanh(x);
            let t_ref = x.tanh();
            assert!((t - t_ref).abs() < 2e-14, "tanh at {x}: {t} vs {t_ref}");
            x += 0.0211;
        }
        assert_eq!(fast_tanh(25.0), 1.0);
        assert_eq!(fast_tanh(-25.0), -1.0);
    }

    #[test]
    fn lane_reductions_match_reference() {
        let x: Vec<f64> = (0..103).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..103).map(|i| (i as f64 * 0.3).cos()).collect();
        let sum_ref: f64 = x.iter().sum();
        assert!((sum_slice(&x) - sum_ref).abs() < 1e-12);
        let dot_ref: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((dot_slice(&x, &y) - dot_ref).abs() < 1e-12);
        let max_ref = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        assert_eq!(max_slice(&x), max_ref);
    }
}
