//! Weight initialization: small-uniform fan-in scaling for dense/conv
//! weights, orthogonal (modified Gram-Schmidt) for recurrent matrices.

use ndarray::{Array2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Arr;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Arr {
    let a = 1.0 / (fan_in as f64).sqrt();
    Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-a..a))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Orthogonal `[n, m]`: orthonormal rows if `n <= m`, orthonormal columns
/// otherwise.
pub fn orthogonal_init(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let transpose = n > m;
    let (rows, cols) = if transpose { (m, n) } else { (n, m) };
    // rows <= cols: orthonormalize the rows with modified Gram-Schmidt
    let mut a = Array2::<f64>::from_shape_fn((rows, cols), |_| gaussian(rng));
    for i in 0..rows {
        for j in 0..i {
            let proj = {
                let (ri, rj) = (a.row(i), a.row(j));
                ri.dot(&rj)
            };
            let rj = a.row(j).to_owned();
            let mut ri = a.row_mut(i);
            for (x, y) in ri.iter_mut().zip(rj.iter()) {
                *x -= proj * y;
            }
        }
        let norm = a.row(i).dot(&a.row(i)).sqrt();
        a.row_mut(i).mapv_inplace(|v| v / norm);
    }
    if transpose {
        a.t().as_standard_layout().to_owned()
    } else {
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = orthogonal_init(4, 7, &mut rng);
        for i in 0..4 {
            for j in 0..4 {
                let d = q.row(i).dot(&q.row(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-10, "({i},{j}) -> {d}");
            }
        }
    }

    #[test]
    fn orthogonal_tall_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = orthogonal_init(7, 3, &mut rng);
        assert_eq!(q.dim(), (7, 3));
        for i in 0..3 {
            for j in 0..3 {
                let d = q.column(i).dot(&q.column(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn uniform_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = uniform_fan_in(&[64, 16], 256, &mut rng);
        let bound = 1.0 / 16.0;
        assert!(w.iter().all(|&v| v.abs() <= bound));
        assert!(w.iter().any(|&v| v.abs() > bound * 0.5));
    }
}
