//! Parameter initialization.

use rand::Rng;
use rand_distr_lite::standard_normal;

use super::tensor::{Scalar, Tensor};

/// Orthogonal initialization with gain. The tensor is viewed as a
/// `[shape[0], prod(shape[1..])]` matrix whose rows (or columns, whichever are
/// fewer) are orthonormalized by modified Gram-Schmidt.
pub fn orthogonal<T: Scalar, R: Rng>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<T> {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product::<usize>().max(1);
    let (short, long) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| standard_normal(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = gain * if rows <= cols { basis[r][c] } else { basis[c][r] };
        }
    }
    Tensor::from_f64(shape, &data).expect("shape matches data")
}

/// Dense weight `[in, out]` initialized orthogonally.
pub fn dense_weight<T: Scalar, R: Rng>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    orthogonal(&[fan_in, fan_out], gain, rng)
}

mod rand_distr_lite {
    use rand::Rng;

    /// Box-Muller standard normal sample.
    pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

pub use rand_distr_lite::standard_normal as normal_sample;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rows_are_orthonormal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w: Tensor<f64> = orthogonal(&[4, 2, 3, 3], 1.0, &mut rng);
        let d = w.data();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..18).map(|c| d[i * 18 + c] * d[j * 18 + c]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9);
            }
        }
    }
}
