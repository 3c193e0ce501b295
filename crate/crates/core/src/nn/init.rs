//! Weight initializers: Glorot uniform for input/output maps, orthogonal
//! for recurrent matrices, zeros for biases.

use ndarray::Array2;
use rand::Rng;

use super::{real, Real};

pub fn zeros<T: Real>(rows: usize, cols: usize) -> Array2<T> {
    Array2::zeros((rows, cols))
}

pub fn glorot_uniform<T: Real, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let lo = real(-limit);
    let hi = real(limit);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

/// Square orthogonal matrix via modified Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<T: Real, R: Rng>(n: usize, rng: &mut R) -> Array2<T> {
    let mut m: Array2<T> = Array2::from_shape_fn((n, n), |_| T::sample_standard_normal(rng));
    for i in 0..n {
        for j in 0..i {
            let proj = {
                let qi = m.row(i);
                let qj = m.row(j);
                qi.iter()
                    .zip(qj.iter())
                    .map(|(&a, &b)| a * b)
                    .fold(T::zero(), |a, b| a + b)
            };
            let qj = m.row(j).to_owned();
            let mut qi = m.row_mut(i);
            qi.zip_mut_with(&qj, |a, &b| *a = *a - proj * b);
        }
        let norm = m
            .row(i)
            .iter()
            .map(|&v| v * v)
            .fold(T::zero(), |a, b| a + b)
            .sqrt();
        let mut qi = m.row_mut(i);
        qi.mapv_inplace(|v| v / norm);
    }
    m
}
