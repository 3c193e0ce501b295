//! GRU cell, dense layer, batch normalization and dropout, all expressed
//! as tape operations so the reverse pass covers them exactly.

use ndarray::Array2;
use rand::Rng;

use super::init;
use super::tape::{Tape, Var};
use super::{real, Mode, Real};

/// Gated recurrent unit parameters: update gate z, reset gate r,
/// candidate state. Input maps are F x Z, recurrent maps Z x Z, biases
/// 1 x Z.
#[derive(Debug, Clone)]
pub struct GruParams<T: Real> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_xz: Array2<T>,
    pub w_hz: Array2<T>,
    pub b_z: Array2<T>,
    pub w_xr: Array2<T>,
    pub w_hr: Array2<T>,
    pub b_r: Array2<T>,
    pub w_xh: Array2<T>,
    pub w_hh: Array2<T>,
    pub b_h: Array2<T>,
}

pub struct GruVars {
    pub w_xz: Var,
    pub w_hz: Var,
    pub b_z: Var,
    pub w_xr: Var,
    pub w_hr: Var,
    pub b_r: Var,
    pub w_xh: Var,
    pub w_hh: Var,
    pub b_h: Var,
}

impl<T: Real> GruParams<T> {
    /// Glorot input maps, orthogonal recurrent maps, zero biases.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        GruParams {
            input_dim,
            hidden_dim,
            w_xz: init::glorot_uniform(input_dim, hidden_dim, rng),
            w_hz: init::orthogonal(hidden_dim, rng),
            b_z: init::zeros(1, hidden_dim),
            w_xr: init::glorot_uniform(input_dim, hidden_dim, rng),
            w_hr: init::orthogonal(hidden_dim, rng),
            b_r: init::zeros(1, hidden_dim),
            w_xh: init::glorot_uniform(input_dim, hidden_dim, rng),
            w_hh: init::orthogonal(hidden_dim, rng),
            b_h: init::zeros(1, hidden_dim),
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        GruParams {
            input_dim,
            hidden_dim,
            w_xz: init::zeros(input_dim, hidden_dim),
            w_hz: init::zeros(hidden_dim, hidden_dim),
            b_z: init::zeros(1, hidden_dim),
            w_xr: init::zeros(input_dim, hidden_dim),
            w_hr: init::zeros(hidden_dim, hidden_dim),
            b_r: init::zeros(1, hidden_dim),
            w_xh: init::zeros(input_dim, hidden_dim),
            w_hh: init::zeros(hidden_dim, hidden_dim),
            b_h: init::zeros(1, hidden_dim),
        }
    }

    pub fn params(&self) -> Vec<&Array2<T>> {
        vec![
            &self.w_xz, &self.w_hz, &self.b_z, &self.w_xr, &self.w_hr, &self.b_r, &self.w_xh,
            &self.w_hh, &self.b_h,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        vec![
            &mut self.w_xz,
            &mut self.w_hz,
            &mut self.b_z,
            &mut self.w_xr,
            &mut self.w_hr,
            &mut self.b_r,
            &mut self.w_xh,
            &mut self.w_hh,
            &mut self.b_h,
        ]
    }

    /// Pushes the parameters onto the tape; the returned vars align with
    /// `params()` order.
    pub fn stage(&self, tape: &mut Tape<T>) -> (GruVars, Vec<Var>) {
        let w_xz = tape.param(&self.w_xz);
        let w_hz = tape.param(&self.w_hz);
        let b_z = tape.param(&self.b_z);
        let w_xr = tape.param(&self.w_xr);
        let w_hr = tape.param(&self.w_hr);
        let b_r = tape.param(&self.b_r);
        let w_xh = tape.param(&self.w_xh);
        let w_hh = tape.param(&self.w_hh);
        let b_h = tape.param(&self.b_h);
        let order = vec![w_xz, w_hz, b_z, w_xr, w_hr, b_r, w_xh, w_hh, b_h];
        (
            GruVars {
                w_xz,
                w_hz,
                b_z,
                w_xr,
                w_hr,
                b_r,
                w_xh,
                w_hh,
                b_h,
            },
            order,
        )
    }

    /// Runs the recurrence over the staged sequence (one var per step,
    /// each rows x F) and returns every hidden state; the last one is the
    /// sequence embedding.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &GruVars, steps: &[Var], h0: Var) -> Vec<Var> {
        assert!(!steps.is_empty(), "sequence length must be at least 1");
        let mut states = Vec::with_capacity(steps.len());
        let mut h = h0;
        for &x in steps {
            let xz = tape.matmul(x, vars.w_xz);
            let hz = tape.matmul(h, vars.w_hz);
            let z_pre = tape.add(xz, hz);
            let z_pre = tape.add_row_vec(z_pre, vars.b_z);
            let z = tape.sigmoid(z_pre);

            let xr = tape.matmul(x, vars.w_xr);
            let hr = tape.matmul(h, vars.w_hr);
            let r_pre = tape.add(xr, hr);
            let r_pre = tape.add_row_vec(r_pre, vars.b_r);
            let r = tape.sigmoid(r_pre);

            let rh = tape.mul(r, h);
            let xh = tape.matmul(x, vars.w_xh);
            let hh = tape.matmul(rh, vars.w_hh);
            let c_pre = tape.add(xh, hh);
            let c_pre = tape.add_row_vec(c_pre, vars.b_h);
            let c = tape.tanh(c_pre);

            let keep = tape.one_minus(z);
            let kept = tape.mul(keep, h);
            let new = tape.mul(z, c);
            h = tape.add(kept, new);
            states.push(h);
        }
        states
    }
}

/// Affine layer y = x W + b.
#[derive(Debug, Clone)]
pub struct Dense<T: Real> {
    pub w: Array2<T>,
    pub b: Array2<T>,
}

pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl<T: Real> Dense<T> {
    pub fn init<R: Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        Dense {
            w: init::glorot_uniform(input_dim, output_dim, rng),
            b: init::zeros(1, output_dim),
        }
    }

    pub fn params(&self) -> Vec<&Array2<T>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn stage(&self, tape: &mut Tape<T>) -> (DenseVars, Vec<Var>) {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        (DenseVars { w, b }, vec![w, b])
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &DenseVars, x: Var) -> Var {
        let y = tape.matmul(x, vars.w);
        tape.add_row_vec(y, vars.b)
    }
}

/// Batch normalization over rows with running statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Real> {
    pub scale: Array2<T>,
    pub shift: Array2<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

pub struct BatchNormVars {
    pub scale: Var,
    pub shift: Var,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            scale: Array2::ones((1, dim)),
            shift: Array2::zeros((1, dim)),
            running_mean: vec![T::zero(); dim],
            running_var: vec![T::one(); dim],
            momentum: real(0.1),
            eps: real(1e-5),
        }
    }

    pub fn params(&self) -> Vec<&Array2<T>> {
        vec![&self.scale, &self.shift]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        vec![&mut self.scale, &mut self.shift]
    }

    pub fn stage(&self, tape: &mut Tape<T>) -> (BatchNormVars, Vec<Var>) {
        let scale = tape.param(&self.scale);
        let shift = tape.param(&self.shift);
        (BatchNormVars { scale, shift }, vec![scale, shift])
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// ones (unbiased variance, exponential moving average); eval mode is
    /// a fixed affine map from the running statistics.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        vars: &BatchNormVars,
        x: Var,
        mode: Mode,
    ) -> Var {
        match mode {
            Mode::Train => {
                let n = tape.value(x).nrows();
                let (y, mean, var) = tape.batch_norm_train(x, vars.scale, vars.shift, self.eps);
                let unbias = real(n as f64 / (n as f64 - 1.0));
                let m = self.momentum;
                for c in 0..mean.len() {
                    self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * mean[c];
                    self.running_var[c] =
                        (T::one() - m) * self.running_var[c] + m * var[c] * unbias;
                }
                y
            }
            Mode::Eval => {
                let dim = self.running_mean.len();
                let mut neg_mean = Array2::zeros((1, dim));
                let mut inv_std = Array2::zeros((1, dim));
                for c in 0..dim {
                    neg_mean[[0, c]] = -self.running_mean[c];
                    inv_std[[0, c]] = T::one() / (self.running_var[c] + self.eps).sqrt();
                }
                let neg_mean = tape.leaf(neg_mean);
                let inv_std = tape.leaf(inv_std);
                let centered = tape.add_row_vec(x, neg_mean);
                let normed = tape.mul_row_vec(centered, inv_std);
                let scaled = tape.mul_row_vec(normed, vars.scale);
                tape.add_row_vec(scaled, vars.shift)
            }
        }
    }
}

/// Inverted dropout: train mode zeroes entries with probability `rate`
/// and scales survivors by 1/(1-rate); eval mode is the identity.
pub fn dropout<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Var {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if mode == Mode::Eval || rate == 0.0 {
        return x;
    }
    let keep_scale = real(1.0 / (1.0 - rate));
    let shape = tape.value(x).raw_dim();
    let mask = Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < rate {
            T::zero()
        } else {
            keep_scale
        }
    });
    tape.dropout(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Scalar reference implementation of the GRU recurrence.
    fn scalar_gru_step(p: &GruParams<f64>, x: &[f64], h: &[f64]) -> Vec<f64> {
        let z_dim = p.hidden_dim;
        let gate = |wx: &Array2<f64>, wh: &Array2<f64>, b: &Array2<f64>, hin: &[f64]| {
            (0..z_dim)
                .map(|j| {
                    let mut s = b[[0, j]];
                    for (i, &xi) in x.iter().enumerate() {
                        s += xi * wx[[i, j]];
                    }
                    for (i, &hi) in hin.iter().enumerate() {
                        s += hi * wh[[i, j]];
                    }
                    s
                })
                .collect::<Vec<f64>>()
        };
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z: Vec<f64> = gate(&p.w_xz, &p.w_hz, &p.b_z, h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate(&p.w_xr, &p.w_hr, &p.b_r, h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h.iter()).map(|(a, b)| a * b).collect();
        let c: Vec<f64> = gate(&p.w_xh, &p.w_hh, &p.b_h, &rh)
            .into_iter()
            .map(f64::tanh)
            .collect();
        (0..z_dim)
            .map(|j| (1.0 - z[j]) * h[j] + z[j] * c[j])
            .collect()
    }

    fn run_gru(p: &GruParams<f64>, xs: &[Vec<f64>], h0: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let (vars, _) = p.stage(&mut tape);
        let steps: Vec<Var> = xs
            .iter()
            .map(|x| tape.leaf(Array2::from_shape_vec((1, x.len()), x.clone()).unwrap()))
            .collect();
        let h0 = tape.leaf(Array2::from_shape_vec((1, h0.len()), h0.to_vec()).unwrap());
        let states = p.forward(&mut tape, &vars, &steps, h0);
        tape.value(*states.last().unwrap()).row(0).to_vec()
    }

    #[test]
    fn all_zero_gru_stays_zero() {
        let p = GruParams::<f64>::zeros(2, 3);
        let out = run_gru(&p, &vec![vec![0.0, 0.0]; 4], &[0.0, 0.0, 0.0]);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_equals_cell_application() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let p = GruParams::<f64>::init(2, 3, &mut rng);
        let x = vec![0.4, -0.7];
        let h0 = vec![0.1, -0.2, 0.3];
        let ours = run_gru(&p, std::slice::from_ref(&x), &h0);
        let expected = scalar_gru_step(&p, &x, &h0);
        for (a, b) in ours.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_step_matches_scalar_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let p = GruParams::<f64>::init(2, 2, &mut rng);
        let xs = vec![vec![0.5, -0.3], vec![0.2, 0.9], vec![-1.1, 0.4]];
        let h0 = vec![0.0, 0.0];
        let ours = run_gru(&p, &xs, &h0);
        let mut h = h0;
        for x in &xs {
            h = scalar_gru_step(&p, x, &h);
        }
        for (a, b) in ours.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_state_stays_in_unit_box() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..10 {
            let p = GruParams::<f64>::init(3, 4, &mut rng);
            let xs: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let h0: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.99..0.99)).collect();
            let out = run_gru(&p, &xs, &h0);
            assert!(out.iter().all(|&v| v.abs() < 1.0), "{out:?}");
        }
    }

    #[test]
    fn dense_identity_zero_and_random() {
        let mut tape = Tape::new();
        let layer = Dense {
            w: array![[1.0f64, 0.0], [0.0, 1.0]],
            b: array![[0.0f64, 0.0]],
        };
        let (vars, _) = layer.stage(&mut tape);
        let x = tape.leaf(array![[3.0, -2.0]]);
        let y = layer.forward(&mut tape, &vars, x);
        assert_eq!(tape.value(y), &array![[3.0, -2.0]]);

        let zero = Dense {
            w: array![[0.0f64, 0.0], [0.0, 0.0]],
            b: array![[5.0f64, -1.0]],
        };
        let (vars, _) = zero.stage(&mut tape);
        let x = tape.leaf(array![[3.0, -2.0]]);
        let y = zero.forward(&mut tape, &vars, x);
        assert_eq!(tape.value(y), &array![[5.0, -1.0]]);

        // 3x2 hand-computed case
        let layer = Dense {
            w: array![[1.0f64, 2.0], [3.0, 4.0], [5.0, 6.0]],
            b: array![[0.5f64, -0.5]],
        };
        let (vars, _) = layer.stage(&mut tape);
        let x = tape.leaf(array![[1.0, 0.0, -1.0]]);
        let y = layer.forward(&mut tape, &vars, x);
        assert_eq!(tape.value(y), &array![[1.0 - 5.0 + 0.5, 2.0 - 6.0 - 0.5]]);
    }

    #[test]
    fn batch_norm_train_centers_and_scales() {
        let mut bn = BatchNorm::<f64>::new(2);
        let mut tape = Tape::new();
        let (vars, _) = bn.stage(&mut tape);
        let x = tape.leaf(array![[1.0, 10.0], [3.0, 30.0], [5.0, 20.0], [7.0, 40.0]]);
        let y = bn.forward(&mut tape, &vars, x, Mode::Train);
        let v = tape.value(y);
        for c in 0..2 {
            let mean: f64 = v.column(c).sum() / 4.0;
            let var: f64 = v.column(c).iter().map(|&a| (a - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let mut bn = BatchNorm::<f64>::new(2);
        let mut tape = Tape::new();
        let (vars, _) = bn.stage(&mut tape);
        let input = array![[1.5, -2.0], [0.0, 4.0]];
        let x = tape.leaf(input.clone());
        let y = bn.forward(&mut tape, &vars, x, Mode::Eval);
        let v = tape.value(y);
        // identity up to the 1/sqrt(1 + eps) factor
        for (a, b) in v.iter().zip(input.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_running_stats_follow_ema() {
        let mut bn = BatchNorm::<f64>::new(1);
        let mut tape = Tape::new();
        let (vars, _) = bn.stage(&mut tape);
        let x1 = tape.leaf(array![[0.0], [2.0]]); // mean 1, biased var 1, unbiased 2
        bn.forward(&mut tape, &vars, x1, Mode::Train);
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);

        let x2 = tape.leaf(array![[4.0], [8.0]]); // mean 6, unbiased var 8
        bn.forward(&mut tape, &vars, x2, Mode::Train);
        assert!((bn.running_mean[0] - (0.9 * 0.1 + 0.1 * 6.0)).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 * 1.1 + 0.1 * 8.0)).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "at least 2 rows")]
    fn batch_norm_rejects_singleton_batch_in_train() {
        let mut bn = BatchNorm::<f64>::new(1);
        let mut tape = Tape::new();
        let (vars, _) = bn.stage(&mut tape);
        let x = tape.leaf(array![[1.0]]);
        bn.forward(&mut tape, &vars, x, Mode::Train);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let eval = dropout(&mut tape, x, 0.9, Mode::Eval, &mut rng);
        assert_eq!(eval, x);
        let zero_rate = dropout(&mut tape, x, 0.0, Mode::Train, &mut rng);
        assert_eq!(zero_rate, x);
    }

    #[test]
    fn dropout_rate_and_expectation() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let n = 100_000;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array2::ones((n, 1)));
        let y = dropout(&mut tape, x, 0.35, Mode::Train, &mut rng);
        let v = tape.value(y);
        let dropped = v.iter().filter(|&&a| a == 0.0).count() as f64 / n as f64;
        assert!((dropped - 0.35).abs() < 0.01, "drop fraction {dropped}");
        // inverted dropout preserves expectation
        let mean = v.sum() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
