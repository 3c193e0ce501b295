//! AdamW: Adam with weight decay decoupled from the moment estimates.

use ndarray::Array2;

use super::{real, Real};

#[derive(Debug, Clone)]
pub struct AdamWConfig<T: Real> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Real> AdamWConfig<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr: real(lr),
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-8),
            weight_decay: real(weight_decay),
        }
    }
}

/// Optimizer state: first/second moment accumulators and the step count.
#[derive(Debug)]
pub struct AdamW<T: Real> {
    pub cfg: AdamWConfig<T>,
    step: u64,
    moments: Option<Vec<(Array2<T>, Array2<T>)>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig<T>) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: None,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: decay weights directly, then apply the bias-corrected
    /// moment update.
    pub fn step(&mut self, params: &mut [&mut Array2<T>], grads: &[Array2<T>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        let moments = self.moments.get_or_insert_with(|| {
            params
                .iter()
                .map(|p| (Array2::zeros(p.raw_dim()), Array2::zeros(p.raw_dim())))
                .collect()
        });
        assert_eq!(moments.len(), params.len());
        self.step += 1;
        let t = self.step;
        let c = &self.cfg;
        let bc1 = T::one() - c.beta1.powi(t as i32);
        let bc2 = T::one() - c.beta2.powi(t as i32);
        let decay = T::one() - c.lr * c.weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads.iter()).zip(moments.iter_mut()) {
            assert_eq!(p.raw_dim(), g.raw_dim(), "gradient shape mismatch");
            p.mapv_inplace(|w| w * decay);
            m.zip_mut_with(g, |mi, &gi| *mi = c.beta1 * *mi + (T::one() - c.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = c.beta2 * *vi + (T::one() - c.beta2) * gi * gi);
            ndarray::Zip::from(&mut **p)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &mi, &vi| {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    *w = *w - c.lr * m_hat / (v_hat.sqrt() + c.eps);
                });
        }
    }
}
