use crate::encoder::ParamStore;
use crate::error::Result;

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates `params` in place: `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`.
    /// `grads[i]` belongs to the i-th tensor of `params`.
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] = p[i] * decay - lr * update;
            }
        }
    }

    /// One step over every tensor in `store`, using `grads` in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let mut values: Vec<Vec<f64>> = store.iter().map(|(_, t)| t.data().to_vec()).collect();
        {
            let mut views: Vec<&mut [f64]> = values.iter_mut().map(Vec::as_mut_slice).collect();
            let gviews: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            self.step_slices(&mut views, &gviews, lr);
        }
        for (t, v) in store.tensors_mut().iter_mut().zip(&values) {
            t.assign(v)?;
        }
        Ok(())
    }
}

/// Learning rate for update `step` (1-based) of `total`: `lr_init·(1 − step/total)`.
pub fn linear_lr(lr_init: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_init;
    }
    lr_init * (1.0 - step as f64 / total as f64)
}
