use crate::tensor::params::{GradMap, ParamSet};

/// Adam with bias correction. Moment buffers are stored per parameter in
/// f32; the per-element update runs in f64 before casting back.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        let v = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = &mut params.get_mut(id).data;
            debug_assert_eq!(g.len(), p.len());
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p[i] = (p[i] as f64 - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
    }
}
