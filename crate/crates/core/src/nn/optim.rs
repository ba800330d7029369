use ndarray::ArrayD;

use super::params::{Gradients, ParamId, ParamStore, Tensor};

/// SGD with classical momentum over a fixed parameter subset. Owning the
/// subset enforces the update partition: a step can only ever touch the
/// parameters the optimizer was built for.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    /// Global-norm clip over this optimizer's gradients; <= 0 disables.
    clip_norm: f64,
    params: Vec<ParamId>,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, lr: f64, momentum: f64) -> Self {
        let velocity = params
            .iter()
            .map(|id| ArrayD::zeros(store.value(*id).raw_dim()))
            .collect();
        Self {
            lr,
            momentum,
            clip_norm: 0.0,
            params,
            velocity,
        }
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let mut scale = 1.0;
        if self.clip_norm > 0.0 {
            let mut sq = 0.0;
            for id in &self.params {
                if let Some(g) = grads.get(*id) {
                    sq += g.iter().map(|v| v * v).sum::<f64>();
                }
            }
            let norm = sq.sqrt();
            if norm > self.clip_norm {
                scale = self.clip_norm / norm;
            }
        }
        for (id, vel) in self.params.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(*id) else { continue };
            vel.zip_mut_with(g, |v, &gi| *v = self.momentum * *v + scale * gi);
            store
                .value_mut(*id)
                .zip_mut_with(vel, |p, &v| *p -= self.lr * v);
        }
    }
}

/// Adam over a fixed parameter subset.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    params: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, lr: f64) -> Self {
        let m = params
            .iter()
            .map(|id| ArrayD::zeros(store.value(*id).raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|id| ArrayD::zeros(store.value(*id).raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            params,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((id, m), v) in self
            .params
            .iter()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let Some(g) = grads.get(*id) else { continue };
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let param = store.value_mut(*id);
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / bias1;
                    let vhat = vi / bias2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
