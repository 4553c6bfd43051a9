//! First-order optimizers operating on a [`ParamStore`]. Gradients are passed
//! positionally; `None` leaves the parameter and its state untouched.

use crate::param::ParamStore;
use crate::tensor::Tensor;

pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f32);
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: Vec<u32>,
}

impl Moments {
    fn ensure(&mut self, params: &ParamStore) {
        while self.m.len() < params.len() {
            let n = params.at(self.m.len()).len();
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
            self.t.push(0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    hp: AdamParams,
    state: Moments,
}

impl Adam {
    pub fn new(hp: AdamParams) -> Self {
        Self {
            hp,
            state: Moments {
                m: vec![],
                v: vec![],
                t: vec![],
            },
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f32) {
        self.state.ensure(params);
        let hp = self.hp;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let t = {
                self.state.t[i] += 1;
                self.state.t[i] as i32
            };
            let bc1 = 1.0 - hp.beta1.powi(t);
            let bc2 = 1.0 - hp.beta2.powi(t);
            let step = lr * bc2.sqrt() / bc1;
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            let p = params.at_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
                v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
                p[j] -= lr * hp.weight_decay * p[j];
                p[j] -= step * m[j] / (v[j].sqrt() + hp.eps);
            }
        }
    }
}

/// Rectified Adam: falls back to bias-corrected momentum SGD while the
/// variance estimate is unreliable (approximated SMA length ≤ 5).
#[derive(Clone, Debug)]
pub struct RAdam {
    hp: AdamParams,
    state: Moments,
}

impl RAdam {
    pub const SMA_THRESHOLD: f32 = 5.0;

    pub fn new(hp: AdamParams) -> Self {
        Self {
            hp,
            state: Moments {
                m: vec![],
                v: vec![],
                t: vec![],
            },
        }
    }

    /// Rectification factor for step `t`, or `None` when the un-adapted
    /// update is used.
    pub fn rectification(beta2: f32, t: i32) -> Option<f32> {
        let b2t = beta2.powi(t);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t as f32 * b2t / (1.0 - b2t);
        (rho_t > Self::SMA_THRESHOLD)
            .then(|| (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
    }
}

impl Optimizer for RAdam {
    fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f32) {
        self.state.ensure(params);
        let hp = self.hp;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.state.t[i] += 1;
            let t = self.state.t[i] as i32;
            let bc1 = 1.0 - hp.beta1.powi(t);
            let bc2 = 1.0 - hp.beta2.powi(t);
            let rect = Self::rectification(hp.beta2, t);
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            let p = params.at_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
                v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
                p[j] -= lr * hp.weight_decay * p[j];
                match rect {
                    Some(r) => p[j] -= lr * r * bc2.sqrt() / bc1 * m[j] / (v[j].sqrt() + hp.eps),
                    None => p[j] -= lr / bc1 * m[j],
                }
            }
        }
    }
}

/// Lookahead wrapper: every `sync_period` inner steps the slow weights move
/// `slow_step` of the way toward the fast weights, and the fast weights are
/// reset onto them.
#[derive(Clone, Debug)]
pub struct Lookahead<O> {
    inner: O,
    sync_period: u32,
    slow_step: f32,
    slow: Option<Vec<Tensor>>,
    counter: u32,
}

impl<O: Optimizer> Lookahead<O> {
    pub fn new(inner: O, sync_period: u32, slow_step: f32) -> Self {
        Self {
            inner,
            sync_period,
            slow_step,
            slow: None,
            counter: 0,
        }
    }
}

impl<O: Optimizer> Optimizer for Lookahead<O> {
    fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f32) {
        if self.slow.is_none() {
            self.slow = Some(params.iter().map(|(_, t)| t.clone()).collect());
        }
        self.inner.step(params, grads, lr);
        self.counter += 1;
        if !self.counter.is_multiple_of(self.sync_period) {
            return;
        }
        let slow = self.slow.as_mut().expect("initialized above");
        for (i, s) in slow.iter_mut().enumerate() {
            let fast = params.at_mut(i);
            for (sv, fv) in s.data_mut().iter_mut().zip(fast.data_mut()) {
                *sv += self.slow_step * (*fv - *sv);
                *fv = *sv;
            }
        }
    }
}
