use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Optimizer hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length; 0 disables warmup.
    pub warmup_steps: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-6,
            weight_decay: 1.2e-6,
            warmup_steps: 1000,
        }
    }
}

impl AdamW {
    /// Learning rate in effect at `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// First and second moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Real>(grads: &[(ParamId, Tensor<T>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update. Trainable parameters absent from
/// `grads` are treated as having zero gradient. Returns the learning rate
/// used.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], state: &mut AdamState<T>, opt: &AdamW) -> Result<f64> {
    for (id, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGrad(store.get(*id).name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let lr = opt.lr_at(state.step);
    let (b1, b2) = opt.betas;
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let mut by_id: Vec<Option<&Tensor<T>>> = vec![None; store.len()];
    for (id, g) in grads {
        by_id[id.index()] = Some(g);
    }
    let decay = T::lit(1.0 - lr * opt.weight_decay);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (c1, c2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    let (lr_t, eps) = (T::lit(lr), T::lit(opt.eps));
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = by_id[i].map(Tensor::data);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(T::zero(), |g| g[j]);
            m[j] = b1t * m[j] + c1 * gj;
            v[j] = b2t * v[j] + c2 * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(lr)
}
