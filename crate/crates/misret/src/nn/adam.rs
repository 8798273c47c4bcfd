//! Adaptive-moment optimizer with global gradient-norm clipping.

use ndarray::Array2;

use super::params::{Grads, ParamId, ParamStore};

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store
            .iter()
            .map(|(_, e)| Array2::zeros(e.value.dim()))
            .collect();
        let v = store
            .iter()
            .map(|(_, e)| Array2::zeros(e.value.dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// Clip gradients to `grad_clip` (global L2 norm over trainable
    /// parameters, 0 disables) and apply one update. Frozen parameters are
    /// never touched. Returns the pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &mut Grads, grad_clip: f64) -> f64 {
        let norm = grads.global_norm(store);
        if grad_clip > 0.0 && norm > grad_clip {
            grads.scale_in_place(grad_clip / norm);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..store.len() {
            let id = ParamId(i);
            if !store.entry(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let lr = self.lr;
            let eps = self.eps;
            let value = store.get_mut(id);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::from_elem((1, 1), 5.0), true);
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..2000 {
            let mut tape = Tape::new(&store);
            let x = tape.param(id);
            let loss = tape.mse_mean(x, vec![1.25], vec![1.0]);
            let mut grads = tape.backward(loss);
            opt.update(&mut store, &mut grads, 0.0);
        }
        assert!((store.get(id)[(0, 0)] - 1.25).abs() < 1e-4);
    }

    #[test]
    fn skips_frozen_params() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::from_elem((1, 1), 5.0), false);
        let mut opt = Adam::new(&store, 0.1);
        let mut tape = Tape::new(&store);
        let x = tape.param(id);
        let loss = tape.mse_mean(x, vec![0.0], vec![1.0]);
        let mut grads = tape.backward(loss);
        opt.update(&mut store, &mut grads, 1.0);
        assert_eq!(store.get(id)[(0, 0)], 5.0);
    }
}
