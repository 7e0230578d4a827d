//! Adam with bias correction and optional global-norm gradient clipping
//! (off by default).

use crate::nn::Params;
use crate::tensor::Element;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

pub struct Adam<E: Element> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    t: u64,
}

impl<E: Element> Adam<E> {
    pub fn new(params: &Params<E>) -> Self {
        Adam {
            m: params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters; gradients are read via
    /// `grad_or_zeros` so unreached leaves stay put.
    pub fn step(&mut self, params: &Params<E>, lr: f64, grad_clip: f64) {
        self.t += 1;
        let b1 = E::from_f64(BETA1);
        let b2 = E::from_f64(BETA2);
        let one = E::one();
        let eps = E::from_f64(EPS);
        let c1 = E::from_f64(1.0 - BETA1.powi(self.t as i32));
        let c2 = E::from_f64(1.0 - BETA2.powi(self.t as i32));
        let lr = E::from_f64(lr);

        let mut grads: Vec<Vec<E>> = params.iter().map(|(_, p)| p.grad_or_zeros()).collect();
        if grad_clip > 0.0 {
            let norm_sq: f64 = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|v| v.as_f64() * v.as_f64())
                .sum();
            let norm = norm_sq.sqrt();
            if norm > grad_clip {
                let scale = E::from_f64(grad_clip / norm);
                for g in grads.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }

        for (i, (_, p)) in params.iter().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = p.to_vec();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
            }
            p.set_data(&data).expect("parameter shape is stable");
        }
    }

    /// Moment buffers for checkpointing, ordered like the registry.
    pub fn moments(&self) -> (&[Vec<E>], &[Vec<E>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<Vec<E>>, v: Vec<Vec<E>>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, Tensor};

    #[test]
    fn adam_descends_a_quadratic() {
        let x = Tensor::<f64>::var(vec![3.0, -2.0], [2]).unwrap();
        let mut params = Params::new();
        params.push("x", &x);
        let mut opt = Adam::new(&params);
        for _ in 0..400 {
            let loss = x.mul(&x).unwrap().sum_all();
            backward(&loss).unwrap();
            opt.step(&params, 0.05, 0.0);
            params.zero_grads();
        }
        for v in x.to_vec() {
            assert!(v.abs() < 1e-2, "did not converge: {v}");
        }
    }

    #[test]
    fn clipping_bounds_the_update() {
        let x = Tensor::<f64>::var(vec![0.0], [1]).unwrap();
        let mut params = Params::new();
        params.push("x", &x);
        let mut opt = Adam::new(&params);
        x.accumulate_grad(&[1000.0]);
        opt.step(&params, 0.1, 1.0); // norm clipped from 1000 to 1
        // first Adam step magnitude is lr regardless, but moments saw the
        // clipped gradient
        let (m, _) = opt.moments();
        assert!((m[0][0] - 0.1).abs() < 1e-12, "m = {}", m[0][0]);
    }
}
