use alloc::vec::Vec;

use crate::float::Float;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(params: &ParamStore<F>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Apply one update. Parameters whose gradient is `None` are left alone
    /// and keep their moments.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &[Option<Tensor<F>>]) {
        debug_assert_eq!(grads.len(), params.len());
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let step_size = F::of(self.lr / bc1);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one, eps) = (F::one(), F::of(self.eps));
        let sbc2 = F::of(libm::sqrt(bc2));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(crate::params::ParamId::from_index(i)).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / sbc2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        store.push("p", Tensor::new(&[2], alloc::vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store, 0.01);
        let g = Tensor::new(&[2], alloc::vec![3.0, -0.5]).unwrap();
        adam.update(&mut store, &[Some(g)]);
        let d = store.tensors()[0].data();
        assert!((d[0] - 0.99).abs() < 1e-9);
        assert!((d[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.push("p", Tensor::full(&[3], 5.0));
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let g = store.tensors()[0].map(|x| 2.0 * x);
            adam.update(&mut store, &[Some(g)]);
        }
        assert!(store.tensors()[0].data().iter().all(|x| x.abs() < 1e-2));
    }
}
