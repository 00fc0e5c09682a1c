use crate::{ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the store's order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<S>>,
    pub second: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update. Parameters with a `None` gradient are left unchanged
    /// and their moments are not advanced.
    pub fn update(&mut self, params: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = S::of(c.lr / bias1);
        let bias2_sqrt = S::of(bias2.sqrt());
        let eps = S::of(c.eps);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = params.get_mut(id).data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / (v.sqrt() / bias2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let x = store.get(id).data().to_vec();
            let g = Tensor::new(&[2], vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)]);
            adam.update(&mut store, &[Some(g)]);
        }
        let x = store.get(id).data();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3, "{x:?}");
        assert_eq!(adam.step, 2000);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::new(&[1], vec![0.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.update(&mut store, &[Some(Tensor::new(&[1], vec![5.0]))]);
        let x = store.get(crate::ParamId(0)).data()[0];
        assert!((x + 1e-3).abs() < 1e-9, "{x}");
    }
}
