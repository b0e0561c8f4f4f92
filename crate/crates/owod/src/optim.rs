//! Adam with decoupled weight decay, aligned with parameter storage order.

use owod_grad::Tensor;

use crate::model::Params;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64, weight_decay: f64) -> Self {
        let m = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m,
            v,
        }
    }

    /// One update. `grads` is aligned with `params.iter()` order; `None`
    /// entries (parameters untouched by the loss) are skipped.
    pub fn step(&mut self, params: &mut Params, grads: &[Option<Tensor>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (_, value)) in params.iter_mut().enumerate() {
            let Some(grad) = &grads[k] else { continue };
            if self.weight_decay > 0.0 {
                *value -= &(value.clone() * (self.lr * self.weight_decay));
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            *m *= self.beta1;
            *m += &(grad * (1.0 - self.beta1));
            *v *= self.beta2;
            *v += &(grad.mapv(|g| g * g) * (1.0 - self.beta2));
            let update = ndarray::Zip::from(&*m)
                .and(&*v)
                .map_collect(|&mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    self.lr * mhat / (vhat.sqrt() + self.eps)
                });
            *value -= &update;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DetectorConfig;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn descends_a_quadratic() {
        // minimize f(p) = sum(p^2) starting from the initialized params
        let config = DetectorConfig {
            num_queries: 2,
            embed_dim: 8,
            num_decoder_layers: 1,
            objectness_layer_index: 1,
            num_known_classes: 2,
            ffn_dim: 8,
            image_size: 8,
            backbone_channels: [2, 2],
        };
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut params = Params::init(&config, &mut rng);
        let mut adam = Adam::new(&params, 0.05, 0.0);
        let objective = |p: &Params| -> f64 {
            p.iter().map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>()).sum()
        };
        let before = objective(&params);
        for _ in 0..100 {
            let grads: Vec<Option<Tensor>> = params
                .iter()
                .map(|(_, t)| Some(t.mapv(|x| 2.0 * x)))
                .collect();
            adam.step(&mut params, &grads);
        }
        let after = objective(&params);
        assert!(after < before * 0.05, "before {before}, after {after}");
    }

    #[test]
    fn decoupled_decay_shrinks_params_under_zero_grad() {
        let config = DetectorConfig {
            num_queries: 2,
            embed_dim: 8,
            num_decoder_layers: 1,
            objectness_layer_index: 1,
            num_known_classes: 2,
            ffn_dim: 8,
            image_size: 8,
            backbone_channels: [2, 2],
        };
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut params = Params::init(&config, &mut rng);
        let name = "query_pos";
        let original = params.get(name).clone();
        let mut adam = Adam::new(&params, 0.01, 0.1);
        let grads: Vec<Option<Tensor>> = params
            .iter()
            .map(|(_, t)| Some(Tensor::zeros(IxDyn(t.shape()))))
            .collect();
        adam.step(&mut params, &grads);
        let updated = params.get(name);
        for (u, o) in updated.iter().zip(original.iter()) {
            assert!((u - o * (1.0 - 0.01 * 0.1)).abs() < 1e-12);
        }
    }
}
