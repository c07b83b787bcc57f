use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer with one moment pair per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the stored gradients, then clears them.
    ///
    /// Every parameter must carry a gradient; a missing one means the
    /// parameter never took part in the loss.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let missing: Vec<&str> = store
            .iter()
            .filter(|p| p.grad.is_none())
            .map(|p| p.name.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Contract(format!(
                "adam step without gradient for {}",
                missing.join(", ")
            )));
        }
        if self.m.len() != store.len() {
            return Err(Error::Contract("optimizer built for a different store".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.take().expect("checked above");
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = scalar_store(1.25);
        let mut adam = Adam::new(&store, AdamConfig::default());
        store.iter_mut().for_each(|p| p.grad = Some(vec![0.0]));
        adam.step(&mut store).unwrap();
        assert_eq!(store.iter().next().unwrap().value.data(), &[1.25]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        store.iter_mut().for_each(|p| p.grad = Some(vec![1.0]));
        adam.step(&mut store).unwrap();
        // m_hat = v_hat = 1 after bias correction
        let p = store.iter().next().unwrap().value.data()[0];
        assert!((p + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        assert!(matches!(adam.step(&mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(p) = sum (p - c)^2, minimum at c
        let target = [3.0, -1.5, 0.25];
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.0; 3]));
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
        );
        let mut steps = 0;
        for _ in 0..5000 {
            let mut g = Graph::new(&store);
            let p = g.param(id);
            let c = g.constant(Tensor::vector(target.to_vec()));
            let d = g.sub(p, c).unwrap();
            let sq = g.square(d);
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();
            store.accumulate(&grads);
            adam.step(&mut store).unwrap();
            steps += 1;
            let done = store
                .value(id)
                .data()
                .iter()
                .zip(target)
                .all(|(a, b)| (a - b).abs() < 1e-3);
            if done {
                break;
            }
        }
        assert!(steps < 5000);
        for (a, b) in store.value(id).data().iter().zip(target) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::vector(vec![0.0, 0.0]));
        store.add("b", Tensor::scalar(0.0));
        let grads = [vec![3.0, 0.0], vec![4.0]];
        for (p, g) in store.iter_mut().zip(grads) {
            p.grad = Some(g);
        }
        let before = clip_grad_norm(&mut store, 0.5);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((store.grad_norm() - 0.5).abs() < 1e-12);
    }
}
