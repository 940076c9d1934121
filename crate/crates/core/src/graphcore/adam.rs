use crate::graphcore::params::ParameterStore;
use crate::graphcore::tensor::Tensor;
use crate::graphcore::GraphError;
use crate::scalar::Scalar;

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for every entry of a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParameterStore<S>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable parameter, then zeroes the gradients.
    ///
    /// Update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, store: &mut ParameterStore<S>) -> Result<(), GraphError> {
        if !store.has_gradients() {
            return Err(GraphError::NoGradients);
        }
        if self.first.len() != store.len() {
            return Err(GraphError::Shape {
                op: "adam_step",
                detail: format!(
                    "optimizer tracks {} tensors, store has {}",
                    self.first.len(),
                    store.len()
                ),
            });
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = S::lit(1.0 - beta1.powi(t));
        let bc2 = S::lit(1.0 - beta2.powi(t));
        let (b1, b2) = (S::lit(beta1), S::lit(beta2));
        let (lr, eps) = (S::lit(lr), S::lit(eps));
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let (value, grad) = store.value_and_grad_mut(id);
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            for (((p, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (S::one() - b1) * g;
                *vi = b2 * *vi + (S::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
