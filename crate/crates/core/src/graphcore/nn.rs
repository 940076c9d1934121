//! Parameterized layers built from graph ops.

use std::collections::HashMap;

use rand::Rng;

use crate::graphcore::conv::{BatchMoments, Conv2dConfig};
use crate::graphcore::graph::{Graph, Var};
use crate::graphcore::params::{ParamId, ParameterStore};
use crate::graphcore::tensor::Tensor;
use crate::graphcore::GraphError;
use crate::scalar::Scalar;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Kaiming-uniform draw: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| S::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Per-graph cache of parameter leaves, so a parameter used by several
/// branches is copied onto the tape once and its gradients sum on one node.
pub struct Bindings<'s, S: Scalar> {
    store: &'s ParameterStore<S>,
    vars: HashMap<ParamId, Var>,
}

impl<'s, S: Scalar> Bindings<'s, S> {
    pub fn new(store: &'s ParameterStore<S>) -> Self {
        Bindings {
            store,
            vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParameterStore<S> {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph<S>, id: ParamId) -> Var {
        *self.vars.entry(id).or_insert_with(|| g.param(self.store, id))
    }

    /// Uses `var` in place of the stored value of `id` in this graph.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.vars.insert(id, var);
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self, GraphError> {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[in_dim, out_dim], in_dim, rng),
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true)?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &mut Bindings<'_, S>,
        x: Var,
    ) -> Result<Var, GraphError> {
        let (w, b) = (p.get(g, self.weight), p.get(g, self.bias));
        g.linear(x, w, b)
    }
}

/// `h = linear_a(x) * sigmoid(linear_b(x))`.
#[derive(Clone, Debug)]
pub struct GatedDense {
    pub value: Linear,
    pub gate: Linear,
}

impl GatedDense {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self, GraphError> {
        Ok(GatedDense {
            value: Linear::new(store, &format!("{name}.value"), in_dim, out_dim, rng)?,
            gate: Linear::new(store, &format!("{name}.gate"), in_dim, out_dim, rng)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &mut Bindings<'_, S>,
        x: Var,
    ) -> Result<Var, GraphError> {
        let h = self.value.forward(g, p, x)?;
        let gate = self.gate.forward(g, p, x)?;
        let gate = g.sigmoid(gate)?;
        g.mul(h, gate)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub config: Conv2dConfig,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        config: Conv2dConfig,
        rng: &mut R,
    ) -> Result<Self, GraphError> {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[cout, cin, kernel, kernel], fan_in, rng),
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true)?;
        Ok(Conv2dLayer {
            weight,
            bias,
            config,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &mut Bindings<'_, S>,
        x: Var,
    ) -> Result<Var, GraphError> {
        let (w, b) = (p.get(g, self.weight), p.get(g, self.bias));
        g.conv2d(x, w, Some(b), self.config)
    }
}

/// Which statistics a batch-norm layer normalizes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running estimates are updated afterwards.
    Train,
    /// Batch statistics; running estimates are left untouched.
    BatchOnly,
    /// Running estimates.
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Pending fold of one batch's moments into a layer's running estimates.
#[derive(Clone, Debug)]
pub struct RunningStatsUpdate<S> {
    running_mean: ParamId,
    running_var: ParamId,
    moments: BatchMoments<S>,
}

impl<S: Scalar> RunningStatsUpdate<S> {
    /// `running = (1 - momentum) * running + momentum * batch`, using the unbiased batch variance.
    pub fn apply(&self, store: &mut ParameterStore<S>, momentum: f64) -> Result<(), GraphError> {
        let m = S::lit(momentum);
        let keep = S::one() - m;
        let n = self.moments.count as f64;
        let unbias = S::lit(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        let mut mean = store.value(self.running_mean).clone();
        for (r, &b) in mean.data_mut().iter_mut().zip(&self.moments.mean) {
            *r = keep * *r + m * b;
        }
        let mut var = store.value(self.running_var).clone();
        for (r, &b) in var.data_mut().iter_mut().zip(&self.moments.var) {
            *r = keep * *r + m * b * unbias;
        }
        store.set_value(self.running_mean, mean)?;
        store.set_value(self.running_var, var)
    }
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(
        store: &mut ParameterStore<S>,
        name: &str,
        channels: usize,
    ) -> Result<Self, GraphError> {
        Ok(BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], S::one()), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], S::one()),
                false,
            )?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &mut Bindings<'_, S>,
        x: Var,
        mode: NormMode,
    ) -> Result<(Var, Option<RunningStatsUpdate<S>>), GraphError> {
        let (gamma, beta) = (p.get(g, self.gamma), p.get(g, self.beta));
        match mode {
            NormMode::Eval => {
                let store = p.store();
                let y = g.batchnorm2d_eval(
                    x,
                    gamma,
                    beta,
                    store.value(self.running_mean),
                    store.value(self.running_var),
                    BN_EPS,
                )?;
                Ok((y, None))
            }
            NormMode::Train | NormMode::BatchOnly => {
                let (y, moments) = g.batchnorm2d_train(x, gamma, beta, BN_EPS)?;
                let update = (mode == NormMode::Train).then(|| RunningStatsUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    moments,
                });
                Ok((y, update))
            }
        }
    }
}
