//! The network: augmented encoder, three posterior extractors, canonical
//! decoder and the spatial-transformer reconstructor.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Error;
use crate::graphcore::nn::{
    BatchNorm2d, Bindings, Conv2dLayer, GatedDense, Linear, NormMode, RunningStatsUpdate,
};
use crate::graphcore::{Conv2dConfig, Graph, GraphError, ParameterStore, Tensor, Var};
use crate::lie::{GroupKind, TransformSupport};
use crate::scalar::Scalar;

pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusteringMode {
    /// Equal-weight mixture prior with one-hot component means.
    Gmm,
    /// Standard normal prior; `z_c` is an ordinary Gaussian latent.
    Single,
}

impl std::str::FromStr for ClusteringMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gmm" => Ok(ClusteringMode::Gmm),
            "single" => Ok(ClusteringMode::Single),
            other => Err(format!("unknown clustering mode '{other}' (expected gmm or single)")),
        }
    }
}

impl std::fmt::Display for ClusteringMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClusteringMode::Gmm => "gmm",
            ClusteringMode::Single => "single",
        })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: GroupKind,
    /// Input images are square, `image_size` pixels on a side, one channel.
    pub image_size: usize,
    pub n_zc: usize,
    pub n_z: usize,
    pub encoder_channels: Vec<usize>,
    pub cluster_hidden: usize,
    pub latent_hidden: usize,
    pub transform_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_depth: usize,
    pub beta: f64,
    pub alpha: f64,
    pub clustering: ClusteringMode,
    pub equivariance: bool,
    /// Scale applied to the transformation latent before warping.
    pub support: TransformSupport,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: GroupKind::Se2,
            image_size: 28,
            n_zc: 10,
            n_z: 3,
            encoder_channels: vec![32, 64, 128, 256],
            cluster_hidden: 512,
            latent_hidden: 512,
            transform_hidden: 32,
            decoder_hidden: 300,
            decoder_depth: 2,
            beta: 1.0,
            alpha: 1.0,
            clustering: ClusteringMode::Gmm,
            equivariance: true,
            support: TransformSupport::default(),
        }
    }
}

/// Side length after one 3x3, stride-2, padding-1 convolution.
fn conv_out(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl ModelConfig {
    pub fn tau_dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    /// Length of the flattened encoder output.
    pub fn z_aug_dim(&self) -> usize {
        let side = self.encoder_channels.iter().fold(self.image_size, |n, _| conv_out(n));
        self.encoder_channels.last().copied().unwrap_or(1) * side * side
    }

    pub fn validate(&self) -> Result<(), Error> {
        let dims = [
            ("image_size", self.image_size),
            ("n_zc", self.n_zc),
            ("n_z", self.n_z),
            ("cluster_hidden", self.cluster_hidden),
            ("latent_hidden", self.latent_hidden),
            ("transform_hidden", self.transform_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("decoder_depth", self.decoder_depth),
            ("encoder depth", self.encoder_channels.len()),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder channel widths must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        self.support.validate().map_err(Error::Config)
    }
}

/// Two sigmoid hidden layers and a linear head emitting `(mu, log sigma)`.
#[derive(Clone, Debug)]
pub struct Extractor {
    hidden: [Linear; 2],
    head: Linear,
    out_dim: usize,
}

impl Extractor {
    fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self, GraphError> {
        Ok(Extractor {
            hidden: [
                Linear::new(store, &format!("{name}.fc0"), in_dim, hidden, rng)?,
                Linear::new(store, &format!("{name}.fc1"), hidden, hidden, rng)?,
            ],
            head: Linear::new(store, &format!("{name}.head"), hidden, 2 * out_dim, rng)?,
            out_dim,
        })
    }

    fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &mut Bindings<'_, S>,
        x: Var,
    ) -> Result<(Var, Var), GraphError> {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(g, p, h)?;
            h = g.sigmoid(h)?;
        }
        let out = self.head.forward(g, p, h)?;
        let mu = g.slice(out, 1, 0, self.out_dim)?;
        let log_sigma = g.slice(out, 1, self.out_dim, 2 * self.out_dim)?;
        let log_sigma = g.clamp(log_sigma, S::lit(LOG_SIGMA_MIN), S::lit(LOG_SIGMA_MAX))?;
        Ok((mu, log_sigma))
    }
}

/// Standard-normal draws for one batch, one per latent coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise<S> {
    pub zc: Tensor<S>,
    pub z: Tensor<S>,
    /// Absent when the equivariance extractor is disabled.
    pub tau: Option<Tensor<S>>,
}

impl<S: Scalar> Noise<S> {
    /// All-zero noise: samples equal the posterior means.
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        Noise {
            zc: Tensor::zeros(&[batch, config.n_zc]),
            z: Tensor::zeros(&[batch, config.n_z]),
            tau: config.equivariance.then(|| Tensor::zeros(&[batch, config.tau_dim()])),
        }
    }

    pub fn sample<R: Rng + ?Sized>(config: &ModelConfig, batch: usize, rng: &mut R) -> Self {
        let mut draw = |cols: usize| {
            let data = (0..batch * cols)
                .map(|_| S::lit(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            Tensor::from_parts(vec![batch, cols], data)
        };
        let zc = draw(config.n_zc);
        let z = draw(config.n_z);
        let tau = config.equivariance.then(|| draw(config.tau_dim()));
        Noise { zc, z, tau }
    }
}

/// One batch's latent samples and the posterior parameters that produced them.
#[derive(Clone, Debug)]
pub struct LatentBundle<S> {
    pub z_c: Var,
    pub z: Var,
    /// Transformation latent sample, `(B, tau_dim)`; `None` when equivariance is off.
    pub tau: Option<Var>,
    /// `tau` scaled into algebra coefficients `(omega, u, v)`.
    pub tau_coefficients: Option<Var>,
    pub mu_c: Var,
    pub log_sigma_c: Var,
    pub mu_z: Var,
    pub log_sigma_z: Var,
    pub mu_tau: Option<Var>,
    pub log_sigma_tau: Option<Var>,
    pub noise: Noise<S>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<S> {
    /// Canonical reconstruction, `(B, 1, H, W)`.
    pub x_tilde: Var,
    /// Equivariant reconstruction, `(B, 1, H, W)`.
    pub x_hat: Var,
    pub latents: LatentBundle<S>,
    /// Batch-norm running-statistic updates to apply after a training step.
    pub bn_updates: Vec<RunningStatsUpdate<S>>,
}

#[derive(Clone, Debug)]
pub struct Mcevae<S: Scalar> {
    config: ModelConfig,
    store: ParameterStore<S>,
    encoder: Vec<(Conv2dLayer, BatchNorm2d)>,
    cluster: Extractor,
    latent: Extractor,
    transform: Option<Extractor>,
    decoder: Vec<GatedDense>,
    decoder_out: Linear,
}

impl<S: Scalar> Mcevae<S> {
    /// Builds the network with Kaiming-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, Error> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut encoder = Vec::new();
        let mut cin = 1;
        for (i, &cout) in config.encoder_channels.iter().enumerate() {
            let conv = Conv2dLayer::new(
                &mut store,
                &format!("encoder.conv{i}"),
                cin,
                cout,
                3,
                Conv2dConfig::default(),
                rng,
            )?;
            let bn = BatchNorm2d::new(&mut store, &format!("encoder.bn{i}"), cout)?;
            encoder.push((conv, bn));
            cin = cout;
        }
        let z_aug = config.z_aug_dim();
        let cluster = Extractor::new(&mut store, "cluster", z_aug, config.cluster_hidden, config.n_zc, rng)?;
        let latent = Extractor::new(&mut store, "latent", z_aug, config.latent_hidden, config.n_z, rng)?;
        let transform = if config.equivariance {
            Some(Extractor::new(
                &mut store,
                "transform",
                z_aug,
                config.transform_hidden,
                config.tau_dim(),
                rng,
            )?)
        } else {
            None
        };
        let mut decoder = Vec::new();
        let mut width = config.n_zc + config.n_z;
        for i in 0..config.decoder_depth {
            decoder.push(GatedDense::new(
                &mut store,
                &format!("decoder.gated{i}"),
                width,
                config.decoder_hidden,
                rng,
            )?);
            width = config.decoder_hidden;
        }
        let decoder_out = Linear::new(&mut store, "decoder.out", width, config.pixels(), rng)?;
        Ok(Mcevae {
            config,
            store,
            encoder,
            cluster,
            latent,
            transform,
            decoder,
            decoder_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<S> {
        &mut self.store
    }

    pub fn bindings(&self) -> Bindings<'_, S> {
        Bindings::new(&self.store)
    }

    /// Four conv/batch-norm/ReLU blocks, flattened to `(B, z_aug_dim)`.
    pub fn augmented_encode(
        &self,
        g: &mut Graph<S>,
        p: &mut Bindings<'_, S>,
        x: Var,
        mode: NormMode,
        updates: &mut Vec<RunningStatsUpdate<S>>,
    ) -> Result<Var, GraphError> {
        let n = self.config.image_size;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != [1, n, n] {
            return Err(GraphError::Shape {
                op: "augmented_encode",
                detail: format!("expected (batch, 1, {n}, {n}), got {shape:?}"),
            });
        }
        let mut h = x;
        for (conv, bn) in &self.encoder {
            h = conv.forward(g, p, h)?;
            let (y, update) = bn.forward(g, p, h, mode)?;
            updates.extend(update);
            h = g.relu(y)?;
        }
        g.reshape(h, &[shape[0], self.config.z_aug_dim()])
    }

    /// Posterior parameters `(mu, log sigma)` for `z_c`, `z` and, when enabled, `tau`.
    #[allow(clippy::type_complexity)]
    pub fn extract(
        &self,
        g: &mut Graph<S>,
        p: &mut Bindings<'_, S>,
        z_aug: Var,
    ) -> Result<((Var, Var), (Var, Var), Option<(Var, Var)>), GraphError> {
        let c = self.cluster.forward(g, p, z_aug)?;
        let z = self.latent.forward(g, p, z_aug)?;
        let t = match &self.transform {
            Some(head) => Some(head.forward(g, p, z_aug)?),
            None => None,
        };
        Ok((c, z, t))
    }

    /// `x_tilde = sigmoid(linear(gated(gated([z_c, z]))))`, reshaped to images.
    pub fn decode_canonical(
        &self,
        g: &mut Graph<S>,
        p: &mut Bindings<'_, S>,
        z_c: Var,
        z: Var,
    ) -> Result<Var, GraphError> {
        let batch = g.shape(z_c)[0];
        let mut h = g.concat(&[z_c, z], 1)?;
        for layer in &self.decoder {
            h = layer.forward(g, p, h)?;
        }
        let logits = self.decoder_out.forward(g, p, h)?;
        let out = g.sigmoid(logits)?;
        let n = self.config.image_size;
        g.reshape(out, &[batch, 1, n, n])
    }

    /// Full pipeline on `x: (B, 1, H, W)` with the given noise.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        p: &mut Bindings<'_, S>,
        x: Var,
        mode: NormMode,
        noise: &Noise<S>,
    ) -> Result<ForwardOutput<S>, GraphError> {
        let mut bn_updates = Vec::new();
        let z_aug = self.augmented_encode(g, p, x, mode, &mut bn_updates)?;
        let ((mu_c, log_sigma_c), (mu_z, log_sigma_z), tau_params) = self.extract(g, p, z_aug)?;
        let z_c = reparameterize(g, mu_c, log_sigma_c, &noise.zc)?;
        let z = reparameterize(g, mu_z, log_sigma_z, &noise.z)?;
        let x_tilde = self.decode_canonical(g, p, z_c, z)?;

        let (tau, tau_coefficients, x_hat) = match (tau_params, &noise.tau) {
            (Some((mu, log_sigma)), Some(eps)) => {
                let tau = reparameterize(g, mu, log_sigma, eps)?;
                let coeffs = self.scale_tau(g, tau)?;
                let x_hat = g.transform_image(x_tilde, coeffs, self.config.kind)?;
                (Some(tau), Some(coeffs), x_hat)
            }
            (None, _) => (None, None, x_tilde),
            (Some(_), None) => {
                return Err(GraphError::Shape {
                    op: "forward",
                    detail: "transformation noise missing while equivariance is on".into(),
                })
            }
        };
        let (mu_tau, log_sigma_tau) = tau_params.unzip();
        Ok(ForwardOutput {
            x_tilde,
            x_hat,
            latents: LatentBundle {
                z_c,
                z,
                tau,
                tau_coefficients,
                mu_c,
                log_sigma_c,
                mu_z,
                log_sigma_z,
                mu_tau,
                log_sigma_tau,
                noise: noise.clone(),
            },
            bn_updates,
        })
    }

    /// Multiplies the latent columns by `(omega_max, t_max, t_max)`.
    fn scale_tau(&self, g: &mut Graph<S>, tau: Var) -> Result<Var, GraphError> {
        let s = self.config.support;
        let scales = [s.omega_max, s.t_max, s.t_max];
        let dim = self.config.tau_dim();
        let k = g.constant(Tensor::from_parts(
            vec![dim],
            scales[..dim].iter().map(|&v| S::lit(v)).collect(),
        ));
        g.mul(tau, k)
    }

    /// Posterior means `(mu_c, mu_z)` of a batch in eval mode, without recording gradients.
    pub fn posterior_means(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>), GraphError> {
        let mut g = Graph::new();
        let mut p = self.frozen_bindings(&mut g);
        let xv = g.constant(x.clone());
        let mut updates = Vec::new();
        let z_aug = self.augmented_encode(&mut g, &mut p, xv, NormMode::Eval, &mut updates)?;
        let ((mu_c, _), (mu_z, _), _) = self.extract(&mut g, &mut p, z_aug)?;
        Ok((g.value(mu_c).clone(), g.value(mu_z).clone()))
    }

    /// Bindings whose parameters are constants, so nothing is recorded for backward.
    pub fn frozen_bindings(&self, g: &mut Graph<S>) -> Bindings<'_, S> {
        let mut p = Bindings::new(&self.store);
        for id in self.store.ids() {
            let v = g.constant(self.store.value(id).clone());
            p.bind(id, v);
        }
        p
    }
}

/// `mu + eps * exp(log_sigma)`, with `eps` a constant.
pub fn reparameterize<S: Scalar>(
    g: &mut Graph<S>,
    mu: Var,
    log_sigma: Var,
    eps: &Tensor<S>,
) -> Result<Var, GraphError> {
    if g.shape(mu) != eps.shape() {
        return Err(GraphError::Shape {
            op: "reparameterize",
            detail: format!("mean {:?} with noise {:?}", g.shape(mu), eps.shape()),
        });
    }
    let e = g.constant(eps.clone());
    let sigma = g.exp(log_sigma)?;
    let spread = g.mul(e, sigma)?;
    g.add(mu, spread)
}
