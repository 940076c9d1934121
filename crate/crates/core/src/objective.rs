//! Loss terms: Bernoulli log-likelihood, Gaussian KLs, the mixture KL upper
//! bound and the invariance divergence, combined into the training objective.

use crate::graphcore::{Graph, GraphError, Var};
use crate::model::{ClusteringMode, ForwardOutput, ModelConfig};
use crate::scalar::Scalar;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// The untransformed original of every input is known.
    Supervised,
    /// Invariance is enforced against a randomly transformed copy of the input.
    Unsupervised,
}

impl std::str::FromStr for TrainingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "supervised" => Ok(TrainingMode::Supervised),
            "unsupervised" => Ok(TrainingMode::Unsupervised),
            other => Err(format!(
                "unknown mode '{other}' (expected supervised or unsupervised)"
            )),
        }
    }
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainingMode::Supervised => "supervised",
            TrainingMode::Unsupervised => "unsupervised",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("loss term '{term}': {source}")]
    Term {
        term: &'static str,
        #[source]
        source: GraphError,
    },
    #[error("supervised divergence needs the untransformed originals")]
    MissingGroundTruth,
    #[error("unsupervised divergence needs the transformed-input branch")]
    MissingTransformedBranch,
}

impl ObjectiveError {
    /// The loss term a non-finite value appeared in, if that is the cause.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        match self {
            ObjectiveError::Term {
                term,
                source: GraphError::NonFinite { .. },
            } => Some(term),
            _ => None,
        }
    }
}

fn term<T>(name: &'static str, r: Result<T, GraphError>) -> Result<T, ObjectiveError> {
    r.map_err(|source| ObjectiveError::Term { term: name, source })
}

/// `sum t log p + (1 - t) log(1 - p)` over every element.
pub fn bce_loglik<S: Scalar>(g: &mut Graph<S>, p: Var, t: Var) -> Result<Var, GraphError> {
    let p = g.clamp(p, S::lit(PROB_CLAMP), S::lit(1.0 - PROB_CLAMP))?;
    let log_p = g.log(p)?;
    let q = g.affine(p, -S::one(), S::one())?;
    let log_q = g.log(q)?;
    let t_bar = g.affine(t, -S::one(), S::one())?;
    let a = g.mul(t, log_p)?;
    let b = g.mul(t_bar, log_q)?;
    let s = g.add(a, b)?;
    g.sum(s)
}

/// `KL(N(mu, sigma^2) || N(0, 1))`, summed over every coordinate:
/// `0.5 sum (sigma^2 + mu^2 - 1 - 2 log sigma)`.
pub fn gauss_kl<S: Scalar>(g: &mut Graph<S>, mu: Var, log_sigma: Var) -> Result<Var, GraphError> {
    let two_ls = g.scale(log_sigma, S::lit(2.0))?;
    let var = g.exp(two_ls)?;
    let mu2 = g.square(mu)?;
    let a = g.add(var, mu2)?;
    let b = g.sub(a, two_ls)?;
    let total = g.sum(b)?;
    let n = S::lit(g.value(mu).numel() as f64);
    g.affine(total, S::lit(0.5), -S::lit(0.5) * n)
}

/// Upper bound on the KL between the equal-weight posterior and prior
/// mixtures of the cluster latent. Component `k` of both mixtures is a unit
/// Gaussian except in coordinate `k`, where the posterior has
/// `(mu_k, sigma_k)` and the prior has mean 1, so the bound is
/// `(1/n) sum_k 0.5 ((mu_k - 1)^2 + sigma_k^2 - 1 - 2 log sigma_k)`, summed over the batch.
pub fn gmm_kl_upper_bound<S: Scalar>(
    g: &mut Graph<S>,
    mu: Var,
    log_sigma: Var,
) -> Result<Var, GraphError> {
    let n = g.shape(mu).last().copied().unwrap_or(1);
    let shifted = g.affine(mu, S::one(), -S::one())?;
    let kl = gauss_kl(g, shifted, log_sigma)?;
    g.scale(kl, S::one() / S::lit(n as f64))
}

/// Squared distance summed over every element.
fn squared_distance<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var, GraphError> {
    let d = g.sub(a, b)?;
    let d2 = g.square(d)?;
    g.sum(d2)
}

/// Invariance penalty, summed over the batch.
///
/// Supervised: `-bce(x_tilde, x_gt)`. Unsupervised:
/// `|mu_c(x) - sg mu_c(Mx)|^2 + |mu_z(x) - sg mu_z(Mx)|^2 - bce(x_tilde(x), sg x_tilde(Mx))`,
/// where `sg` blocks gradients.
pub fn invariance_divergence<S: Scalar>(
    g: &mut Graph<S>,
    mode: TrainingMode,
    branch_x: &ForwardOutput<S>,
    x_gt: Option<Var>,
    branch_mx: Option<&ForwardOutput<S>>,
) -> Result<Var, ObjectiveError> {
    match mode {
        TrainingMode::Supervised => {
            let x_gt = x_gt.ok_or(ObjectiveError::MissingGroundTruth)?;
            let ll = term("invariance_penalty", bce_loglik(g, branch_x.x_tilde, x_gt))?;
            term("invariance_penalty", g.scale(ll, -S::one()))
        }
        TrainingMode::Unsupervised => {
            let m = branch_mx.ok_or(ObjectiveError::MissingTransformedBranch)?;
            term("invariance_penalty", (|| {
                let mu_c_m = g.stop_grad(m.latents.mu_c);
                let mu_z_m = g.stop_grad(m.latents.mu_z);
                let x_tilde_m = g.stop_grad(m.x_tilde);
                let dc = squared_distance(g, branch_x.latents.mu_c, mu_c_m)?;
                let dz = squared_distance(g, branch_x.latents.mu_z, mu_z_m)?;
                let ll = bce_loglik(g, branch_x.x_tilde, x_tilde_m)?;
                let latent = g.add(dc, dz)?;
                g.sub(latent, ll)
            })())
        }
    }
}

/// Loss components per image (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Log-likelihood of the input under the equivariant reconstruction; `<= 0`.
    pub recon_loglik: f64,
    pub kl_zc: f64,
    pub kl_z: f64,
    pub kl_tau: f64,
    pub invariance_penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Every component, tagged with its name.
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("recon_loglik", self.recon_loglik),
            ("kl_zc", self.kl_zc),
            ("kl_z", self.kl_z),
            ("kl_tau", self.kl_tau),
            ("invariance_penalty", self.invariance_penalty),
            ("total", self.total),
        ]
    }
}

pub struct Loss {
    /// Scalar node to differentiate.
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `-recon + beta (kl_zc + kl_z + kl_tau) + alpha D`, averaged over the batch.
///
/// `divergence` is the batch sum from [`invariance_divergence`]; `None` leaves it out.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    out: &ForwardOutput<S>,
    x: Var,
    divergence: Option<Var>,
    config: &ModelConfig,
) -> Result<Loss, ObjectiveError> {
    let batch = g.shape(x)[0];
    let inv_b = S::one() / S::lit(batch as f64);
    let lat = &out.latents;

    let recon = term("recon_loglik", bce_loglik(g, out.x_hat, x))?;
    let kl_zc = term(
        "kl_zc",
        match config.clustering {
            ClusteringMode::Gmm => gmm_kl_upper_bound(g, lat.mu_c, lat.log_sigma_c),
            ClusteringMode::Single => gauss_kl(g, lat.mu_c, lat.log_sigma_c),
        },
    )?;
    let kl_z = term("kl_z", gauss_kl(g, lat.mu_z, lat.log_sigma_z))?;
    let kl_tau = match (lat.mu_tau, lat.log_sigma_tau) {
        (Some(mu), Some(ls)) => Some(term("kl_tau", gauss_kl(g, mu, ls))?),
        _ => None,
    };

    let total = term("total", (|| {
        let mut kl = g.add(kl_zc, kl_z)?;
        if let Some(k) = kl_tau {
            kl = g.add(kl, k)?;
        }
        let kl = g.scale(kl, S::lit(config.beta))?;
        let mut total = g.sub(kl, recon)?;
        if let Some(d) = divergence {
            let d = g.scale(d, S::lit(config.alpha))?;
            total = g.add(total, d)?;
        }
        g.scale(total, inv_b)
    })())?;

    let value = |g: &Graph<S>, v: Var| (g.value(v).item() * inv_b).to_f64().unwrap_or(f64::NAN);
    let breakdown = LossBreakdown {
        recon_loglik: value(g, recon),
        kl_zc: value(g, kl_zc),
        kl_z: value(g, kl_z),
        kl_tau: kl_tau.map_or(0.0, |k| value(g, k)),
        invariance_penalty: divergence.map_or(0.0, |d| value(g, d)),
        total: g.value(total).item().to_f64().unwrap_or(f64::NAN),
    };
    Ok(Loss { total, breakdown })
}
