//! Training and evaluation loop, clustering metrics and the metrics log.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{AugmentedDataset, DatasetCache};
use crate::error::Error;
use crate::graphcore::checkpoint::{load_checkpoint, write_checkpoint};
use crate::graphcore::nn::{NormMode, RunningStatsUpdate, BN_MOMENTUM};
use crate::graphcore::{AdamConfig, AdamState, Graph, GraphError, Tensor};
use crate::lie::{sample_transform, AlgebraCoefficients, TransformSupport};
use crate::model::{Mcevae, ModelConfig, Noise};
use crate::objective::{invariance_divergence, total_loss, LossBreakdown, ObjectiveError, TrainingMode};
use crate::rng::{stream_rng, Purpose};
use crate::scalar::Scalar;
use crate::stn::transform_images;

pub const METRICS_HEADER: &str =
    "epoch,split,recon_bce_per_pixel,kl_zc,kl_z,kl_tau,invariance_penalty,total,purity,nmi,latent_invariance";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Metrics rows are written every `eval_every` epochs and after the last one.
    pub eval_every: usize,
    /// Parameters are saved every `checkpoint_every` epochs (0: final only).
    pub checkpoint_every: usize,
    /// Random transformations per image for the latent invariance score.
    pub invariance_transforms: usize,
    /// Images per split entering the latent invariance score.
    pub invariance_images: usize,
    /// Worker threads for evaluation passes.
    pub threads: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainingMode::Unsupervised,
            epochs: 60,
            batch_size: 100,
            learning_rate: 1e-3,
            seed: 0,
            eval_every: 1,
            checkpoint_every: 0,
            invariance_transforms: 8,
            invariance_images: 256,
            threads: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, cache: &DatasetCache) -> Result<(), Error> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > cache.train.len() {
            return Err(Error::Config(format!(
                "batch size {} must be between 1 and the training set size {}",
                self.batch_size,
                cache.train.len()
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.mode == TrainingMode::Supervised && cache.data.ground_truth.is_none() {
            return Err(Error::Config(
                "supervised mode needs a dataset cache prepared with ground-truth originals".into(),
            ));
        }
        if cache.data.kind != self.model.kind {
            return Err(Error::Mismatch {
                field: "kind".into(),
                detail: format!("dataset is {}, model is {}", cache.data.kind, self.model.kind),
            });
        }
        if cache.data.image_size != self.model.image_size {
            return Err(Error::Mismatch {
                field: "image_size".into(),
                detail: format!(
                    "dataset has {}, model has {}",
                    cache.data.image_size, self.model.image_size
                ),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

/// One line of the metrics log. Loss components are per-image means over the split.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub recon_bce_per_pixel: f64,
    pub kl_zc: f64,
    pub kl_z: f64,
    pub kl_tau: f64,
    pub invariance_penalty: f64,
    pub total: f64,
    #[serde(rename = "purity")]
    pub cluster_purity: f64,
    pub nmi: f64,
    #[serde(rename = "latent_invariance")]
    pub latent_invariance_score: f64,
}

/// Index of the largest coordinate, ties to the lowest index; equivalently
/// the nearest one-hot prior mean when the norm of `mu_c` is held fixed.
pub fn assign_cluster<S: Scalar>(mu_c: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in mu_c.iter().enumerate().skip(1) {
        if v > mu_c[best] {
            best = i;
        }
    }
    best
}

/// Cluster purity and normalized mutual information (arithmetic-mean normalization).
pub fn clustering_metrics(assignments: &[usize], labels: &[u8]) -> Result<(f64, f64), Error> {
    if assignments.len() != labels.len() {
        return Err(Error::Mismatch {
            field: "clustering inputs".into(),
            detail: format!("{} assignments, {} labels", assignments.len(), labels.len()),
        });
    }
    let n = assignments.len();
    if n == 0 {
        return Err(Error::Invalid("clustering metrics of an empty set".into()));
    }
    let k = assignments.iter().max().map_or(0, |&m| m + 1);
    let c = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut table = vec![vec![0usize; c]; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        table[a][l as usize] += 1;
    }
    let nf = n as f64;
    let purity = table.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum::<usize>() as f64 / nf;

    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..c).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&m| m > 0)
            .map(|&m| {
                let p = m as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hl) = (entropy(&rows), entropy(&cols));
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &m) in row.iter().enumerate() {
            if m > 0 {
                let m = m as f64;
                mi += m / nf * (nf * m / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    let nmi = if ha == 0.0 && hl == 0.0 {
        1.0
    } else {
        (2.0 * mi / (ha + hl)).clamp(0.0, 1.0)
    };
    Ok((purity, nmi))
}

/// Mean of `|mu_c(x) - mu_c(M x)|^2 + |mu_z(x) - mu_z(M x)|^2` over every image
/// and each of its transformations, with posterior means from eval mode.
/// `transforms[t][i]` transforms image `i` in round `t`.
pub fn latent_invariance_for<S: Scalar>(
    model: &Mcevae<S>,
    images: &Tensor<S>,
    transforms: &[Vec<AlgebraCoefficients<S>>],
    batch_size: usize,
) -> Result<f64, Error> {
    let n = images.shape()[0];
    let px: usize = images.shape()[1..].iter().product();
    let mut total = 0.0;
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let x = Tensor::new(shape, images.data()[start * px..end * px].to_vec())?;
        let (mu_c, mu_z) = model.posterior_means(&x)?;
        for round in transforms {
            let mx = transform_images(&x, &round[start..end], model.config().kind)?;
            let (mu_c_m, mu_z_m) = model.posterior_means(&mx)?;
            for (a, b) in [(&mu_c, &mu_c_m), (&mu_z, &mu_z_m)] {
                for (&p, &q) in a.data().iter().zip(b.data()) {
                    let d = (p - q).to_f64().unwrap_or(f64::NAN);
                    total += d * d;
                }
            }
        }
    }
    Ok(total / (n * transforms.len()).max(1) as f64)
}

/// [`latent_invariance_for`] with `n_transforms` rounds drawn uniformly from `support`.
pub fn latent_invariance_score<S: Scalar, R: Rng + ?Sized>(
    model: &Mcevae<S>,
    images: &Tensor<S>,
    n_transforms: usize,
    support: &TransformSupport,
    rng: &mut R,
    batch_size: usize,
) -> Result<f64, Error> {
    let n = images.shape()[0];
    let kind = model.config().kind;
    let transforms: Vec<Vec<AlgebraCoefficients<S>>> = (0..n_transforms)
        .map(|_| (0..n).map(|_| sample_transform(support, kind, rng)).collect())
        .collect();
    latent_invariance_for(model, images, &transforms, batch_size)
}

fn objective_error(e: ObjectiveError, epoch: usize, batch: usize) -> Error {
    match e.non_finite_term() {
        Some(term) => Error::NonFiniteLoss { term, epoch, batch },
        None => Error::Invalid(e.to_string()),
    }
}

fn forward_error(e: GraphError, epoch: usize, batch: usize) -> Error {
    match e {
        GraphError::NonFinite { op, .. } => Error::NonFiniteLoss { term: op, epoch, batch },
        other => Error::Graph(other),
    }
}

/// Loss means and cluster assignments of one evaluation batch.
struct BatchEval {
    means: LossBreakdown,
    count: usize,
    assignments: Vec<usize>,
}

pub struct Trainer<S: Scalar> {
    config: TrainConfig,
    model: Mcevae<S>,
    adam: AdamState<S>,
    epoch: usize,
}

impl<S: Scalar> Trainer<S> {
    /// Initializes the model from the `init` stream of the configured seed.
    pub fn new(config: TrainConfig, cache: &DatasetCache) -> Result<Self, Error> {
        config.validate(cache)?;
        let model = Mcevae::new(config.model.clone(), &mut stream_rng(config.seed, Purpose::Init, 0))?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: TrainConfig, model: Mcevae<S>) -> Self {
        let adam = AdamState::new(
            model.store(),
            AdamConfig {
                lr: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        Trainer {
            config,
            model,
            adam,
            epoch: 0,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Mcevae<S> {
        &self.model
    }

    pub fn into_model(self) -> Mcevae<S> {
        self.model
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Forward and backward pass on one batch, accumulating gradients into the
    /// parameter store. Returns the loss breakdown and the pending batch-norm updates.
    pub fn compute_gradients<R: Rng + ?Sized>(
        &mut self,
        data: &AugmentedDataset,
        batch: &[usize],
        rng: &mut R,
        batch_number: usize,
    ) -> Result<(LossBreakdown, Vec<RunningStatsUpdate<S>>), Error> {
        let cfg = &self.config.model;
        let epoch = self.epoch + 1;
        let x = data.images_at::<S>(batch);
        let noise = Noise::sample(cfg, batch.len(), rng);
        let mut g = Graph::new();
        let (loss, updates) = {
            let mut p = self.model.bindings();
            let xv = g.constant(x.clone());
            let out = self
                .model
                .forward(&mut g, &mut p, xv, NormMode::Train, &noise)
                .map_err(|e| forward_error(e, epoch, batch_number))?;
            let d = match self.config.mode {
                TrainingMode::Supervised => {
                    let gt = data.ground_truth_at::<S>(batch).ok_or_else(|| {
                        Error::Config("supervised training needs ground-truth originals".into())
                    })?;
                    let gt = g.constant(gt);
                    invariance_divergence(&mut g, TrainingMode::Supervised, &out, Some(gt), None)
                }
                TrainingMode::Unsupervised => {
                    let taus: Vec<AlgebraCoefficients<S>> = (0..batch.len())
                        .map(|_| sample_transform(&data.support, cfg.kind, rng))
                        .collect();
                    let mx = g.constant(transform_images(&x, &taus, cfg.kind)?);
                    let mut frozen = self.model.frozen_bindings(&mut g);
                    let out_m = self
                        .model
                        .forward(&mut g, &mut frozen, mx, NormMode::BatchOnly, &noise)
                        .map_err(|e| forward_error(e, epoch, batch_number))?;
                    invariance_divergence(&mut g, TrainingMode::Unsupervised, &out, None, Some(&out_m))
                }
            }
            .map_err(|e| objective_error(e, epoch, batch_number))?;
            let loss = total_loss(&mut g, &out, xv, Some(d), cfg)
                .map_err(|e| objective_error(e, epoch, batch_number))?;
            (loss, out.bn_updates)
        };
        for (term, v) in loss.breakdown.terms() {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term,
                    epoch,
                    batch: batch_number,
                });
            }
        }
        let grads = g.backward(loss.total)?;
        grads.accumulate_into(&g, self.model.store_mut());
        Ok((loss.breakdown, updates))
    }

    /// Adam update from the accumulated gradients, then the batch-norm running-statistic updates.
    pub fn apply_step(&mut self, updates: &[RunningStatsUpdate<S>]) -> Result<(), Error> {
        self.adam.step(self.model.store_mut())?;
        for u in updates {
            u.apply(self.model.store_mut(), BN_MOMENTUM)?;
        }
        Ok(())
    }

    /// The shuffled batches of the next epoch and the generator that continues after the shuffle.
    pub fn epoch_plan(&self, cache: &DatasetCache) -> (Vec<Vec<usize>>, ChaCha8Rng) {
        let mut rng = stream_rng(self.config.seed, Purpose::Train, (self.epoch + 1) as u64);
        let mut order = cache.train.clone();
        order.shuffle(&mut rng);
        let batches = order.chunks(self.config.batch_size).map(|c| c.to_vec()).collect();
        (batches, rng)
    }

    /// One pass over the training split. Returns the metrics rows due after it.
    ///
    /// The train row reports loss components averaged over the epoch's optimizer
    /// steps; its clustering and invariance scores, like every validation
    /// metric, come from eval-mode posterior means after the epoch.
    pub fn run_epoch(&mut self, cache: &DatasetCache) -> Result<Vec<MetricsRow>, Error> {
        let (batches, mut rng) = self.epoch_plan(cache);
        let mut sums = LossBreakdown::default();
        for (b, batch) in batches.iter().enumerate() {
            let (loss, updates) = self.compute_gradients(&cache.data, batch, &mut rng, b)?;
            self.apply_step(&updates)?;
            accumulate(&mut sums, &loss, batch.len() as f64);
        }
        self.epoch += 1;
        if self.epoch % self.config.eval_every == 0 || self.epoch == self.config.epochs {
            let n = cache.train.len() as f64;
            let assignments = self.cluster_assignments(&cache.data, &cache.train)?;
            let train = self.metrics_row(cache, Split::Train, scaled(&sums, 1.0 / n), &assignments)?;
            Ok(vec![train, self.evaluate(cache, Split::Val)?])
        } else {
            Ok(Vec::new())
        }
    }

    /// Cluster index of every image, from eval-mode posterior means.
    pub fn cluster_assignments(&self, data: &AugmentedDataset, indices: &[usize]) -> Result<Vec<usize>, Error> {
        let n_zc = self.config.model.n_zc;
        let chunks: Vec<&[usize]> = indices.chunks(self.config.batch_size).collect();
        let parts = self.map_batches(&chunks, |batch| {
            let (mu_c, _) = self.model.posterior_means(&data.images_at::<S>(batch))?;
            Ok(mu_c.data().chunks(n_zc).map(assign_cluster).collect::<Vec<_>>())
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Applies `f` to every item, sharding across the configured worker threads; results keep item order.
    fn map_batches<T, U, F>(&self, items: &[T], f: F) -> Result<Vec<U>, Error>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> Result<U, Error> + Sync,
    {
        let threads = self.config.threads.clamp(1, items.len().max(1));
        if threads == 1 {
            return items.iter().map(f).collect();
        }
        let per = items.len().div_ceil(threads);
        let f = &f;
        std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(per)
                .map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    }

    fn metrics_row(
        &self,
        cache: &DatasetCache,
        split: Split,
        means: LossBreakdown,
        assignments: &[usize],
    ) -> Result<MetricsRow, Error> {
        let data = &cache.data;
        let indices = match split {
            Split::Train => &cache.train,
            Split::Val => &cache.val,
        };
        let (purity, nmi) = clustering_metrics(assignments, &data.labels_at(indices))?;
        let subset = &indices[..indices.len().min(self.config.invariance_images)];
        let mut rng = stream_rng(self.config.seed, Purpose::Eval, 2 + split.tag());
        let invariance = latent_invariance_score(
            &self.model,
            &data.images_at::<S>(subset),
            self.config.invariance_transforms,
            &data.support,
            &mut rng,
            self.config.batch_size,
        )?;
        Ok(MetricsRow {
            epoch: self.epoch,
            split,
            recon_bce_per_pixel: -means.recon_loglik / data.pixels() as f64,
            kl_zc: means.kl_zc,
            kl_z: means.kl_z,
            kl_tau: means.kl_tau,
            invariance_penalty: means.invariance_penalty,
            total: means.total,
            cluster_purity: purity,
            nmi,
            latent_invariance_score: invariance,
        })
    }

    fn eval_batch(
        &self,
        data: &AugmentedDataset,
        batch: &[usize],
        taus: Option<&[AlgebraCoefficients<S>]>,
    ) -> Result<BatchEval, Error> {
        let cfg = &self.config.model;
        let x = data.images_at::<S>(batch);
        let noise = Noise::zeros(cfg, batch.len());
        let mut g = Graph::new();
        let mut p = self.model.frozen_bindings(&mut g);
        let xv = g.constant(x.clone());
        let out = self
            .model
            .forward(&mut g, &mut p, xv, NormMode::Eval, &noise)
            .map_err(|e| forward_error(e, self.epoch, 0))?;
        let d = match (self.config.mode, taus) {
            (TrainingMode::Unsupervised, Some(taus)) => {
                let mx = g.constant(transform_images(&x, taus, cfg.kind)?);
                let out_m = self
                    .model
                    .forward(&mut g, &mut p, mx, NormMode::Eval, &noise)
                    .map_err(|e| forward_error(e, self.epoch, 0))?;
                invariance_divergence(&mut g, TrainingMode::Unsupervised, &out, None, Some(&out_m))
            }
            _ => {
                let gt = data.ground_truth_at::<S>(batch).map(|t| g.constant(t));
                invariance_divergence(&mut g, TrainingMode::Supervised, &out, gt, None)
            }
        }
        .map_err(|e| objective_error(e, self.epoch, 0))?;
        let loss = total_loss(&mut g, &out, xv, Some(d), cfg).map_err(|e| objective_error(e, self.epoch, 0))?;
        let assignments = g
            .value(out.latents.mu_c)
            .data()
            .chunks(cfg.n_zc)
            .map(assign_cluster)
            .collect();
        Ok(BatchEval {
            means: loss.breakdown,
            count: batch.len(),
            assignments,
        })
    }

    /// Metrics of the current model on one split, with zero noise and running batch-norm statistics.
    pub fn evaluate(&self, cache: &DatasetCache, split: Split) -> Result<MetricsRow, Error> {
        let indices = match split {
            Split::Train => &cache.train,
            Split::Val => &cache.val,
        };
        let cfg = &self.config.model;
        let data = &cache.data;
        let mut rng = stream_rng(self.config.seed, Purpose::Eval, split.tag());
        let taus: Option<Vec<AlgebraCoefficients<S>>> = (self.config.mode == TrainingMode::Unsupervised)
            .then(|| {
                (0..indices.len())
                    .map(|_| sample_transform(&data.support, cfg.kind, &mut rng))
                    .collect()
            });
        let bs = self.config.batch_size;
        let chunks: Vec<(usize, &[usize])> = indices.chunks(bs).enumerate().collect();
        let results = self.map_batches(&chunks, |&(k, batch)| {
            let t = taus.as_ref().map(|t| &t[k * bs..k * bs + batch.len()]);
            self.eval_batch(data, batch, t)
        })?;
        let mut sums = LossBreakdown::default();
        let mut assignments = Vec::with_capacity(indices.len());
        for r in results {
            accumulate(&mut sums, &r.means, r.count as f64);
            assignments.extend(r.assignments);
        }
        self.metrics_row(cache, split, scaled(&sums, 1.0 / indices.len() as f64), &assignments)
    }
}

fn accumulate(sums: &mut LossBreakdown, means: &LossBreakdown, weight: f64) {
    sums.recon_loglik += means.recon_loglik * weight;
    sums.kl_zc += means.kl_zc * weight;
    sums.kl_z += means.kl_z * weight;
    sums.kl_tau += means.kl_tau * weight;
    sums.invariance_penalty += means.invariance_penalty * weight;
    sums.total += means.total * weight;
}

fn scaled(b: &LossBreakdown, k: f64) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    accumulate(&mut out, b, k);
    out
}

/// Appends rows to a metrics CSV, writing the header when the file is new.
pub struct MetricsLog {
    writer: csv::Writer<fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self, Error> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            writer: csv::Writer::from_writer(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<(), Error> {
        let io = |e: csv::Error| Error::Format {
            path: self.path.clone(),
            detail: e.to_string(),
        };
        self.writer.serialize(row).map_err(io)?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, Error> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    reader
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_CONFIG_FILE: &str = "model.toml";

/// Paths of one saved parameter set: text manifest and binary blob.
pub fn checkpoint_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.params")), dir.join(format!("{stem}.bin")))
}

pub fn save_model<S: Scalar>(model: &Mcevae<S>, dir: &Path, stem: &str) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = checkpoint_paths(dir, stem);
    write_checkpoint(model.store(), &manifest, &blob)?;
    let config_path = dir.join(MODEL_CONFIG_FILE);
    let text = toml::to_string(model.config()).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))?;
    Ok(manifest)
}

/// Rebuilds a model from `model.toml` next to the checkpoint and loads its parameters.
pub fn load_model<S: Scalar>(checkpoint: &Path) -> Result<Mcevae<S>, Error> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let config_path = dir.join(MODEL_CONFIG_FILE);
    let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::Format {
        path: config_path,
        detail: e.to_string(),
    })?;
    let mut model = Mcevae::new(config, &mut stream_rng(0, Purpose::Init, 0))?;
    load_checkpoint(model.store_mut(), checkpoint, &checkpoint.with_extension("bin"))?;
    Ok(model)
}

pub struct TrainOutcome<S: Scalar> {
    pub model: Mcevae<S>,
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
    pub optimizer_steps: u64,
}

/// Runs every epoch, writing `metrics.csv` and checkpoints under `out`.
/// `on_rows` sees each epoch's rows as they are produced.
pub fn train<S: Scalar>(
    config: &TrainConfig,
    cache: &DatasetCache,
    out: &Path,
    mut on_rows: impl FnMut(&[MetricsRow]),
) -> Result<TrainOutcome<S>, Error> {
    let mut trainer = Trainer::<S>::new(config.clone(), cache)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut log = MetricsLog::create(&out.join(METRICS_FILE))?;
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let ckpt_dir = out.join("checkpoints");
    for _ in 0..config.epochs {
        let new_rows = trainer.run_epoch(cache)?;
        for r in &new_rows {
            log.append(r)?;
        }
        on_rows(&new_rows);
        rows.extend(new_rows);
        let e = trainer.epoch();
        if config.checkpoint_every > 0 && e % config.checkpoint_every == 0 && e < config.epochs {
            checkpoints.push(save_model(trainer.model(), &ckpt_dir, &format!("epoch-{e:03}"))?);
        }
    }
    checkpoints.push(save_model(trainer.model(), out, "final")?);
    let optimizer_steps = trainer.optimizer_steps();
    Ok(TrainOutcome {
        model: trainer.into_model(),
        rows,
        checkpoints,
        optimizer_steps,
    })
}
