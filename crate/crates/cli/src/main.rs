use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mcevae::data::{augment, load_idx, read_cache, write_cache, DatasetCache, SplitSpec};
use mcevae::graphcore::nn::NormMode;
use mcevae::graphcore::{Graph, Tensor};
use mcevae::lie::{GroupKind, TransformSupport};
use mcevae::model::{ClusteringMode, Mcevae, ModelConfig, Noise};
use mcevae::objective::TrainingMode;
use mcevae::trainer::{assign_cluster, load_model, train, MetricsRow, Split, TrainConfig, METRICS_FILE};
use serde::{Deserialize, Serialize};

const RUN_MANIFEST: &str = "run.toml";
const THREADS_VAR: &str = "MCEVAE_THREADS";
/// Separator between grid tiles, in pixels.
const GAP: usize = 2;

#[derive(Parser, Debug)]
#[command(name = "mcevae", version, about = "Train and inspect multi-clustering equivariant VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Augment an IDX image/label pair and write a dataset cache.
    Prepare(PrepareArgs),
    /// Train a model on a dataset cache.
    Train(TrainArgs),
    /// Write a PGM grid of inputs, reconstructions, originals and canonical images.
    Reconstruct(ReconstructArgs),
    /// Write posterior cluster means of one split as CSV.
    ExportLatents(ExportArgs),
    /// Re-run the command recorded in a run manifest.
    Replay {
        manifest: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only the first N images.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Omit untransformed originals; the cache then supports unsupervised training only.
    #[arg(long)]
    drop_ground_truth: bool,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Unsupervised)]
    mode: Mode,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = Clustering::Gmm)]
    clustering: Clustering,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    equivariance: Switch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Save parameters every N epochs in addition to the final ones (0: final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Write metrics every N epochs and after the last one.
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// TOML file with a full model configuration; the flags above override its loss and ablation fields.
    #[arg(long)]
    model_config: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    So2,
    Se2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Supervised,
    Unsupervised,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Clustering {
    Gmm,
    Single,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

/// Everything needed to repeat a command: its arguments, the dataset it read and the seeds it used.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    command: String,
    args: Vec<String>,
    /// Identifier of the dataset cache read or written.
    cache_id: String,
    seeds: BTreeMap<String, u64>,
    checkpoints: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    config: Option<TrainConfig>,
}

impl RunManifest {
    fn new(command: &str, args: &[String], cache_id: &str) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: args.to_vec(),
            cache_id: cache_id.to_string(),
            seeds: BTreeMap::new(),
            checkpoints: Vec::new(),
            outputs: Vec::new(),
            config: None,
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing run manifest")?;
        fs::write(path, text).map_err(|e| mcevae::Error::io(path, e))?;
        Ok(())
    }
}

/// Manifest location for commands whose output is a single file.
fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.toml");
    out.with_file_name(name)
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(mcevae::Error::Config(format!("{THREADS_VAR} must be a positive integer, got '{v}'")).into()),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn prepare(a: &PrepareArgs, argv: &[String]) -> Result<()> {
    let mut raw = load_idx(&a.images, &a.labels)?;
    if let Some(n) = a.subset {
        if n == 0 || n > raw.len() {
            return Err(mcevae::Error::Invalid(format!("--subset {n} must be between 1 and {}", raw.len())).into());
        }
        raw.truncate(n);
    }
    let kind = match a.kind {
        Kind::So2 => GroupKind::So2,
        Kind::Se2 => GroupKind::Se2,
    };
    let mut data = augment(&raw, kind, TransformSupport::default(), a.seed)?;
    if a.drop_ground_truth {
        data.ground_truth = None;
    }
    let m = write_cache(&a.out, &data, SplitSpec::six_to_one(a.seed), a.subset)?;

    let mut run = RunManifest::new("prepare", argv, &m.cache_id);
    run.seeds.insert("augmentation".into(), a.seed);
    run.seeds.insert("split".into(), m.split.seed);
    run.outputs.push(a.out.clone());
    run.write(&a.out.join(RUN_MANIFEST))?;

    println!("cache: {} ({})", a.out.display(), m.cache_id);
    println!("kind: {}", m.kind);
    println!("images: {}", m.count);
    println!("split: {} train / {} val", m.train_count, m.val_count);
    println!("ground truth: {}", if m.has_ground_truth { "yes" } else { "no" });
    Ok(())
}

fn train_config(a: &TrainArgs, cache: &DatasetCache) -> Result<TrainConfig> {
    let mut model = match &a.model_config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| mcevae::Error::io(path, e))?;
            toml::from_str::<ModelConfig>(&text).map_err(|e| mcevae::Error::Format {
                path: path.clone(),
                detail: e.to_string(),
            })?
        }
        None => ModelConfig {
            kind: cache.manifest.kind,
            image_size: cache.manifest.image_size,
            support: cache.manifest.support,
            ..ModelConfig::default()
        },
    };
    model.alpha = a.alpha;
    model.beta = a.beta;
    model.clustering = match a.clustering {
        Clustering::Gmm => ClusteringMode::Gmm,
        Clustering::Single => ClusteringMode::Single,
    };
    model.equivariance = matches!(a.equivariance, Switch::On);
    let config = TrainConfig {
        mode: match a.mode {
            Mode::Supervised => TrainingMode::Supervised,
            Mode::Unsupervised => TrainingMode::Unsupervised,
        },
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        eval_every: a.eval_every,
        checkpoint_every: a.checkpoint_every,
        threads: threads()?,
        model,
        ..TrainConfig::default()
    };
    config.validate(cache)?;
    Ok(config)
}

fn print_row(r: &MetricsRow) {
    let split = match r.split {
        Split::Train => "train",
        Split::Val => "val",
    };
    println!(
        "epoch {:>3} {split:<5} recon {:.5} total {:.3} kl_zc {:.3} kl_z {:.3} kl_tau {:.3} inv {:.4} purity {:.3} nmi {:.3} latent_inv {:.4}",
        r.epoch,
        r.recon_bce_per_pixel,
        r.total,
        r.kl_zc,
        r.kl_z,
        r.kl_tau,
        r.invariance_penalty,
        r.cluster_purity,
        r.nmi,
        r.latent_invariance_score
    );
}

fn train_cmd(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let cache = read_cache(&a.data)?;
    let config = train_config(a, &cache)?;
    eprintln!(
        "training {} epochs on {} images ({} threads)",
        config.epochs,
        cache.train.len(),
        config.threads
    );
    let outcome = train::<f64>(&config, &cache, &a.out, |rows| {
        rows.iter().for_each(print_row);
        std::io::stdout().flush().ok();
    })?;

    let mut run = RunManifest::new("train", argv, &cache.manifest.cache_id);
    run.seeds.insert("train".into(), config.seed);
    run.seeds.insert("augmentation".into(), cache.manifest.seed);
    run.checkpoints = outcome.checkpoints.clone();
    run.outputs.push(a.out.join(METRICS_FILE));
    run.config = Some(config);
    run.write(&a.out.join(RUN_MANIFEST))?;

    if let Some(last) = outcome.checkpoints.last() {
        println!("checkpoint: {}", last.display());
    }
    println!("optimizer steps: {}", outcome.optimizer_steps);
    Ok(())
}

/// Loads a checkpoint and confirms it was built for the cache's images.
fn model_for(checkpoint: &Path, cache: &DatasetCache) -> Result<Mcevae<f64>> {
    let model: Mcevae<f64> = load_model(checkpoint)?;
    let cfg = model.config();
    if cfg.kind != cache.manifest.kind {
        return Err(mcevae::Error::Mismatch {
            field: "kind".into(),
            detail: format!("checkpoint is {}, dataset is {}", cfg.kind, cache.manifest.kind),
        }
        .into());
    }
    if cfg.image_size != cache.manifest.image_size {
        return Err(mcevae::Error::Mismatch {
            field: "image_size".into(),
            detail: format!("checkpoint has {}, dataset has {}", cfg.image_size, cache.manifest.image_size),
        }
        .into());
    }
    Ok(model)
}

fn split_indices(cache: &DatasetCache, split: Split) -> &[usize] {
    match split {
        Split::Train => &cache.train,
        Split::Val => &cache.val,
    }
}

/// Binary greyscale PGM; values in [0, 1] map to 0..=255.
fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| mcevae::Error::io(path, e))?;
    Ok(())
}

fn reconstruct(a: &ReconstructArgs, argv: &[String]) -> Result<()> {
    let cache = read_cache(&a.data)?;
    let model = model_for(&a.checkpoint, &cache)?;
    let pool = split_indices(&cache, a.split.into());
    if a.n == 0 || a.n > pool.len() {
        return Err(mcevae::Error::Invalid(format!("--n {} must be between 1 and the split size {}", a.n, pool.len())).into());
    }
    let indices = &pool[..a.n];
    let x = cache.data.images_at::<f64>(indices);

    let mut g = Graph::new();
    let mut p = model.frozen_bindings(&mut g);
    let xv = g.constant(x.clone());
    let out = model
        .forward(&mut g, &mut p, xv, NormMode::Eval, &Noise::zeros(model.config(), a.n))
        .context("forward pass")?;
    let x_hat = g.value(out.x_hat).clone();
    let x_tilde = g.value(out.x_tilde).clone();
    let x_gt = match cache.data.ground_truth_at::<f64>(indices) {
        Some(t) => t,
        None => {
            eprintln!("warning: the cache has no ground truth; the third row is left black");
            Tensor::zeros(x.shape())
        }
    };

    let side = cache.manifest.image_size;
    let width = a.n * side + (a.n - 1) * GAP;
    let height = 4 * side + 3 * GAP;
    let mut grid = vec![1.0; width * height];
    for (row, t) in [&x, &x_hat, &x_gt, &x_tilde].into_iter().enumerate() {
        for col in 0..a.n {
            let img = &t.data()[col * side * side..(col + 1) * side * side];
            let (top, left) = (row * (side + GAP), col * (side + GAP));
            for r in 0..side {
                let start = (top + r) * width + left;
                grid[start..start + side].copy_from_slice(&img[r * side..(r + 1) * side]);
            }
        }
    }
    write_pgm(&a.out, width, height, &grid)?;

    let mut run = RunManifest::new("reconstruct", argv, &cache.manifest.cache_id);
    run.checkpoints.push(a.checkpoint.clone());
    run.outputs.push(a.out.clone());
    run.write(&sibling_manifest(&a.out))?;
    println!("grid: {} ({width}x{height})", a.out.display());
    Ok(())
}

fn export_latents(a: &ExportArgs, argv: &[String]) -> Result<()> {
    const CHUNK: usize = 256;
    let cache = read_cache(&a.data)?;
    let model = model_for(&a.checkpoint, &cache)?;
    let indices = split_indices(&cache, a.split.into());
    let n_zc = model.config().n_zc;

    let mut w = csv::Writer::from_path(&a.out).map_err(|e| anyhow::anyhow!("{}: {e}", a.out.display()))?;
    let mut header = vec!["label".to_string(), "cluster".to_string()];
    header.extend((0..n_zc).map(|j| format!("mu_c_{j}")));
    w.write_record(&header)?;
    for chunk in indices.chunks(CHUNK) {
        let (mu_c, _) = model.posterior_means(&cache.data.images_at::<f64>(chunk)).context("encoding")?;
        for (row, &label) in mu_c.data().chunks(n_zc).zip(&cache.data.labels_at(chunk)) {
            let mut record = vec![label.to_string(), assign_cluster(row).to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
    }
    w.flush().map_err(|e| mcevae::Error::io(&a.out, e))?;

    let mut run = RunManifest::new("export-latents", argv, &cache.manifest.cache_id);
    run.checkpoints.push(a.checkpoint.clone());
    run.outputs.push(a.out.clone());
    run.write(&sibling_manifest(&a.out))?;
    println!("latents: {} ({} rows)", a.out.display(), indices.len());
    Ok(())
}

fn replay(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| mcevae::Error::io(path, e))?;
    let run: RunManifest = toml::from_str(&text).map_err(|e| mcevae::Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if run.args.first().map(String::as_str) == Some("replay") {
        bail!(mcevae::Error::Invalid("a replay manifest cannot be replayed".into()));
    }
    let mut argv = vec!["mcevae".to_string()];
    argv.extend(run.args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| mcevae::Error::Invalid(format!("recorded arguments: {e}")))?;

    // Inputs must be the dataset the run originally saw.
    let data = match &cli.command {
        Command::Train(a) => Some(&a.data),
        Command::Reconstruct(a) => Some(&a.data),
        Command::ExportLatents(a) => Some(&a.data),
        Command::Prepare(_) | Command::Replay { .. } => None,
    };
    if let Some(dir) = data {
        let found = mcevae::data::read_manifest(dir)?.cache_id;
        if found != run.cache_id {
            return Err(mcevae::Error::Mismatch {
                field: "cache_id".into(),
                detail: format!("manifest records {}, {} has {found}", run.cache_id, dir.display()),
            }
            .into());
        }
    }
    dispatch(&cli.command, &run.args)
}

fn dispatch(command: &Command, args: &[String]) -> Result<()> {
    match command {
        Command::Prepare(a) => prepare(a, args),
        Command::Train(a) => train_cmd(a, args),
        Command::Reconstruct(a) => reconstruct(a, args),
        Command::ExportLatents(a) => export_latents(a, args),
        Command::Replay { manifest } => replay(manifest),
    }
}

/// Data and configuration problems exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mcevae::Error>() {
            return match e {
                mcevae::Error::Graph(_) | mcevae::Error::NonFiniteLoss { .. } => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<csv::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&cli.command, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
