//! `drbn` — train, sample, and evaluate deep restricted Boltzmann networks.
//!
//! Subcommands:
//!
//! - `train`    PCD training of an architecture on a dataset
//! - `generate` Gibbs-sample an image grid from a trained model
//! - `semisup`  two-phase semi-supervised evaluation (frozen / fine-tune / plain-fc)
//! - `inspect`  print a model's layer shapes, weight counts, and a probe free energy
//!
//! Every command is deterministic given `--seed`. `DRBN_THREADS` caps the
//! internal thread pool. Exit codes: 0 success, 1 runtime error, 2 usage.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use drbn_core::classifier::{
    extract_features, fine_tune, metric_line, plain_fc_baseline, train_head, HeadConfig,
};
use drbn_core::data::{self, BinarizeMode, Dataset};
use drbn_core::net::{Drbn, LayerSpec, NetworkSpec};
use drbn_core::persistence;
use drbn_core::rng::RngStream;
use drbn_core::tensor::{Real, Tensor};
use drbn_core::trainer::{TrainConfig, Trainer, STREAM_EVAL};
use drbn_core::adam::AdamParams;

/// Stream label for weight initialization (training streams use 1..=4).
const STREAM_WEIGHTS: u64 = 0;

#[derive(Parser)]
#[command(
    name = "drbn",
    version,
    about = "Energy-based generative models: RBMs, conv RBMs, and jointly trained deep stacks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model with persistent contrastive divergence.
    Train(TrainArgs),
    /// Generate an image grid from a trained model.
    Generate(GenerateArgs),
    /// Semi-supervised evaluation of a trained model.
    Semisup(SemisupArgs),
    /// Print architecture, weight counts, and a probe free energy.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset: synthetic:<n>[:<seed>] | idx:<dir> | dir:<path> | mnist
    #[arg(long)]
    data: Option<String>,
    /// Architecture, e.g. dense:500,dense:1000 or conv:64x12s2,conv:128x5s2,dense:512
    #[arg(long)]
    arch: Option<String>,
    /// Output directory (model.drbn, train.log, sample grids, checkpoints).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gibbs steps per update (PCD k).
    #[arg(long)]
    k: Option<usize>,
    /// Persistent particle count (PCD N).
    #[arg(long)]
    particles: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam step size.
    #[arg(long)]
    lr: Option<Real>,
    /// threshold[:tau] | bernoulli[:seed]
    #[arg(long)]
    binarize: Option<String>,
    /// Cap the number of training images.
    #[arg(long)]
    limit: Option<usize>,
    /// Rows carved off the end of the training set for the free-energy gap
    /// (0 disables the gap).
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Write a sample grid every this many epochs (0 = off).
    #[arg(long)]
    sample_every: Option<usize>,
    #[arg(long)]
    sample_count: Option<usize>,
    #[arg(long)]
    sample_steps: Option<usize>,
    #[arg(long)]
    sample_cols: Option<usize>,
    /// Write a checkpoint every this many epochs (0 = off).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Resume from a checkpoint (training flags then come from the file).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// key=value config file; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output PGM path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 10)]
    cols: usize,
}

#[derive(Args)]
struct SemisupArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labeled dataset (labels required): synthetic:<n>[:<seed>] | idx:<dir> | mnist
    #[arg(long)]
    data: String,
    /// Labeled-subset size per run.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    labels: u64,
    #[arg(long, default_value_t = 10)]
    runs: u64,
    /// frozen | finetune | plain-fc
    #[arg(long, default_value = "frozen")]
    phase: String,
    #[arg(long)]
    seed: u64,
    /// Learning rate (default 1e-3; the fine-tune pass itself uses 1e-4
    /// unless overridden).
    #[arg(long)]
    lr: Option<Real>,
    /// Supervised epochs per phase.
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// threshold[:tau] | bernoulli[:seed]
    #[arg(long)]
    binarize: Option<String>,
    /// Cap the unlabeled/test sizes (debugging aid).
    #[arg(long)]
    limit_test: Option<usize>,
    /// Metrics file (line-delimited records); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("DRBN_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Semisup(args) => cmd_semisup(args),
        Cmd::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

// ---------------------------------------------------------------------------
// Config file handling: plain key=value lines, '#' comments. Flags win.

struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    anyhow!("{}:{}: expected key=value", path.display(), lineno + 1)
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| anyhow!("config key {key}: cannot parse {raw:?}")),
        }
    }
}

fn resolve<T: FromStr>(flag: Option<T>, cfg: &FileConfig, key: &str, default: T) -> Result<T> {
    Ok(flag.or(cfg.get(key)?).unwrap_or(default))
}

fn required<T: FromStr>(flag: Option<T>, cfg: &FileConfig, key: &str) -> Result<T> {
    flag.or(cfg.get(key)?)
        .ok_or_else(|| usage_exit(&format!("--{key} is required (flag or config file)")))
}

/// Prints a usage message and exits with code 2 (usage error).
fn usage_exit(msg: &str) -> anyhow::Error {
    eprintln!("usage error: {msg}");
    eprintln!("run with --help for the full flag list");
    std::process::exit(2);
}

// ---------------------------------------------------------------------------
// Dataset specs.

fn parse_binarize(spec: Option<&str>) -> Result<BinarizeMode> {
    match spec {
        None => Ok(BinarizeMode::default()),
        Some(s) => {
            if s == "threshold" {
                Ok(BinarizeMode::default())
            } else if let Some(tau) = s.strip_prefix("threshold:") {
                Ok(BinarizeMode::Threshold(
                    tau.parse::<Real>().map_err(|_| anyhow!("bad threshold {tau:?}"))?,
                ))
            } else if s == "bernoulli" {
                Ok(BinarizeMode::Bernoulli(0))
            } else if let Some(seed) = s.strip_prefix("bernoulli:") {
                Ok(BinarizeMode::Bernoulli(
                    seed.parse::<u64>().map_err(|_| anyhow!("bad bernoulli seed {seed:?}"))?,
                ))
            } else {
                bail!("unknown binarize mode {s:?} (threshold[:tau] | bernoulli[:seed])")
            }
        }
    }
}

/// Loads `(train, test)` for a dataset spec; `test` is `None` when the
/// source has no test split. Values are raw (not yet binarized).
fn load_dataset(spec: &str) -> Result<(Dataset, Option<Dataset>)> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        let n: usize = parts
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| anyhow!("synthetic:<n>[:<seed>]: bad count in {spec:?}"))?;
        let seed: u64 = match parts.next() {
            Some(s) => s.parse().map_err(|_| anyhow!("bad synthetic seed in {spec:?}"))?,
            None => 42,
        };
        let test_n = (n / 5).max(200);
        let train = data::synthetic_digits(n, seed);
        let test = data::synthetic_digits(test_n, seed + 1);
        return Ok((train, Some(test)));
    }
    if let Some(dir) = spec.strip_prefix("idx:").map(PathBuf::from).or_else(|| {
        (spec == "mnist").then(|| {
            std::env::var("DRBN_MNIST_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|_| PathBuf::from("data/mnist"))
        })
    }) {
        let train = load_idx_split(&dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")
            .with_context(|| format!("loading IDX train split from {}", dir.display()))?;
        let test =
            load_idx_split(&dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte").ok();
        return Ok((train, test));
    }
    if let Some(root) = spec.strip_prefix("dir:").map(PathBuf::from) {
        let train_dir = if root.join("train").is_dir() {
            root.join("train")
        } else {
            root.clone()
        };
        let train = data::load_image_dir(&train_dir)?;
        let test = if root.join("test").is_dir() {
            Some(data::load_image_dir(&root.join("test"))?)
        } else {
            None
        };
        return Ok((train, test));
    }
    bail!("unknown dataset spec {spec:?} (synthetic:<n> | idx:<dir> | dir:<path> | mnist)")
}

fn load_idx_split(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let images_path = dir.join(images);
    let labels_path = dir.join(labels);
    let labels = labels_path.exists().then_some(labels_path);
    Ok(data::load_idx(&images_path, labels.as_deref())?)
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    let data_spec: String = required(args.data, &cfg, "data")?;
    let out_dir: PathBuf = required(args.out, &cfg, "out")?;
    let binarize = parse_binarize(
        resolve(args.binarize, &cfg, "binarize", String::new())
            .map(|s| if s.is_empty() { None } else { Some(s) })?
            .as_deref(),
    )?;
    let limit = resolve(args.limit, &cfg, "limit", usize::MAX)?;
    let heldout_n = resolve(args.heldout, &cfg, "heldout", 512)?;
    let sample_every = resolve(args.sample_every, &cfg, "sample-every", 1)?;
    let sample_count = resolve(args.sample_count, &cfg, "sample-count", 25)?;
    let sample_steps = resolve(args.sample_steps, &cfg, "sample-steps", 200)?;
    let sample_cols = resolve(args.sample_cols, &cfg, "sample-cols", 5)?;
    let checkpoint_every = resolve(args.checkpoint_every, &cfg, "checkpoint-every", 1)?;

    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    let (train_ds, _) = load_dataset(&data_spec)?;
    let train_ds = train_ds.binarize(binarize)?;
    let all_rows = train_ds.take(limit.min(train_ds.len()))?.rows();

    // Carve the free-energy-gap batch off the end of the training rows.
    let n = all_rows.rows();
    let heldout_n = heldout_n.min(n.saturating_sub(1));
    let train_n = n - heldout_n;
    let train_idx: Vec<u32> = (0..train_n as u32).collect();
    let held_idx: Vec<u32> = (train_n as u32..n as u32).collect();
    let train_rows = all_rows.gather_rows(&train_idx)?;
    let heldout_rows = if heldout_n > 0 {
        Some(all_rows.gather_rows(&held_idx)?)
    } else {
        None
    };

    let mut trainer = match &args.resume {
        Some(ckpt) => {
            let trainer = persistence::load_checkpoint(ckpt)?;
            eprintln!(
                "resumed from {} at epoch {} step {}",
                ckpt.display(),
                trainer.epoch(),
                trainer.global_step()
            );
            trainer
        }
        None => {
            let arch: String = required(args.arch, &cfg, "arch")?;
            let seed: u64 = required(args.seed, &cfg, "seed")?;
            let input_shape = [train_ds.height(), train_ds.width(), 1];
            let spec = NetworkSpec::parse(&arch, input_shape)?;
            let train_config = TrainConfig {
                gibbs_steps: resolve(args.k, &cfg, "k", 5)?,
                n_particles: resolve(args.particles, &cfg, "particles", 100)?,
                minibatch: resolve(args.batch, &cfg, "batch", 100)?,
                epochs: resolve(args.epochs, &cfg, "epochs", 1)?,
                adam: AdamParams::with_step_size(resolve(args.lr, &cfg, "lr", 1e-3)?),
                seed,
                log_every: resolve(args.log_every, &cfg, "log-every", 10)?,
                eval_every: resolve(args.eval_every, &cfg, "eval-every", 50)?,
            };
            let root = RngStream::from_seed(seed);
            let net = spec.build(&root.split(STREAM_WEIGHTS))?;
            eprintln!(
                "built {} ({} weights) for {} training rows",
                arch,
                spec.weight_count(),
                train_rows.rows()
            );
            Trainer::new(net, train_config)?
        }
    };

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("train.log"))
        .with_context(|| "opening train.log")?;

    let eval_root = RngStream::from_seed(trainer.config().seed).split(STREAM_EVAL);
    while !trainer.is_finished() {
        let stats = trainer.fit_epoch(&train_rows, heldout_rows.as_ref(), Some(&mut log))?;
        let epoch = stats.epoch + 1;
        eprintln!(
            "epoch {epoch}: mean losses {:?} fe_gap {:?}",
            stats.mean_losses, stats.fe_gap
        );
        if sample_every > 0 && (epoch as usize) % sample_every == 0 {
            let grid = trainer.net().generate(
                sample_count,
                sample_steps,
                &eval_root.split(stats.epoch),
            )?;
            let (h, w) = (train_ds.height(), train_ds.width());
            let images = grid.reshape(&[sample_count, h, w])?;
            data::export_grid(
                &images,
                sample_cols,
                &out_dir.join(format!("samples_epoch_{epoch}.pgm")),
            )?;
        }
        if checkpoint_every > 0 && (epoch as usize) % checkpoint_every == 0 {
            persistence::save_checkpoint(&trainer, &out_dir.join("checkpoint.drbnck"))?;
        }
    }
    persistence::save_model(trainer.net(), &out_dir.join("model.drbn"))?;
    eprintln!("saved {}", out_dir.join("model.drbn").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    if args.steps == 0 || args.count == 0 {
        return Err(usage_exit("--steps and --count must be at least 1"));
    }
    let net = persistence::load_model(&args.model)?;
    let rows = net.generate(args.count, args.steps, &RngStream::from_seed(args.seed))?;
    let (h, w) = match net.visible_image_shape() {
        Some([h, w, 1]) => (h, w),
        Some(shape) => bail!("cannot export {shape:?} multi-channel images as PGM"),
        None => {
            // Dense-front models: assume square images.
            let side = (net.visible_len() as f64).sqrt() as usize;
            if side * side != net.visible_len() {
                bail!(
                    "visible layer of {} units is not a square image; cannot tile",
                    net.visible_len()
                );
            }
            (side, side)
        }
    };
    let images = rows.reshape(&[args.count, h, w])?;
    data::export_grid(&images, args.cols, &args.out)?;
    eprintln!(
        "wrote {} ({} images, {} Gibbs steps)",
        args.out.display(),
        args.count,
        args.steps
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// semisup

fn cmd_semisup(args: SemisupArgs) -> Result<()> {
    let net = persistence::load_model(&args.model)?;
    let binarize = parse_binarize(args.binarize.as_deref())?;
    let (train_ds, test_ds) = load_dataset(&args.data)?;
    let train_ds = train_ds.binarize(binarize)?;
    let test_ds = test_ds
        .ok_or_else(|| anyhow!("dataset {} has no test split", args.data))?
        .binarize(binarize)?;
    let train_labels = train_ds
        .labels
        .clone()
        .ok_or_else(|| anyhow!("dataset {} has no labels", args.data))?;
    let test_labels = test_ds
        .labels
        .clone()
        .ok_or_else(|| anyhow!("test split of {} has no labels", args.data))?;

    let limit_test = args.limit_test.unwrap_or(usize::MAX).min(test_ds.len());
    let test_rows = test_ds.take(limit_test)?.rows();
    let test_labels = &test_labels[..limit_test];

    if args.labels as usize > train_ds.len() {
        return Err(usage_exit(&format!(
            "--labels {} exceeds the {} available training images",
            args.labels,
            train_ds.len()
        )));
    }

    let model_name = args
        .model
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mut out: Box<dyn std::io::Write> = match &args.out {
        Some(path) => Box::new(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ),
        None => Box::new(std::io::stdout()),
    };

    let test_features = extract_features(&net, &test_rows)?;
    let root = RngStream::from_seed(args.seed);
    let train_rows_all = train_ds.rows();
    let mut errors = Vec::new();
    for run in 0..args.runs {
        // Each run draws its own labeled subset and its own training stream.
        let mut subset_rng = root.split(run);
        let mut order: Vec<u32> = (0..train_ds.len() as u32).collect();
        subset_rng.shuffle(&mut order);
        let subset: Vec<u32> = order[..args.labels as usize].to_vec();
        let x = train_rows_all.gather_rows(&subset)?;
        let y: Vec<u8> = subset.iter().map(|&i| train_labels[i as usize]).collect();
        let mut run_rng = root.split(1_000 + run);

        let lr = args.lr.unwrap_or(1e-3);
        let head_cfg = HeadConfig {
            epochs: args.epochs,
            adam: AdamParams::with_step_size(lr),
            ..Default::default()
        };
        let (phase_name, test_error) = match args.phase.as_str() {
            "frozen" => {
                let feats = extract_features(&net, &x)?;
                let (_, metrics) = train_head(
                    &feats,
                    &y,
                    &test_features,
                    test_labels,
                    &head_cfg,
                    &mut run_rng,
                )?;
                ("frozen", metrics.test_error)
            }
            "finetune" => {
                let feats = extract_features(&net, &x)?;
                let (mut head, _) = train_head(
                    &feats,
                    &y,
                    &test_features,
                    test_labels,
                    &head_cfg,
                    &mut run_rng,
                )?;
                let mut tuned = net.clone();
                let ft_cfg = HeadConfig {
                    epochs: args.epochs,
                    adam: AdamParams::with_step_size(args.lr.unwrap_or(1e-4)),
                    ..Default::default()
                };
                let metrics = fine_tune(
                    &mut tuned,
                    &mut head,
                    &x,
                    &y,
                    &test_rows,
                    test_labels,
                    &ft_cfg,
                    &mut run_rng.split(1),
                )?;
                ("finetune", metrics.test_error)
            }
            "plain-fc" => {
                let sizes: Vec<usize> = net
                    .spec()
                    .layers
                    .iter()
                    .map(|l| match l {
                        LayerSpec::Dense { hidden, .. } => Ok(*hidden),
                        LayerSpec::Conv { .. } => {
                            Err(anyhow!("plain-fc baseline needs a dense backbone"))
                        }
                    })
                    .collect::<Result<_>>()?;
                let metrics = plain_fc_baseline(
                    &x,
                    &y,
                    &test_rows,
                    test_labels,
                    &sizes,
                    &head_cfg,
                    &mut run_rng,
                )?;
                ("plain-fc", metrics.test_error)
            }
            other => return Err(usage_exit(&format!("unknown phase {other:?}"))),
        };
        let record = metric_line(
            args.labels as usize,
            &model_name,
            phase_name,
            args.seed + run,
            test_error,
        );
        writeln!(out, "{record}")?;
        errors.push(test_error);
    }
    let mean: Real = errors.iter().sum::<Real>() / errors.len() as Real;
    let var: Real =
        errors.iter().map(|e| (e - mean) * (e - mean)).sum::<Real>() / errors.len() as Real;
    writeln!(
        out,
        "summary labels_used={} model={} phase={} runs={} mean_error={:.4} std_error={:.4}",
        args.labels,
        model_name,
        args.phase,
        args.runs,
        mean,
        var.sqrt()
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let net = persistence::load_model(&args.model)?;
    let spec = net.spec();
    println!("{}", args.model.display());
    println!("layers: {}", net.depth());
    for (l, layer_spec) in spec.layers.iter().enumerate() {
        match layer_spec {
            LayerSpec::Dense { visible, hidden } => {
                println!(
                    "  layer {l}: dense {visible} -> {hidden} ({} weights)",
                    layer_spec.weight_count()
                );
            }
            LayerSpec::Conv {
                in_shape,
                filters,
                filter_size,
                stride,
            } => {
                let g = layer_spec.geometry().expect("stored model is valid");
                println!(
                    "  layer {l}: conv {}x{}x{} -> {}x{}x{} ({filters} filters {filter_size}x{filter_size}, stride {stride}, {} weights)",
                    in_shape[0],
                    in_shape[1],
                    in_shape[2],
                    g.out_h(),
                    g.out_w(),
                    g.filters,
                    layer_spec.weight_count()
                );
            }
        }
    }
    println!("total weights: {}", spec.weight_count());

    let probe = probe_free_energy(&net, args.probe_seed)?;
    println!("probe free energy (layer 0, 64 noise rows, seed {}): {probe:.4}", args.probe_seed);
    Ok(())
}

fn probe_free_energy(net: &Drbn, seed: u64) -> Result<Real> {
    let mut rng = RngStream::from_seed(seed);
    let noise = Tensor::filled(&[64, net.visible_len()], 0.5);
    let probe = drbn_core::math::bernoulli_sample(&noise, &mut rng)?;
    Ok(net.layers()[0].free_energy_rows(&probe)?.mean())
}
