//! The `awe` command line: data generation, pair construction, training,
//! evaluation and baselines.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::corpus::{
    generate_synthetic_corpus, load_dataset, make_balanced_pairs, make_random_pairs, save_dataset, simulate_utd_pairs,
    split_per_type, Dataset, PairList, SynthConfig,
};
use crate::eval::{downsample_embedding, dtw_cost_with, evaluate_embeddings, evaluate_model, evaluate_with, DtwOptions, EvalReport, FrameDistance, PairSelection};
use crate::training::{Checkpoint, TrainConfig, TrainOutcome, Trainer};
use crate::Real;

#[derive(Debug, Parser)]
#[command(name = "awe", version, about = "Acoustic word embeddings from noisy word pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus split into train/, val/ and test/, with
    /// its settings in synth.json.
    GenData(GenDataArgs),
    /// Build a training pair list over a dataset.
    Pairs(PairsArgs),
    /// Unsupervised pre-training (kind vae or ae).
    Pretrain(TrainArgs),
    /// Correspondence training on a pair list.
    Train(TrainArgs),
    /// Same-different evaluation of a checkpoint's encoder.
    Eval(EvalArgs),
    /// Same-different evaluation of a training-free baseline.
    Baseline(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub types: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub warp: Option<f64>,
    #[arg(long)]
    pub speaker_offset: Option<f64>,
    /// Append delta and delta-delta features.
    #[arg(long)]
    pub deltas: bool,
    /// Instances of every type held out for validation.
    #[arg(long, default_value_t = 4)]
    pub val_per_type: usize,
    /// Instances of every type held out for testing.
    #[arg(long, default_value_t = 4)]
    pub test_per_type: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairKind {
    Random,
    Balanced,
    Utd,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = PairKind::Random)]
    pub kind: PairKind,
    #[arg(short, long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mismatch rate for `--kind utd`.
    #[arg(long, default_value_t = 0.3)]
    pub noise_rate: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset directory used for model selection.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Pair list (ids from the training dataset); required by `train`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Starting checkpoint; overrides `init` in the config.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue from a checkpoint with resume state (such as last.ckpt).
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Output directory for best.ckpt, last.ckpt and metrics.log.
    #[arg(long)]
    pub out: PathBuf,
    /// Repeat the run once per seed (overriding the config's seed), each
    /// in `<out>/seed-<s>/`, and print the mean and standard deviation of
    /// the best validation AP.
    #[arg(long, value_delimiter = ',', conflicts_with = "resume")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct Selection {
    /// Score a uniform sample of at most this many pairs instead of all.
    #[arg(long)]
    pub max_pairs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the precision-recall curve here.
    #[arg(long)]
    pub pr_tsv: Option<PathBuf>,
}

impl Selection {
    fn pairs(&self) -> PairSelection {
        match self.max_pairs {
            Some(max_pairs) => PairSelection::Sample { max_pairs, seed: self.seed },
            None => PairSelection::All,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub selection: Selection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Downsample,
    Dtw,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(value_enum)]
    pub method: BaselineKind,
    #[arg(long)]
    pub data: PathBuf,
    /// Frames kept by downsampling.
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    /// Use Euclidean instead of cosine frame distance for DTW.
    #[arg(long)]
    pub euclidean: bool,
    /// Do not divide DTW path costs by path length.
    #[arg(long)]
    pub unnormalized: bool,
    #[command(flatten)]
    pub selection: Selection,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pairs(a) => pairs(a),
        Command::Pretrain(a) => train(a, false, out),
        Command::Train(a) => train(a, true, out),
        Command::Eval(a) => eval(a, out),
        Command::Baseline(a) => baseline(a, out),
    }
}

fn load(dir: &Path) -> Result<Dataset<Real>> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut config = SynthConfig { seed: a.seed, deltas: a.deltas, ..SynthConfig::default() };
    if let Some(v) = a.types {
        config.num_types = v;
    }
    if let Some(v) = a.instances {
        config.instances_per_type = v;
    }
    if let Some(v) = a.noise {
        config.noise = v;
    }
    if let Some(v) = a.warp {
        config.warp = v;
    }
    if let Some(v) = a.speaker_offset {
        config.speaker_offset = v;
    }
    let data = generate_synthetic_corpus::<Real>(&config)?;
    let (train, val, test) = split_per_type(&data, a.val_per_type, a.test_per_type)?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        let dir = a.out.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        save_dataset(part, &dir)?;
    }
    let settings = a.out.join("synth.json");
    fs::write(&settings, serde_json::to_string_pretty(&config)? + "\n").with_context(|| format!("writing {}", settings.display()))?;
    Ok(())
}

fn pairs(a: PairsArgs) -> Result<()> {
    let index = load(&a.data)?.index();
    let list = match a.kind {
        PairKind::Random => make_random_pairs(&index, a.n, a.seed)?,
        PairKind::Balanced => make_balanced_pairs(&index, a.n, a.seed)?,
        PairKind::Utd => simulate_utd_pairs(&index, a.n, a.noise_rate, a.seed)?,
    };
    list.save(&a.out)?;
    Ok(())
}

fn train(a: TrainArgs, correspondence: bool, out: &mut dyn Write) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut config = TrainConfig::parse(&text).with_context(|| format!("in {}", a.config.display()))?;
    if config.kind.uses_pairs() != correspondence {
        let want = if correspondence { "a correspondence" } else { "a pre-training" };
        bail!("{}: kind {} is not {want} objective", a.config.display(), config.kind);
    }
    if a.init.is_some() {
        config.init = a.init.clone();
    }
    let train = load(&a.data)?;
    let val = match &a.val {
        Some(dir) => load(dir)?.segments,
        None => Vec::new(),
    };
    let pairs: Vec<(usize, usize)> = match (&a.pairs, correspondence) {
        (Some(path), true) => {
            let list = PairList::load(path, &train.index())?;
            list.pairs.iter().map(|(x, y)| (position(&train, x), position(&train, y))).collect()
        }
        (None, true) => bail!("train needs --pairs"),
        (Some(_), false) => bail!("pretrain does not use --pairs"),
        (None, false) => Vec::new(),
    };
    let init = match &config.init {
        Some(path) => Some(Checkpoint::<Real>::load(path).with_context(|| format!("loading {}", path.display()))?.model),
        None => None,
    };

    if a.seeds.is_empty() {
        let trainer = match &a.resume {
            Some(path) => {
                let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
                Trainer::resume(config, &train.segments, &pairs, &val, &ckpt)?
            }
            None => Trainer::new(config, &train.segments, &pairs, &val, init.as_ref())?,
        };
        run_to(trainer, &a.out, a.resume.is_some())?;
        return Ok(());
    }
    if val.len() < 2 {
        bail!("--seeds needs a validation set of at least two segments");
    }
    let mut best = Vec::new();
    for &seed in &a.seeds {
        let config = TrainConfig { seed, ..config.clone() };
        let trainer = Trainer::new(config, &train.segments, &pairs, &val, init.as_ref())?;
        let outcome = run_to(trainer, &a.out.join(format!("seed-{seed}")), false)?;
        let ap = outcome.best.best_val_ap.unwrap_or(f64::NAN);
        writeln!(out, "seed {seed} best_val_ap {ap:.2}")?;
        best.push(ap);
    }
    let n = best.len() as f64;
    let mean = best.iter().sum::<f64>() / n;
    let std = (best.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    writeln!(out, "best_val_ap_mean {mean:.2}\nbest_val_ap_std {std:.2}")?;
    Ok(())
}

/// Runs to completion, writing best.ckpt, last.ckpt and metrics.log into
/// `dir`.
fn run_to(trainer: Trainer<'_, Real>, dir: &Path, append_log: bool) -> Result<TrainOutcome<Real>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let log_path = dir.join("metrics.log");
    let file = if append_log { File::options().append(true).create(true).open(&log_path) } else { File::create(&log_path) };
    let mut log = BufWriter::new(file.with_context(|| format!("opening {}", log_path.display()))?);
    let outcome = trainer.run(&mut log)?;
    log.flush()?;
    outcome.best.save(&dir.join("best.ckpt"))?;
    outcome.last.save(&dir.join("last.ckpt"))?;
    Ok(outcome)
}

fn position(data: &Dataset<Real>, id: &str) -> usize {
    // PairList::load already checked every id against the index.
    data.position(id).expect("pair id present in dataset")
}

fn report(r: &EvalReport<Real>, selection: &Selection, out: &mut dyn Write) -> Result<()> {
    if let Some(path) = &selection.pr_tsv {
        fs::write(path, r.curve.to_tsv()).with_context(|| format!("writing {}", path.display()))?;
    }
    out.write_all(r.summary().as_bytes())?;
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::<Real>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = load(&a.data)?;
    if data.dim != ckpt.model.config.feature_dim {
        bail!("dataset has dimension {}, model expects {}", data.dim, ckpt.model.config.feature_dim);
    }
    let segments: Vec<_> = data.segments.iter().collect();
    let r = evaluate_model(&ckpt.model.encoder, &segments, a.selection.pairs())?;
    report(&r, &a.selection, out)
}

fn baseline(a: BaselineArgs, out: &mut dyn Write) -> Result<()> {
    let data = load(&a.data)?;
    let segments: Vec<_> = data.segments.iter().collect();
    let r = match a.method {
        BaselineKind::Downsample => {
            if a.frames == 0 {
                bail!("--frames must be positive");
            }
            let emb: Vec<Vec<Real>> = segments.iter().map(|s| downsample_embedding(s, a.frames)).collect();
            evaluate_embeddings(&segments, &emb, a.selection.pairs())?
        }
        BaselineKind::Dtw => {
            let options = DtwOptions {
                distance: if a.euclidean { FrameDistance::Euclidean } else { FrameDistance::Cosine },
                normalize: !a.unnormalized,
            };
            evaluate_with(&segments, a.selection.pairs(), |i, j| dtw_cost_with(segments[i], segments[j], options))?
        }
    };
    report(&r, &a.selection, out)
}
