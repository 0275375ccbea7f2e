//! Command-line front end: generate, train, eval, visualize.
//!
//! Exit codes: 0 success, 2 usage/config/data error, 3 numeric failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::data::{self, DatasetBundle, DatasetKind};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions};
use crate::rng::{self, fork};
use crate::tag::{self, EvalNoise};
use crate::train::{self, Checkpoint, EpochRecord, TrainConfig, Trainer};
use crate::viz::{self, ImageFormat};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Example counts when `--count` is omitted.
pub const TEXTURED_SPLITS: [(&str, usize); 3] = [("train", 50_000), ("val", 10_000), ("test", 10_000)];
pub const SHAPES_SPLITS: [(&str, usize); 2] = [("train", 60_000), ("test", 10_000)];

#[derive(Parser, Debug)]
#[command(name = "tagger", version, about = "Perceptual grouping with iterative amortized inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Shapes,
    Tmnist1,
    Tmnist2,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Shapes => DatasetKind::Shapes,
            DatasetArg::Tmnist1 => DatasetKind::TexturedMnist1,
            DatasetArg::Tmnist2 => DatasetKind::TexturedMnist2,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset as a TAGD container.
    Generate {
        #[arg(long, value_enum)]
        dataset: DatasetArg,
        /// Examples to generate; omitted, standard splits are written to
        /// OUT.train/OUT.val/OUT.test.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory with the four MNIST IDX files (textured datasets).
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.tagd, metrics.tsv and manifest.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Validation set; defaults to a held-out tail of --data.
        #[arg(long)]
        val: Option<PathBuf>,
        /// `none`, `budget` (label_budget random examples) or a file of indices.
        #[arg(long, default_value = "none")]
        labels: String,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint: per-iteration cost, AMI, classification error.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        groups: Option<usize>,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop the corruption variance from the likelihood at evaluation.
        #[arg(long)]
        zero_noise: bool,
    },
    /// Render per-iteration panels for one example.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        example_index: usize,
        /// Suppress this group at the last iteration and render the result.
        #[arg(long)]
        ablate_group: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write binary PPM instead of PNG.
        #[arg(long)]
        ppm: bool,
    },
}

/// Maps an error to the exit-code contract.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing normal output to `out`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Ok(v) = std::env::var("TAGGER_THREADS") {
        if v.trim().parse::<usize>().map_or(true, |n| n == 0) {
            eprintln!("error: TAGGER_THREADS must be a positive integer, got {v:?}");
            return EXIT_USAGE;
        }
    }
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: Command, out: &mut dyn std::io::Write) -> Result<()> {
    match cmd {
        Command::Generate {
            dataset,
            count,
            seed,
            mnist_dir,
            out: path,
        } => generate(dataset.into(), count, seed, mnist_dir.as_deref(), &path, out),
        Command::Train {
            config,
            data,
            val,
            labels,
            resume,
            out: dir,
        } => train_cmd(&config, &data, val.as_deref(), &labels, resume.as_deref(), &dir, out),
        Command::Eval {
            checkpoint,
            data,
            iterations,
            groups,
            report,
            batch,
            seed,
            zero_noise,
        } => {
            let noise = if zero_noise { EvalNoise::Zero } else { EvalNoise::Keep };
            eval_cmd(&checkpoint, &data, iterations, groups, report.as_deref(), batch, seed, noise, out)
        }
        Command::Visualize {
            checkpoint,
            data,
            example_index,
            ablate_group,
            out_dir,
            iterations,
            groups,
            seed,
            ppm,
        } => {
            let format = if ppm { ImageFormat::Ppm } else { ImageFormat::Png };
            visualize(&checkpoint, &data, example_index, ablate_group, &out_dir, iterations, groups, seed, format, out)
        }
    }
}

/// Provenance written beside every artifact.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started: u64,
    pub finished: u64,
}

/// Git-style object hash (`blob <len>\0<content>`) with SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config: None,
            config_hash: None,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: now(),
            finished: 0,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        if let Some(c) = &self.config {
            let _ = writeln!(s, "config={}", c.display());
        }
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "config_hash={h}");
        }
        let _ = writeln!(s, "seed={}", self.seed);
        for p in &self.inputs {
            let _ = writeln!(s, "input={}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output={}", p.display());
        }
        let _ = writeln!(s, "started={}", self.started);
        let _ = writeln!(s, "finished={}", self.finished);
        s
    }

    fn write(&mut self, path: &Path) -> Result<()> {
        self.finished = now();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn generate(
    kind: DatasetKind,
    count: Option<usize>,
    seed: u64,
    mnist_dir: Option<&Path>,
    path: &Path,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let mut manifest = RunManifest::new(&format!("generate {kind}"), seed);
    let digits = match kind {
        DatasetKind::Shapes => None,
        _ => {
            let dir = mnist_dir.ok_or_else(|| Error::Config(format!("--mnist-dir is required for {kind}")))?;
            manifest.inputs.push(dir.to_path_buf());
            Some(data::mnist_splits(dir)?)
        }
    };
    let make = |n: usize, split: usize, seed: u64| -> Result<DatasetBundle> {
        match (&digits, kind) {
            (None, _) => data::generate_shapes(n, seed),
            (Some(pools), DatasetKind::TexturedMnist1) => data::generate_textured_mnist(n, 1, &pools[split], seed),
            (Some(pools), _) => data::generate_textured_mnist(n, 2, &pools[split], seed),
        }
    };
    let jobs: Vec<(PathBuf, usize, usize, u64)> = match count {
        Some(0) => return Err(Error::Config("--count must be positive".into())),
        Some(n) => vec![(path.to_path_buf(), n, 0, seed)],
        None => {
            let splits: &[(&str, usize)] = if kind == DatasetKind::Shapes { &SHAPES_SPLITS } else { &TEXTURED_SPLITS };
            splits
                .iter()
                .map(|&(name, n)| {
                    let pool = ["train", "val", "test"].iter().position(|s| *s == name).unwrap();
                    (with_suffix(path, &format!(".{name}")), n, pool, fork(seed, pool as u64))
                })
                .collect()
        }
    };
    for (p, n, pool, s) in jobs {
        let bundle = make(n, pool, s)?;
        bundle.save(&p)?;
        let _ = writeln!(out, "wrote {} examples to {}", n, p.display());
        manifest.outputs.push(p);
    }
    manifest.write(&with_suffix(path, ".manifest"))
}

fn train_cmd(
    config_path: &Path,
    data_path: &Path,
    val_path: Option<&Path>,
    labels: &str,
    resume: Option<&Path>,
    dir: &Path,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let config_bytes = std::fs::read(config_path).map_err(|e| Error::io(config_path, e))?;
    let config = TrainConfig::parse(&String::from_utf8_lossy(&config_bytes))?;
    let mut manifest = RunManifest::new("train", config.seed);
    manifest.config = Some(config_path.to_path_buf());
    manifest.config_hash = Some(content_hash(&config_bytes));
    manifest.inputs.push(data_path.to_path_buf());

    let mut data = DatasetBundle::load(data_path)?;
    if config.limit > 0 && config.limit < data.len() {
        data = data.subset(0..config.limit)?;
    }
    let val = match val_path {
        Some(p) => {
            manifest.inputs.push(p.to_path_buf());
            DatasetBundle::load(p)?
        }
        None => {
            let held = (data.len() as f64 * config.validation_fraction).round() as usize;
            if held == 0 || held >= data.len() {
                return Err(Error::Config(format!(
                    "cannot hold out {held} of {} examples for validation; pass --val",
                    data.len()
                )));
            }
            let cut = data.len() - held;
            let v = data.subset(cut..data.len())?;
            data = data.subset(0..cut)?;
            v
        }
    };
    let labeled = match labels {
        "none" => None,
        "budget" => Some(train::label_budget_indices(data.len(), config.label_budget, config.seed)),
        path => {
            manifest.inputs.push(PathBuf::from(path));
            Some(train::read_label_indices(path)?)
        }
    };
    let mut trainer = match resume {
        Some(p) => {
            manifest.inputs.push(p.to_path_buf());
            Trainer::resume(config.clone(), Checkpoint::load(p)?)?
        }
        None => Trainer::new(config.clone(), data.kind, data.input_size())?,
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt_path = dir.join("checkpoint.tagd");
    let metrics_path = dir.join("metrics.tsv");
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?
    } else {
        EpochRecord::tsv_header(config.eval_iterations)
    };
    std::fs::write(&metrics_path, &metrics).map_err(|e| Error::io(&metrics_path, e))?;
    manifest.outputs.extend([ckpt_path.clone(), metrics_path.clone()]);

    let result = trainer.train(&data, Some(&val), labeled.as_deref(), |t, rec| {
        t.checkpoint().save(&ckpt_path)?;
        metrics.push_str(&rec.tsv_row());
        std::fs::write(&metrics_path, &metrics).map_err(|e| Error::io(&metrics_path, e))?;
        let _ = write!(out, "{}", rec.tsv_row());
        Ok(())
    });
    match result {
        Ok(_) => {}
        // The trainer rolled back to the last good epoch; keep that state
        // on disk even if no epoch finished.
        Err(e @ Error::Diverged { .. }) => {
            if !ckpt_path.exists() {
                trainer.checkpoint().save(&ckpt_path)?;
            }
            manifest.write(&dir.join("manifest.txt"))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    }
    if !ckpt_path.exists() {
        trainer.checkpoint().save(&ckpt_path)?;
    }
    manifest.write(&dir.join("manifest.txt"))
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    checkpoint: &Path,
    data_path: &Path,
    iterations: Option<usize>,
    groups: Option<usize>,
    report_path: Option<&Path>,
    batch: usize,
    seed: u64,
    eval_noise: EvalNoise,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = DatasetBundle::load(data_path)?;
    let default_t = ckpt.train.as_ref().map_or(5, |t| t.eval_iterations);
    let opts = EvalOptions {
        groups: groups.unwrap_or(ckpt.model.config.groups),
        iterations: iterations.unwrap_or(default_t),
        batch,
        seed,
        eval_noise,
    };
    if opts.groups == 0 || opts.iterations == 0 {
        return Err(Error::Config("--groups and --iterations must be positive".into()));
    }
    let report = eval::evaluate(&ckpt.model, &data, &opts)?;
    if report.ami.is_none() {
        eprintln!("notice: {} has no ground-truth segmentation; AMI skipped", data_path.display());
    }
    let text = report.to_tsv();
    let _ = write!(out, "{text}");
    if let Some(p) = report_path {
        std::fs::write(p, &text).map_err(|e| Error::io(p, e))?;
        let mut manifest = RunManifest::new("eval", seed);
        manifest.inputs = vec![checkpoint.to_path_buf(), data_path.to_path_buf()];
        manifest.outputs.push(p.to_path_buf());
        manifest.write(&with_suffix(p, ".manifest"))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn visualize(
    checkpoint: &Path,
    data_path: &Path,
    index: usize,
    ablate: Option<usize>,
    dir: &Path,
    iterations: Option<usize>,
    groups: Option<usize>,
    seed: u64,
    format: ImageFormat,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = DatasetBundle::load(data_path)?;
    if index >= data.len() {
        return Err(Error::Config(format!("--example-index {index} outside 0..{}", data.len())));
    }
    let model = &ckpt.model;
    let default_t = ckpt.train.as_ref().map_or(5, |t| t.eval_iterations);
    let mut opts = model.eval_options(groups.unwrap_or(model.config.groups), iterations.unwrap_or(default_t));
    if let Some(k) = ablate {
        if k >= opts.groups {
            return Err(Error::Config(format!("--ablate-group {k} outside 0..{}", opts.groups)));
        }
    }
    let x = data.batch(&[index]);
    let init = model.init_state(&x, opts.groups, &mut rng::derived(seed, index as u64))?;
    let traj = model.run_from(&x, &x, &init, &opts)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = RunManifest::new("visualize", seed);
    manifest.inputs = vec![checkpoint.to_path_buf(), data_path.to_path_buf()];
    let ext = format.extension();
    for (i, img) in viz::render_trajectory(&traj, 0, data.height, data.width)?.iter().enumerate() {
        let p = dir.join(format!("iteration_{}.{ext}", i + 1));
        img.write(&p, format)?;
        manifest.outputs.push(p);
    }
    if let Some(k) = ablate {
        opts.ablate = Some(k);
        let ablated = model.run_from(&x, &x, &init, &opts)?;
        let last = ablated.last();
        let violation = tag::simplex_violation(&last.m);
        let p = dir.join(format!("ablated_group_{k}.{ext}"));
        viz::state_panels(last, 0, data.height, data.width)?.write(&p, format)?;
        manifest.outputs.push(p);
        let _ = writeln!(out, "ablated group {k}: simplex violation {violation:.3e}");
    }
    for p in &manifest.outputs {
        let _ = writeln!(out, "wrote {}", p.display());
    }
    manifest.write(&dir.join("manifest.txt"))
}
