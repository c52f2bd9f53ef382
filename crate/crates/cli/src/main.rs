use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sparsegan::aam::{self, Upsample};
use sparsegan::checkpoint::Checkpoint;
use sparsegan::config::RunConfig;
use sparsegan::gradsuite::{self, Scale};
use sparsegan::scoring::{self, classify};
use sparsegan::synth::{self, Split};
use sparsegan::training::{self, Mode, Models};

const CHECKPOINT: &str = "checkpoint.spgn";
const TRAIN_LOG: &str = "train-log.csv";
const RUN_CONFIG: &str = "run-config.txt";

#[derive(Parser)]
#[command(name = "sparsegan", version, about = "Sparse-GAN anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Config override `key=value`; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic corpus.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train, calibrate the threshold on val, write checkpoint and log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a split and write summary and per-sample CSVs.
    Eval {
        /// Checkpoint file or training output directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one PGM image.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Write the activation map and overlay of one PGM image.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and the full objective.
    Gradcheck {
        #[arg(long, default_value = "desk")]
        scale: Scale,
    },
}

/// Files and directories written by a command; removed unless committed.
#[derive(Default)]
struct Outputs {
    files: Vec<PathBuf>,
    dir: Option<PathBuf>,
    committed: bool,
}

impl Outputs {
    /// Takes ownership of `dir` if this call creates it.
    fn in_dir(dir: &Path) -> Result<Self> {
        let mut o = Outputs::default();
        if !dir.exists() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            o.dir = Some(dir.to_path_buf());
        }
        Ok(o)
    }

    fn write(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
        self.files.push(path.clone());
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    fn track(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(d) = &self.dir {
            let _ = fs::remove_dir_all(d);
        }
    }
}

fn run_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for kv in &overrides.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set {kv:?}: expected key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

fn load_models(ckpt: &Path) -> Result<(Checkpoint, Models, Mode)> {
    let path = checkpoint_path(ckpt);
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let models = Models::from_checkpoint(&ck)?;
    let mode = training::saved_config(&ck)?.mode;
    Ok((ck, models, mode))
}

fn require_phi(ck: &Checkpoint) -> Result<f64> {
    ck.phi.context("checkpoint has no calibrated threshold")
}

fn gen_data(spec: Option<&Path>, out: &Path, overrides: &Overrides) -> Result<()> {
    let cfg = run_config(spec, overrides)?;
    let entries = synth::build_corpus(&cfg.corpus, out)?;
    if let Err(e) = fs::write(out.join(RUN_CONFIG), cfg.echo()) {
        let _ = fs::remove_dir_all(out);
        return Err(e.into());
    }
    println!("wrote {} images to {}", entries.len(), out.display());
    Ok(())
}

fn train(
    mut cfg: RunConfig,
    data: &Path,
    out: &Path,
) -> Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        bail!("output directory {} is not empty", out.display());
    }
    let corpus = synth::load_corpus(data, cfg.generator.input_side)?;
    cfg.corpus.side = cfg.generator.input_side;
    let mut outputs = Outputs::in_dir(out)?;
    outputs.write(out.join(RUN_CONFIG), cfg.echo())?;

    let start = Instant::now();
    let models = Models::with_sparsity(cfg.generator.clone(), cfg.sparsity(), cfg.train.seed)?;
    let outcome = training::train_models(&corpus.train, &corpus.val, models, &cfg.train)?;
    outputs.track(out.join(TRAIN_LOG));
    outcome.log.write_csv(&out.join(TRAIN_LOG))?;
    outputs.track(out.join(CHECKPOINT));
    outcome.checkpoint.save(&out.join(CHECKPOINT))?;
    outputs.commit();

    if let Some(last) = outcome.log.epoch_means().last() {
        println!("final epoch means: {}", last);
    }
    match outcome.checkpoint.phi {
        Some(phi) => println!("phi={phi:.6}"),
        None => println!("phi=uncalibrated"),
    }
    println!(
        "trained {} for {} epochs in {:.1}s; wrote {}",
        cfg.train.mode,
        cfg.train.epochs,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, split: Split, out: Option<&Path>) -> Result<()> {
    let (ck, models, mode) = load_models(ckpt)?;
    let phi = require_phi(&ck)?;
    let corpus = synth::load_corpus(data, models.generator_config().input_side)?;
    let samples = corpus.split(split);
    let (summary, reports) = scoring::evaluate(&models, samples, phi, mode.score_mode())?;

    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint_path(ckpt)
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    let mut outputs = Outputs::in_dir(&dir)?;
    outputs.write(
        dir.join(format!("eval-{split}.csv")),
        format!("{}\n{}\n", scoring::EvalSummary::CSV_HEADER, summary.csv_row()),
    )?;
    outputs.write(dir.join(format!("scores-{split}.csv")), scoring::scores_csv(&reports))?;
    outputs.commit();
    println!("{mode} {split}: {summary}");
    Ok(())
}

fn score(ckpt: &Path, image: &Path) -> Result<()> {
    let (ck, models, mode) = load_models(ckpt)?;
    let phi = require_phi(&ck)?;
    let sample = synth::load_image(image, models.generator_config().input_side)?;
    let s = scoring::anomaly_score(&models, &sample.tensor(), mode.score_mode())?;
    println!("score={s:.6} predicted={} phi={phi:.6}", classify(s, phi));
    Ok(())
}

fn heatmap(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let (ck, models, mode) = load_models(ckpt)?;
    let phi = require_phi(&ck)?;
    let sample = synth::load_image(image, models.generator_config().input_side)?;
    let x = sample.tensor();
    let s = scoring::anomaly_score(&models, &x, mode.score_mode())?;
    let mut map = aam::heatmap_for(&models, &x, Upsample::Bilinear)?;
    map.sample_id = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    map.checkpoint_id = checkpoint_path(ckpt).display().to_string();

    let mut outputs = Outputs::in_dir(out)?;
    let id = if map.sample_id.is_empty() { "sample" } else { &map.sample_id };
    outputs.track(out.join(format!("{id}.aam.pgm")));
    outputs.track(out.join(format!("{id}.overlay.ppm")));
    let (raw, overlay) = map.export(&sample.image, out)?;
    outputs.commit();
    println!(
        "predicted={} score={s:.6} phi={phi:.6} aam={} overlay={}",
        classify(s, phi),
        raw.display(),
        overlay.display()
    );
    Ok(())
}

fn gradcheck(scale: Scale) -> Result<()> {
    let start = Instant::now();
    let reports = gradsuite::run(scale)?;
    let mut failed = 0;
    for r in &reports {
        print!("{r}");
        failed += usize::from(!r.passed());
    }
    println!(
        "{} checks, {failed} failed, {:.1}s",
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SPARSEGAN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("SPARSEGAN_THREADS={v:?} is not a positive integer"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData { spec, out, overrides } => gen_data(spec.as_deref(), &out, &overrides),
        Command::Train {
            config,
            data,
            out,
            mode,
            epochs,
            seed,
            overrides,
        } => {
            let mut cfg = run_config(config.as_deref(), &overrides)?;
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            train(cfg, &data, &out)
        }
        Command::Eval { ckpt, data, split, out } => eval(&ckpt, &data, split, out.as_deref()),
        Command::Score { ckpt, image } => score(&ckpt, &image),
        Command::Heatmap { ckpt, image, out } => heatmap(&ckpt, &image, &out),
        Command::Gradcheck { scale } => gradcheck(scale),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
