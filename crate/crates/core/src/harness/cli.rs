//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fnmitigation::{rank_desc, Embeddings};
use crate::localization::{write_heat_csv, write_pgm, ThetaPolicy};
use crate::synthbench::{generate, Dataset, SynthConfig, IMAGE_SIZE};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::eval::{evaluate, infer, localize, Evaluation};
use super::gradsuite::{format_table, run_suite};
use super::train::{continue_training, train, RunDir};

#[derive(Debug, Parser)]
#[command(name = "jsaloc", version, about = "Joint slot attention sound source localization on synthetic pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model; writes metrics.jsonl and checkpoint.ckpt into --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Localize one sample, writing a PGM mask and a CSV heat map.
    Localize(LocalizeArgs),
    /// Rank gallery items of the other modality for one query sample.
    Retrieve(RetrieveArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub categories: usize,
    #[arg(long, default_value_t = 800)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub distractor_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    pub audio_noise_rate: f64,
    /// Upper bound of the uniform background clutter.
    #[arg(long, default_value_t = 0.5)]
    pub clutter: f64,
}

/// Overrides for [`TrainConfig`] fields; unset flags keep the config file
/// (or default) value.
#[derive(Debug, Args, Default)]
pub struct ConfigFlags {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub decoder_hidden: Option<usize>,
    #[arg(long)]
    pub n_target: Option<usize>,
    #[arg(long)]
    pub n_off: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

impl ConfigFlags {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("tau", self.tau.map(|v| v.to_string())),
            ("lambda1", self.lambda1.map(|v| v.to_string())),
            ("lambda2", self.lambda2.map(|v| v.to_string())),
            ("lambda3", self.lambda3.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("iters", self.iters.map(|v| v.to_string())),
            ("mask_ratio", self.mask_ratio.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("weight_decay", self.weight_decay.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("h", self.h.map(|v| v.to_string())),
            ("w", self.w.map(|v| v.to_string())),
            ("t", self.t.map(|v| v.to_string())),
            ("c", self.c.map(|v| v.to_string())),
            ("d", self.d.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("decoder_hidden", self.decoder_hidden.map(|v| v.to_string())),
            ("n_target", self.n_target.map(|v| v.to_string())),
            ("n_off", self.n_off.map(|v| v.to_string())),
            ("checkpoint_every", self.checkpoint_every.map(|v| v.to_string())),
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string())),
        ]
    }

    /// Config file (or defaults) with command-line overrides applied.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Run directory for metrics and checkpoints.
    #[arg(long, default_value = "runs/default")]
    pub out: PathBuf,
    /// Continue from the checkpoint in --out instead of starting fresh.
    #[arg(long)]
    pub resume: bool,
    /// Also write predicted false negatives of every step.
    #[arg(long)]
    pub dump_neighbors: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `adaptive` (mean + 1 std of the upsampled map) or a fixed value.
    #[arg(long, default_value = "adaptive")]
    pub theta: String,
    /// Also report localization with image-query refinement.
    #[arg(long)]
    pub iqr: bool,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sample id from the dataset manifest.
    #[arg(long)]
    pub id: usize,
    /// Output path prefix; `<prefix>.pgm` and `<prefix>.csv` are written.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "adaptive")]
    pub theta: String,
    /// Blend weight of cross-modal attention; 1 disables refinement.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Direction {
    /// Audio query, image gallery.
    A2i,
    /// Image query, audio gallery.
    I2a,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub id: usize,
    #[arg(long, value_enum, default_value = "a2i")]
    pub direction: Direction,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Exit code for an error: 2 for numeric failures, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) | Error::Degenerate(_) => 2,
        _ => 1,
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Dataset::load(path)
}

fn find_sample(data: &Dataset, id: usize) -> Result<usize> {
    data.samples
        .iter()
        .position(|s| s.id == id)
        .ok_or_else(|| Error::Config(format!("no sample with id {id}")))
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    scale: &'static str,
    checkpoint_step: u64,
    config: String,
    evaluation: &'a Evaluation,
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        categories: a.categories,
        n: a.n,
        seed: a.seed,
        distractor_rate: a.distractor_rate,
        audio_noise_rate: a.audio_noise_rate,
        clutter: a.clutter,
        ..SynthConfig::default()
    };
    let data = generate(&cfg)?;
    data.save(&a.out)?;
    println!("wrote {} samples to {} (fingerprint {:016x})", data.len(), a.out.display(), data.fingerprint());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.flags.resolve()?;
    let run = RunDir {
        dir: a.out.clone(),
        dump_neighbors: a.dump_neighbors,
    };
    let data = load_dataset(&cfg.dataset)?;
    let outcome = if a.resume {
        let ckpt = Checkpoint::load(&run.checkpoint())?;
        ckpt.check_compatible(&cfg)?;
        continue_training(ckpt, cfg.steps, &data, &run)?
    } else {
        train(&cfg, &data, &run)?
    };
    match outcome.reports.last() {
        Some(r) => println!("step {}: total {:.6} (cotr {:.6})", outcome.checkpoint.step, r.total, r.cotr),
        None => println!("step {}: no updates", outcome.checkpoint.step),
    }
    println!("checkpoint: {}", run.checkpoint().display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let model = ckpt.model()?;
    let theta: ThetaPolicy = a.theta.parse()?;
    let evaluation = evaluate(&model, &data, theta, a.iqr)?;
    let out = EvalOutput {
        scale: "desk (synthetic benchmark, reduced widths)",
        checkpoint_step: ckpt.step,
        config: ckpt.config.to_text(),
        evaluation: &evaluation,
    };
    let text = serde_json::to_string_pretty(&out).map_err(std::io::Error::from)?;
    if let Some(path) = &a.out {
        std::fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_localize(a: &LocalizeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let model = ckpt.model()?;
    let sample = &data.samples[find_sample(&data, a.id)?];
    let inf = infer(&model, &sample.image, &sample.audio)?;
    let alpha = a.alpha.unwrap_or(1.0);
    let map = localize(&model, &inf, alpha, a.theta.parse()?)?;
    let pgm = a.out.with_extension("pgm");
    let csv = a.out.with_extension("csv");
    write_pgm(&pgm, &map.mask, IMAGE_SIZE, IMAGE_SIZE)?;
    write_heat_csv(&csv, &map.upsampled, IMAGE_SIZE, IMAGE_SIZE)?;
    let iou = crate::evaluation::ciou(&map.mask, &sample.gt_mask)?;
    println!(
        "sample {} (category {}): theta {:.5}, mask area {}, IoU {:.4}; wrote {} and {}",
        sample.id,
        sample.category,
        map.theta,
        map.mask_area(),
        iou,
        pgm.display(),
        csv.display()
    );
    Ok(())
}

fn cmd_retrieve(a: &RetrieveArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let model = ckpt.model()?;
    let q = find_sample(&data, a.id)?;
    let infs = data
        .samples
        .iter()
        .map(|s| infer(&model, &s.image, &s.audio))
        .collect::<Result<Vec<_>>>()?;
    let d = model.config.d;
    let (query, gallery): (Vec<f64>, Vec<f64>) = match a.direction {
        Direction::A2i => (infs[q].p_audio.clone(), infs.iter().flat_map(|i| i.p_image.clone()).collect()),
        Direction::I2a => (infs[q].p_image.clone(), infs.iter().flat_map(|i| i.p_audio.clone()).collect()),
    };
    let sims = Embeddings::new(1, d, query)?.cosine_to(&Embeddings::new(infs.len(), d, gallery)?)?;
    let ranked = rank_desc(&sims, 0..infs.len());
    println!("query {} (category {})", data.samples[q].id, data.samples[q].category);
    for (rank, &j) in ranked.iter().take(a.top).enumerate() {
        let s = &data.samples[j];
        println!("{:>3}. id {:>5}  category {}  cos {:.4}", rank + 1, s.id, s.category, sims[j]);
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let results = run_suite(a.seed)?;
    print!("{}", format_table(&results));
    Ok(results.iter().all(|r| r.passed()))
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Localize(a) => cmd_localize(a).map(|_| true),
        Command::Retrieve(a) => cmd_retrieve(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
