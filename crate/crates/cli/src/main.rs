use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vad_core::data::{crop_reduce, read_feature_file, synth_generate, CropMode, Dataset, SynthConfig};
use vad_core::evaluation::evaluate;
use vad_core::gradcheck::suite::{run_suite, SuiteOptions, TABLE_HEADER};
use vad_core::objective::Label;
use vad_core::training::{load_checkpoint, run, save_checkpoint, TrainConfig, Trainer, LOG_HEADER};

#[derive(Parser)]
#[command(name = "vad", version, about = "Weakly-supervised video anomaly detection on snippet features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset with known anomaly positions.
    Synth(SynthArgs),
    /// Train a model on a manifest of labeled videos.
    Train(TrainArgs),
    /// Print per-snippet magnitudes and scores for one feature file as CSV.
    Score(ScoreArgs),
    /// Frame-level ROC/AUC of a checkpoint on a labeled test manifest.
    Eval(EvalArgs),
    /// Check analytic gradients of every operator and loss term.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    n_normal: usize,
    #[arg(long, default_value_t = 20)]
    n_abnormal: usize,
    #[arg(long, default_value_t = 10)]
    n_test_normal: usize,
    #[arg(long, default_value_t = 10)]
    n_test_abnormal: usize,
    /// Snippets per video.
    #[arg(long, default_value_t = 32)]
    t: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    crops: usize,
    #[arg(long, default_value_t = 1.0)]
    normal_magnitude: f64,
    #[arg(long, default_value_t = 3.0)]
    abnormal_magnitude: f64,
    #[arg(long, default_value_t = 3)]
    anomaly_snippets: usize,
    /// Spread of snippet norms around their class mean.
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Shared mean of direction coordinates; 0 gives isotropic features.
    #[arg(long, default_value_t = 1.0)]
    direction_mean: f64,
    #[arg(long, default_value_t = 16)]
    frames_per_snippet: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// `mean` or a crop index.
fn parse_crop(s: &str) -> std::result::Result<CropMode, String> {
    if s.eq_ignore_ascii_case("mean") {
        return Ok(CropMode::Mean);
    }
    s.parse()
        .map(CropMode::Select)
        .map_err(|_| format!("expected `mean` or a crop index, got `{s}`"))
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// JSON-lines manifest of training videos.
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the final checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint. Unset hyperparameters keep the
    /// checkpoint's values; `--epochs` is the total to reach.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Videos per class in each mini-batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    lambda4: Option<f64>,
    /// Feature-magnitude margin.
    #[arg(long)]
    margin: Option<f64>,
    /// Top-k snippets per bag.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also save `<checkpoint>.epochNNNN` every this many epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, default_value = "mean", value_parser = parse_crop)]
    #[serde(skip)]
    crop: CropMode,
}

impl TrainArgs {
    fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        fn set<T: Copy>(slot: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *slot = v;
            }
        }
        set(&mut c.epochs, self.epochs);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.adam.learning_rate, self.lr);
        set(&mut c.adam.weight_decay, self.weight_decay);
        set(&mut c.loss.lambda1, self.lambda1);
        set(&mut c.loss.lambda2, self.lambda2);
        set(&mut c.loss.lambda3, self.lambda3);
        set(&mut c.loss.lambda4, self.lambda4);
        set(&mut c.loss.margin, self.margin);
        set(&mut c.loss.k, self.k);
        set(&mut c.dropout, self.dropout);
        set(&mut c.seed, self.seed);
        set(&mut c.checkpoint_every, self.checkpoint_every);
        c
    }
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One VSWF feature file.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "mean", value_parser = parse_crop)]
    #[serde(skip)]
    crop: CropMode,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest whose entries all list frame labels.
    #[arg(long)]
    manifest: PathBuf,
    /// Write ROC points as CSV.
    #[arg(long)]
    roc_out: Option<PathBuf>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[arg(long, default_value = "mean", value_parser = parse_crop)]
    #[serde(skip)]
    crop: CropMode,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    t: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Coordinates sampled per input tensor.
    #[arg(long, default_value_t = 24)]
    coords: usize,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn echo(command: &str, config: &impl Serialize) {
    let line = serde_json::json!({ "command": command, "config": config });
    eprintln!("{line}");
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_normal: a.n_normal,
        n_abnormal: a.n_abnormal,
        n_test_normal: a.n_test_normal,
        n_test_abnormal: a.n_test_abnormal,
        snippets: a.t,
        dim: a.d,
        crops: a.crops,
        normal_mag_mean: a.normal_magnitude,
        abnormal_mag_mean: a.abnormal_magnitude,
        anomaly_snippets_per_video: a.anomaly_snippets,
        noise_std: a.noise_std,
        direction_mean: a.direction_mean,
        frames_per_snippet: a.frames_per_snippet,
        seed: a.seed,
    };
    echo("synth", &cfg);
    let out = synth_generate(&cfg, &a.out)?;
    eprintln!(
        "wrote {} files; manifests {} and {}",
        out.files_written,
        out.train_manifest.display(),
        out.test_manifest.display()
    );
    Ok(())
}

fn periodic_path(base: &Path, epoch: usize) -> PathBuf {
    let mut name = base.as_os_str().to_owned();
    name.push(format!(".epoch{epoch:04}"));
    PathBuf::from(name)
}

fn train(a: &TrainArgs) -> Result<()> {
    let dataset = Dataset::load(&a.manifest, a.crop)?;
    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let base = resumed.as_ref().map_or_else(TrainConfig::default, |c| c.config.clone());
    let config = a.apply(base);
    echo("train", &serde_json::json!({ "args": a, "train": config }));

    let trainer = match &resumed {
        Some(ckpt) => Trainer::resume(&dataset, ckpt, config)?,
        None => Trainer::new(&dataset, config)?,
    };
    let mut log = match &a.log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            writeln!(w, "{LOG_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let every = trainer.config().checkpoint_every;
    let outcome = run(trainer, |row, t| {
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", row.csv_row()).and_then(|()| w.flush()).map_err(|e| vad_core::Error::Io {
                path: a.log.clone().unwrap_or_default(),
                source: e,
            })?;
        }
        if every > 0 && row.epoch % every == 0 {
            save_checkpoint(periodic_path(&a.checkpoint, row.epoch), &t.checkpoint())?;
        }
        Ok(())
    })?;
    save_checkpoint(&a.checkpoint, &outcome.checkpoint)?;
    eprintln!(
        "trained to epoch {}; mean delta_score {:.6} -> {:.6}",
        outcome.checkpoint.epoch, outcome.initial_delta, outcome.final_delta
    );
    Ok(())
}

fn score(a: &ScoreArgs) -> Result<()> {
    echo("score", a);
    let model = load_checkpoint(&a.checkpoint)?.model()?;
    let file = read_feature_file(&a.features)?;
    let features = crop_reduce(&file.to_tensor(), a.crop)?;
    let bag = model.score(&features, Label::Normal)?;
    let mut out = BufWriter::new(io::stdout().lock());
    writeln!(out, "snippet,magnitude,score")?;
    for (i, (m, s)) in bag.magnitudes.iter().zip(&bag.scores).enumerate() {
        writeln!(out, "{i},{m},{s}")?;
    }
    out.flush()?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    echo("eval", a);
    let dataset = Dataset::load(&a.manifest, a.crop)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.model()?;
    let report = evaluate(&model, &dataset)?;
    if let Some(p) = &a.roc_out {
        fs::write(p, report.roc_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    let json = report.to_json()?;
    match &a.report_out {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    eprintln!("frame-level AUC {:.6} over {} frames", report.auc, report.frames);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    echo("gradcheck", a);
    let rows = run_suite(&SuiteOptions {
        snippets: a.t,
        feature_dim: a.d,
        seeds: a.seeds,
        seed: a.seed,
        eps: a.eps,
        tolerance: a.tolerance,
        max_coords_per_input: a.coords,
        inject_fault: a.inject_fault,
    })?;
    println!("{TABLE_HEADER}");
    for r in &rows {
        println!("{r}");
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} gradient checks exceeded tolerance {}", rows.len(), a.tolerance);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
