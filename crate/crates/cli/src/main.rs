//! `maskscope` command line.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskscope::gradcam::DEFAULT_THRESHOLD;
use maskscope::objstats::DEFAULT_MIN_AVG_PIXELS;
use maskscope::report::{run, RunConfig, Stage, EXIT_CONFIG};
use maskscope::synth::{generate_fixture, SynthConfig};

const THREADS_VAR: &str = "MASKSCOPE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "maskscope", version, about = "Grad-CAM mask analysis for city-recognition CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Weighted masks and thresholded explanations.
    Masks(RunArgs),
    /// Masks, then PCA + t-SNE scatter plots.
    Embed(RunArgs),
    /// Masks, then per-class object pixel ratios and histograms.
    Objstats(RunArgs),
    /// Masks, then the average-residual matrix and mask gallery.
    Ar(RunArgs),
    /// Every stage and figure.
    Report(RunArgs),
    /// Every stage; same as `report`.
    All(RunArgs),
    /// Write a synthetic two-class dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_AVG_PIXELS)]
    min_avg_pixels: f64,
    /// Comma-separated model ids.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Single model id; may be repeated.
    #[arg(long)]
    model: Vec<String>,
    #[arg(long, default_value_t = maskscope::report::svg::DEFAULT_THUMBNAIL_CAP)]
    thumbnail_cap: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    images_per_class: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

impl RunArgs {
    fn into_config(self, stages: &[Stage]) -> RunConfig {
        let mut cfg = RunConfig::new(self.manifest, self.out);
        cfg.threshold = self.threshold;
        cfg.tsne.seed = self.seed;
        cfg.tsne.perplexity = self.perplexity;
        cfg.tsne.iterations = self.iterations;
        cfg.min_avg_pixels = self.min_avg_pixels;
        cfg.thumbnail_cap = self.thumbnail_cap;
        let models: Vec<String> = self
            .models
            .into_iter()
            .chain(self.model)
            .map(|m| m.trim().to_string())
            .filter(|m| !m.is_empty())
            .collect();
        if !models.is_empty() {
            cfg.models = Some(models);
        }
        cfg.stages = stages.iter().copied().collect::<BTreeSet<_>>();
        cfg
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_VAR}={raw:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_CONFIG as u8);
    }

    use Stage::*;
    let (args, stages): (RunArgs, &[Stage]) = match cli.command {
        Command::Masks(a) => (a, &[Masks, Explanations]),
        Command::Embed(a) => (a, &[Masks, Embedding]),
        Command::Objstats(a) => (a, &[Masks, ObjStats]),
        Command::Ar(a) => (a, &[Masks, Ar]),
        Command::Report(a) | Command::All(a) => (a, &Stage::ALL),
        Command::Synth(a) => {
            let cfg = SynthConfig {
                images_per_class: a.images_per_class,
                seed: a.seed,
                ..SynthConfig::default()
            };
            return match generate_fixture(&a.out, &cfg) {
                Ok(path) => {
                    println!("{}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_CONFIG as u8)
                }
            };
        }
    };

    match run(&args.into_config(stages)) {
        Ok(report) => {
            eprintln!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
