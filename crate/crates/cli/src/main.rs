//! `face2voice` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(face2voice::Error),
}

impl From<face2voice::Error> for CliError {
    fn from(e: face2voice::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "face2voice", version, about = "Face-conditioned zero-shot text-to-speech")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Corpus manifest.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// TTS checkpoint path.
    #[arg(long, global = true)]
    tts: Option<PathBuf>,
    /// PLM checkpoint path.
    #[arg(long, global = true)]
    plm: Option<PathBuf>,
    /// Face-encoder checkpoint path.
    #[arg(long = "face-ckpt", global = true)]
    face_ckpt: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic audiovisual corpus (WAV, PNG, manifest).
    GenCorpus(GenCorpusArgs),
    /// Train one pipeline stage.
    Train(TrainArgs),
    /// Synthesize speech for a face image.
    Synthesize(SynthesizeArgs),
    /// Run an evaluation suite.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct GenCorpusArgs {
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    utts: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Tts,
    Plm,
    Face,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: Stage,
    /// Training steps for the selected stage.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Mapping-loss variant (face stage).
    #[arg(long)]
    variant: Option<String>,
    /// Contrastive temperature (face stage).
    #[arg(long)]
    tau: Option<f64>,
    /// Codebook size T (tts stage).
    #[arg(long)]
    codebook_size: Option<usize>,
    /// Low mel bins seen by the prosody encoder (tts stage).
    #[arg(long)]
    n_low: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    #[arg(long)]
    face: PathBuf,
    #[arg(long)]
    text: String,
    /// Utterance id from the corpus used as prosody prompt.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Metrics,
    Consistency,
    Ablation,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    suite: Suite,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(d) = &cli.out_dir {
        cfg.paths.out_dir = d.clone();
    }
    if let Some(p) = &cli.corpus {
        cfg.paths.corpus = Some(p.clone());
    }
    if let Some(p) = &cli.tts {
        cfg.paths.tts = Some(p.clone());
    }
    if let Some(p) = &cli.plm {
        cfg.paths.plm = Some(p.clone());
    }
    if let Some(p) = &cli.face_ckpt {
        cfg.paths.face = Some(p.clone());
    }
    match &cli.command {
        Command::GenCorpus(a) => {
            if let Some(v) = a.speakers {
                cfg.corpus.speakers = v;
            }
            if let Some(v) = a.utts {
                cfg.corpus.utts = v;
            }
            if let Some(v) = a.frames {
                cfg.corpus.frames = v;
            }
        }
        Command::Train(a) => apply_train_overrides(&mut cfg, a)?,
        Command::Synthesize(_) | Command::Evaluate(_) => {}
    }
    cfg.propagate_seed();
    Ok(cfg)
}

fn apply_train_overrides(cfg: &mut RunConfig, a: &TrainArgs) -> Result<(), CliError> {
    match a.stage {
        Stage::Tts => {
            set(&mut cfg.tts_train.steps, a.steps);
            set(&mut cfg.tts_train.batch_size, a.batch_size);
            set(&mut cfg.tts_train.learning_rate, a.learning_rate);
            set(&mut cfg.tts.codec.codebook_size, a.codebook_size);
            set(&mut cfg.tts.codec.n_low, a.n_low);
        }
        Stage::Plm => {
            set(&mut cfg.plm_train.steps, a.steps);
            set(&mut cfg.plm_train.batch_size, a.batch_size);
            set(&mut cfg.plm_train.learning_rate, a.learning_rate);
        }
        Stage::Face => {
            set(&mut cfg.face_train.steps, a.steps);
            set(&mut cfg.face_train.batch_size, a.batch_size);
            set(&mut cfg.face_train.learning_rate, a.learning_rate);
            set(&mut cfg.face_train.loss.temperature, a.tau);
            if let Some(v) = &a.variant {
                cfg.face_train.loss.variant = v.parse().map_err(|e: face2voice::Error| CliError::Usage(e.to_string()))?;
            }
        }
    }
    let stage_only = [
        (a.variant.is_some() || a.tau.is_some(), Stage::Face, "--variant/--tau"),
        (a.codebook_size.is_some() || a.n_low.is_some(), Stage::Tts, "--codebook-size/--n-low"),
    ];
    for (given, stage, flags) in stage_only {
        if given && a.stage != stage {
            return Err(CliError::Usage(format!("{flags} only apply to the {stage:?} stage")));
        }
    }
    Ok(())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::GenCorpus(_) => commands::gen_corpus(&cfg),
        Command::Train(a) => {
            cfg.require_seed()?;
            match a.stage {
                Stage::Tts => commands::train_tts(&cfg),
                Stage::Plm => commands::train_plm(&cfg),
                Stage::Face => commands::train_face(&cfg),
            }
        }
        Command::Synthesize(a) => commands::synthesize(&cfg, &a.face, &a.text, a.prompt.as_deref(), &a.out),
        Command::Evaluate(a) => match a.suite {
            Suite::Metrics => commands::evaluate_metrics(&cfg),
            Suite::Consistency => commands::evaluate_consistency(&cfg),
            Suite::Ablation => commands::evaluate_ablation(&cfg),
        },
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .without_time()
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
