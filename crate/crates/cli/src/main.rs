use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use mirage_core::metrics::ImageScoreRule;
use mirage_core::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "mirage", version, about = "Synthetic industrial anomaly pipeline")]
struct Cli {
    /// Pipeline configuration (TOML). `MIRAGE_*` variables override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Base seed for every stochastic step; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ask a vision-language model for plausible defects of a category.
    Propose(ProposeArgs),
    /// Apply every defect to sampled normal images.
    Generate(GenerateArgs),
    /// Drop generated images that fail the image-text consistency checks.
    Filter(FilterArgs),
    /// Pick the mask threshold of a category from reference masks.
    Calibrate(CalibrateArgs),
    /// Compute score maps and binary masks for generated images.
    Mask(MaskArgs),
    #[command(subcommand)]
    Eval(EvalCommand),
    #[command(subcommand)]
    Study(StudyCommand),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Backend {
    Http,
    Mock,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EmbedBackend {
    Clip,
    Mock,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SemanticBackend {
    Gdino,
    Mock,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StructuralBackend {
    Segyolo,
    Mock,
}

#[derive(Args, Debug)]
pub struct ProposeArgs {
    #[arg(long)]
    pub category: String,
    /// Normal images: `<DIR>/<category>/train/good` or `<DIR>/<category>`.
    #[arg(long, value_name = "DIR")]
    pub normals: PathBuf,
    /// Number of reference images shown to the model.
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of defects to request.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_enum, default_value = "http")]
    pub backend: Backend,
    /// Directory with canned `<category>.txt` answers for the mock backend.
    #[arg(long, value_name = "DIR")]
    pub mock_responses: Option<PathBuf>,
    /// Defects file; entries of other categories are kept.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_name = "FILE")]
    pub defects: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub normals: PathBuf,
    #[arg(long)]
    pub per_defect: Option<usize>,
    #[arg(long, value_enum, default_value = "http")]
    pub backend: Backend,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Dataset directory; the manifest is `<DIR>/manifest.jsonl`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "clip")]
    pub backend: EmbedBackend,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub category: String,
    /// Score maps (`.mten`), searched recursively.
    #[arg(long, value_name = "DIR")]
    pub scores: PathBuf,
    /// Reference masks (`.png`) with the same file stems.
    #[arg(long, value_name = "DIR")]
    pub refs: PathBuf,
    /// Calibration table; other categories in it are kept.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Upper bound on reference masks used.
    #[arg(long)]
    pub max_refs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "gdino")]
    pub semantic_backend: SemanticBackend,
    #[arg(long, value_enum, default_value = "segyolo")]
    pub structural_backend: StructuralBackend,
    #[arg(long, value_name = "FILE", conflicts_with = "scores_only")]
    pub calibration: Option<PathBuf>,
    /// Only write score maps (used to prepare calibration).
    #[arg(long)]
    pub scores_only: bool,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Inception score and intra-cluster perceptual diversity of a dataset.
    Quality(QualityArgs),
    /// Pixel AUROC of score maps against ground-truth masks.
    Masks(MaskEvalArgs),
    /// Train a segmenter on synthetic data and test it on real anomalies.
    Downstream(DownstreamArgs),
}

#[derive(Args, Debug)]
pub struct QualityArgs {
    /// Dataset directory containing `manifest.jsonl`.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "http")]
    pub backend: Backend,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MaskEvalArgs {
    #[arg(long, value_name = "DIR")]
    pub scores: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub gts: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DownstreamArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub normals: PathBuf,
    /// Test set in the `<category>/test/<type>` + `ground_truth` layout.
    #[arg(long, value_name = "DIR")]
    pub test: PathBuf,
    /// Training settings (JSON); defaults to the `[train]` table.
    #[arg(long = "config", value_name = "FILE")]
    pub train_config: Option<PathBuf>,
    /// Image score: `max` or `topk:K`.
    #[arg(long, value_parser = parse_rule)]
    pub image_score: Option<ImageScoreRule>,
    #[arg(long, value_name = "FILE")]
    pub model_out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum StudyCommand {
    /// Serve blinded pairwise trials and record votes.
    Serve(ServeArgs),
    /// Replay a vote log into a ranking.
    Rank(RankArgs),
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// JSON map method -> category -> image paths.
    #[arg(long, value_name = "FILE")]
    pub pools: PathBuf,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long, value_name = "FILE")]
    pub votes: PathBuf,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[arg(long, value_name = "FILE")]
    pub votes: PathBuf,
}

fn parse_rule(s: &str) -> Result<ImageScoreRule, String> {
    if s == "max" {
        return Ok(ImageScoreRule::Max);
    }
    s.strip_prefix("topk:")
        .and_then(|k| k.parse().ok())
        .filter(|&k: &usize| k > 0)
        .map(ImageScoreRule::TopKMean)
        .ok_or_else(|| format!("expected `max` or `topk:K`, got `{s}`"))
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_TRANSPORT: u8 = 2;
const EXIT_USAGE: u8 = 64;

fn exit_code(e: &Error) -> u8 {
    if e.is_transport() {
        EXIT_TRANSPORT
    } else {
        EXIT_VALIDATION
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => ExitCode::SUCCESS,
                // a missing input is a validation failure, not a usage error
                ErrorKind::MissingRequiredArgument => ExitCode::from(EXIT_VALIDATION),
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("MIRAGE_LOG")
        .init();

    match commands::run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary is valid JSON"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
