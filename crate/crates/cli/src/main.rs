//! `agedit` command-line entry point.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for
//! runtime failures such as training divergence.

mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use agedit::losses::LossMode;
use agedit::prompts::AgeGroup;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "agedit", version, about = "Identity-preserving age editing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a dataset manifest from `subjects/<id>/*.png` and `reg/<agegroup>/*.png`.
    PrepareData(PrepareDataArgs),
    /// Write the synthetic toy fixture.
    MakeFixture(MakeFixtureArgs),
    /// Fine-tune the age-editing model on one subject.
    Train(TrainArgs),
    /// Sample age-edited images of the subject and apply the quality gate.
    Generate(GenerateArgs),
    /// Train a face matcher (loss- or eval-role) on `<subject>/*.png` folders.
    TrainMatcher(TrainMatcherArgs),
    /// Score every gallery/probe pair with a matcher.
    EvalMatch(EvalMatchArgs),
    /// Print FNMR at the requested FMR targets for a score file.
    Det(DetArgs),
    /// Adapt an eval-role matcher to age-edited images.
    FinetuneMatcher(FinetuneMatcherArgs),
    /// Train the age-group classifier used for dispersion.
    TrainAgePredictor(TrainAgePredictorArgs),
    /// Dispersion of predicted age groups over a folder of images.
    Dispersion(DispersionArgs),
    /// Assemble the evaluation report and DET plot.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareDataArgs {
    /// Directory holding `subjects/` and `reg/`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "target")]
    pub subject_id: String,
    /// Manifest path; defaults to `<input>/manifest.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeFixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub mode: Option<LossMode>,
    #[arg(long)]
    pub token: Option<String>,
    /// JSON file with `TrainConfig` fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the checkpoint, loss CSV and run record.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Loss-role matcher; required in biometric mode.
    #[arg(long)]
    pub loss_matcher: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub class_label: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub token: String,
    /// Repeatable; all six groups when omitted.
    #[arg(long = "age-group")]
    pub age_groups: Vec<AgeGroup>,
    /// Images sampled per group before the quality gate.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with `QualityGateConfig` fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_keep: Option<usize>,
    /// Reverse-diffusion steps.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value = agedit::prompts::DEFAULT_CLASS_LABEL)]
    pub class_label: String,
}

#[derive(Debug, Args)]
pub struct TrainMatcherArgs {
    /// Directory of `<subject>/*.png` folders.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value = "eval")]
    pub role: agedit::biometrics::EmbedderRole,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalMatchArgs {
    /// `<subject>/**/*.png` folders; repeatable, all are pooled.
    #[arg(long, required = true)]
    pub gallery: Vec<PathBuf>,
    #[arg(long)]
    pub probes: PathBuf,
    /// Treat every probe as this subject, e.g. generated images of the
    /// fine-tuned subject which are filed under the token name.
    #[arg(long)]
    pub probe_subject: Option<String>,
    #[arg(long)]
    pub matcher: PathBuf,
    #[arg(long)]
    pub scores_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Repeatable; defaults to 1e-4 and 1e-3.
    #[arg(long = "fmr")]
    pub fmr: Vec<f64>,
    /// Also write the full curve as `threshold,fmr,fnmr`.
    #[arg(long)]
    pub curve_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneMatcherArgs {
    #[arg(long)]
    pub matcher: PathBuf,
    /// Directory of `<subject>/**/*.png` age-edited images.
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluation subject folders that must not appear in `--generated`.
    #[arg(long = "held-out")]
    pub held_out: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainAgePredictorArgs {
    /// Manifest whose regularization pairs provide the labels.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DispersionArgs {
    /// Folder searched recursively for PNGs.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub predictor: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Repeatable; defaults to 1e-4 and 1e-3.
    #[arg(long = "fmr")]
    pub fmr: Vec<f64>,
    /// Original-age evaluation images, `<subject>/*.png`.
    #[arg(long, requires_all = ["modified", "matcher", "finetuned"])]
    pub ori: Option<PathBuf>,
    /// Age-modified evaluation images of the same subjects.
    #[arg(long = "mod", requires = "ori")]
    pub modified: Option<PathBuf>,
    #[arg(long, requires = "ori")]
    pub matcher: Option<PathBuf>,
    #[arg(long, requires = "ori")]
    pub finetuned: Option<PathBuf>,
    /// `<mode>=<scores.csv>`, repeatable; adds a per-loss-mode comparison.
    #[arg(long = "mode-scores", value_parser = parse_mode_scores)]
    pub mode_scores: Vec<(LossMode, PathBuf)>,
    /// Side length of the DET plot in pixels.
    #[arg(long, default_value_t = 480)]
    pub plot_size: u32,
}

fn parse_mode_scores(s: &str) -> Result<(LossMode, PathBuf), String> {
    let (mode, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected <mode>=<path>, got `{s}`"))?;
    let mode: LossMode = mode.parse().map_err(|e: agedit::Error| e.to_string())?;
    Ok((mode, PathBuf::from(path)))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<agedit::Error>() {
        Some(e) if e.is_validation() => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::PrepareData(a) => commands::prepare_data(a),
        Command::MakeFixture(a) => commands::make_fixture(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::TrainMatcher(a) => commands::train_matcher(a),
        Command::EvalMatch(a) => commands::eval_match(a),
        Command::Det(a) => commands::det(a),
        Command::FinetuneMatcher(a) => commands::finetune_matcher(a),
        Command::TrainAgePredictor(a) => commands::train_age_predictor(a),
        Command::Dispersion(a) => commands::dispersion(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
