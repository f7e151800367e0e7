use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stemob::analysis::{build_distance_matrix, indistinguishability_from_distances, labeled_pair_distances};
use stemob::attribute::{loss_curve, LossModel};
use stemob::harness::{
    generate_dataset, robustness_experiment, write_category_set, CategoryConfig, ExperimentConfig,
    GeneratorConfig, SPLIT_GEN,
};
use stemob::inversion::{DdimPredictorKind, InversionConfig, InversionMethod};
use stemob::pipeline::{
    emit_inversion_grid, load_latent_file, parse_step_pairs, run_invert, run_sweep, DatasetManifest,
    OutputFormat, PipelineConfig, RecordFailure,
};
use stemob::{Error, NoiseSchedule, ScheduleKind};

const EXIT_USAGE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "stemob", version, about = "Diffusion-inversion preprocessing for visual observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Noise schedule utilities.
    #[command(subcommand)]
    Schedule(ScheduleCmd),
    /// Attribute-loss curve and crossing step for two images.
    AttrLoss(AttrLossArgs),
    /// Distance analysis over a labeled manifest.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Partially invert every image of a manifest.
    Invert(InvertArgs),
    /// One inversion run per t/T pair.
    Sweep(SweepArgs),
    /// Tile an image and its inversions at several steps into one PNG.
    Grid(GridArgs),
    /// Synthetic imitation task.
    #[command(subcommand)]
    Harness(HarnessCmd),
}

#[derive(Subcommand)]
enum ScheduleCmd {
    /// Write t,beta,alpha,alpha_bar,sigma as CSV.
    Dump {
        #[arg(long, default_value = "cosine")]
        schedule: ScheduleKind,
        #[arg(long, default_value_t = 50)]
        total: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Ddpm,
    Ddim,
}

impl From<ModelArg> for LossModel {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Ddpm => LossModel::Ddpm,
            ModelArg::Ddim => LossModel::Ddim,
        }
    }
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value = "cosine")]
    schedule: ScheduleKind,
    #[arg(long, default_value_t = 50)]
    total: usize,
}

impl ScheduleArgs {
    fn build(&self) -> Result<NoiseSchedule, Error> {
        NoiseSchedule::with_defaults(self.schedule, self.total)
    }
}

#[derive(Args)]
struct AttrLossArgs {
    /// First image (.png or .stem).
    #[arg(long)]
    x: PathBuf,
    /// Second image (.png or .stem).
    #[arg(long)]
    y: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, value_enum, default_value = "ddpm")]
    model: ModelArg,
    #[arg(long, default_value_t = 0.4)]
    rho: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Category distance matrix as CSV.
    Distances {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fraction of intra- and cross-category pairs whose loss exceeds rho, per step.
    Curve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        rho: f64,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long, value_enum, default_value = "ddpm")]
        model: ModelArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InversionArgs {
    #[arg(long, default_value = "ddpm")]
    method: InversionMethod,
    #[arg(long, default_value = "cosine")]
    schedule: ScheduleKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "tensor")]
    format: OutputFormat,
    /// Also compute the DDPM residual noises (output is unchanged).
    #[arg(long)]
    error_reduction: bool,
    #[arg(long, value_enum, default_value = "noise")]
    ddim_predictor: PredictorArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Zero,
    Noise,
}

impl InversionArgs {
    fn pipeline(&self, t_stop: usize, total: usize, out: &Path) -> PipelineConfig {
        PipelineConfig {
            inversion: InversionConfig {
                method: self.method,
                t_stop,
                total_steps: total,
                seed: self.seed,
                error_reduction: self.error_reduction,
                ddim_predictor: match self.ddim_predictor {
                    PredictorArg::Zero => DdimPredictorKind::Zero,
                    PredictorArg::Noise => DdimPredictorKind::Noise,
                },
            },
            schedule: self.schedule,
            out_dir: out.to_path_buf(),
            workers: self.workers,
            format: self.format,
        }
    }
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Inversion steps applied.
    #[arg(long, default_value_t = 15)]
    steps: usize,
    /// Total schedule length.
    #[arg(long, default_value_t = 50)]
    total: usize,
    #[command(flatten)]
    inversion: InversionArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated t/T pairs, e.g. 5/50,10/50.
    #[arg(long)]
    pairs: String,
    #[command(flatten)]
    inversion: InversionArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    image: PathBuf,
    /// Comma-separated ascending steps.
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    total: usize,
    #[arg(long, default_value = "cosine")]
    schedule: ScheduleKind,
    #[arg(long, default_value = "ddpm")]
    method: InversionMethod,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum HarnessCmd {
    /// Run the robustness experiment and write report.csv and summary.csv.
    Run {
        /// Experiment config JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a labeled position dataset with a manifest.
    Dataset {
        /// Generator config JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the shape category set with a manifest.
    Categories {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Fatal(Error),
    Partial(Vec<RecordFailure>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Fatal(e)
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Schedule(ScheduleCmd::Dump { schedule, total, out }) => {
            let s = NoiseSchedule::with_defaults(schedule, total)?;
            emit(&s.to_csv(), out.as_deref())?;
        }
        Command::AttrLoss(a) => {
            let x = load_latent_file(&a.x)?;
            let y = load_latent_file(&a.y)?;
            let curve = loss_curve(&x, &y, &a.schedule.build()?, a.model.into())?;
            emit(&curve.to_csv(a.rho)?, a.out.as_deref())?;
        }
        Command::Analyze(AnalyzeCmd::Distances { manifest, out }) => {
            let m = build_distance_matrix(&DatasetManifest::load(&manifest)?)?;
            emit(&m.to_csv(), out.as_deref())?;
        }
        Command::Analyze(AnalyzeCmd::Curve {
            manifest,
            rho,
            schedule,
            model,
            out,
        }) => {
            let items = DatasetManifest::load(&manifest)?.load_labeled()?;
            let pairs = labeled_pair_distances(&items)?;
            let curve = indistinguishability_from_distances(&pairs, &schedule.build()?, rho, model.into())?;
            emit(&curve.to_csv(), out.as_deref())?;
        }
        Command::Invert(a) => {
            let m = DatasetManifest::load(&a.manifest)?;
            let outcome = run_invert(&m, &a.inversion.pipeline(a.steps, a.total, &a.out))?;
            eprintln!(
                "inverted {} of {} records into {}",
                outcome.manifest.len(),
                m.len(),
                outcome.manifest_path.display()
            );
            if !outcome.is_complete() {
                return Err(Failure::Partial(outcome.failures));
            }
        }
        Command::Sweep(a) => {
            let m = DatasetManifest::load(&a.manifest)?;
            let pairs = parse_step_pairs(&a.pairs)?;
            let base = a.inversion.pipeline(0, 1, &a.out);
            let runs = run_sweep(&m, &base, &pairs)?;
            let mut failures = Vec::new();
            for r in runs {
                eprintln!(
                    "{}/{}: {} records into {}",
                    r.t_stop,
                    r.total_steps,
                    r.outcome.manifest.len(),
                    r.outcome.manifest_path.display()
                );
                failures.extend(r.outcome.failures);
            }
            if !failures.is_empty() {
                return Err(Failure::Partial(failures));
            }
        }
        Command::Grid(a) => {
            let image = load_latent_file(&a.image)?;
            let s = NoiseSchedule::with_defaults(a.schedule, a.total)?;
            let inv = InversionConfig {
                method: a.method,
                total_steps: a.total,
                seed: a.seed,
                ..Default::default()
            };
            emit_inversion_grid(&image, &s, &a.steps, &inv, &a.out)?;
        }
        Command::Harness(HarnessCmd::Run { config, out }) => {
            let cfg: ExperimentConfig = read_json(config.as_deref())?;
            let report = robustness_experiment(&cfg)?;
            create_dir(&out)?;
            emit(&report.to_csv(), Some(&out.join("report.csv")))?;
            emit(&report.summary_csv(), Some(&out.join("summary.csv")))?;
            if let (Some(((t, n), best)), Some((org, _))) = (report.best_stem_arm(), report.org_median(SPLIT_GEN)) {
                eprintln!("median gen mse: org {org:.6e}, best stem {t}/{n} {best:.6e}");
            }
        }
        Command::Harness(HarnessCmd::Dataset { config, out }) => {
            let cfg: GeneratorConfig = read_json(config.as_deref())?;
            let m = generate_dataset(&cfg, &out)?;
            eprintln!("wrote {} records to {}", m.len(), out.display());
        }
        Command::Harness(HarnessCmd::Categories { config, out }) => {
            let cfg: CategoryConfig = read_json(config.as_deref())?;
            let m = write_category_set(&cfg, &out)?;
            eprintln!("wrote {} records to {}", m.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Fatal(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Partial(failures)) => {
            eprintln!("{} record(s) failed:", failures.len());
            for f in &failures {
                eprintln!("  {f}");
            }
            ExitCode::from(EXIT_PARTIAL)
        }
    }
}
