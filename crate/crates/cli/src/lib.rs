//! Command-line frontend: `evaluate`, `correlate`, `loss-check`, `uncertainty`,
//! `gradcam` and `phantom`.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 partial failure.

pub mod cases;
pub mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use airwayseg::losses::{DiceConvention, TopKNormalization, DEFAULT_K_FRACTION};
use airwayseg::metrics::DEFAULT_TOLERANCE_MM;
use airwayseg::posthoc::VarianceEstimator;
use airwayseg::stats::Sidedness;
use airwayseg::volio::ReportFormat;
use airwayseg::ClassTable;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

/// Environment variable read when `--threads` is not given.
pub const THREADS_ENV: &str = "AIRWAYSEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "airwayseg", version, about = "Evaluation, correlation and verification for 3-D lesion segmentations")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-case and aggregate Dice, NSD, sensitivity, specificity and AUC.
    Evaluate(EvaluateArgs),
    /// Spearman correlation of predicted lesion volumes with FEV1%.
    Correlate(CorrelateArgs),
    /// Compare analytic loss gradients with central finite differences.
    LossCheck(LossCheckArgs),
    /// Variance across ensemble members.
    Uncertainty(UncertaintyArgs),
    /// Grad-CAM heatmap from exported activations and gradients.
    Gradcam(GradcamArgs),
    /// Write a synthetic ground truth/prediction pair with its expected metrics.
    Phantom(PhantomArgs),
}

/// Case inputs: a directory using the `{case}_gt.mhd` / `{case}_pred.mhd` /
/// `{case}_prob.mhd` / `{case}_region.mhd` naming, or a manifest.
#[derive(Debug, Clone, Args)]
pub struct CaseInputArgs {
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub input_dir: Option<PathBuf>,
    /// JSON manifest listing cases explicitly.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Class table JSON (list of names, background first). Default: header names,
    /// else background plus the five lesion classes.
    #[arg(long)]
    pub classes: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub cases: CaseInputArgs,
    /// Surface tolerance in millimetres.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE_MM, conflicts_with = "tolerance_px")]
    pub tolerance_mm: f64,
    /// Surface tolerance in pixels of the largest in-plane spacing of each case.
    #[arg(long)]
    pub tolerance_px: Option<f64>,
    /// Region mask applied to every case (overrides `{case}_region.mhd`).
    #[arg(long)]
    pub region: Option<PathBuf>,
    /// Skip AUC.
    #[arg(long)]
    pub no_auc: bool,
    /// Cap AUC samples per side by stride subsampling.
    #[arg(long)]
    pub auc_subsample: Option<usize>,
    /// Directory receiving `cases.<fmt>` and `aggregate.<fmt>`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CorrelateArgs {
    #[command(flatten)]
    pub cases: CaseInputArgs,
    /// CSV with `case_id,fev1_percent`.
    #[arg(long)]
    pub pft: PathBuf,
    #[arg(long, value_enum, default_value_t = SidednessArg::TwoSided)]
    pub sidedness: SidednessArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SidednessArg {
    TwoSided,
    OneSided,
}

impl From<SidednessArg> for Sidedness {
    fn from(s: SidednessArg) -> Self {
        match s {
            SidednessArg::TwoSided => Sidedness::TwoSided,
            SidednessArg::OneSided => Sidedness::OneSided,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct LossCheckArgs {
    /// Label volume used as the one-hot target.
    #[arg(long, requires = "p", conflicts_with = "random")]
    pub y: Option<PathBuf>,
    /// Probability volume with one channel per class.
    #[arg(long, requires = "y")]
    pub p: Option<PathBuf>,
    /// Random grid `NXxNYxNZxC`.
    #[arg(long, required_unless_present = "y")]
    pub random: Option<GridDims>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Blend weights for the Dice/top-k loss.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75, 1.0])]
    pub alpha: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_K_FRACTION)]
    pub k_fraction: f64,
    #[command(flatten)]
    pub loss: LossFlags,
    /// Optional JSON copy of the result table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct LossFlags {
    #[arg(long, value_enum, default_value_t = DiceConventionArg::Complement)]
    pub dice_convention: DiceConventionArg,
    #[arg(long, value_enum, default_value_t = TopKNormalizationArg::Total)]
    pub top_k_normalization: TopKNormalizationArg,
    /// Average over the background channel too.
    #[arg(long)]
    pub include_background: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiceConventionArg {
    Complement,
    Raw,
}

impl From<DiceConventionArg> for DiceConvention {
    fn from(d: DiceConventionArg) -> Self {
        match d {
            DiceConventionArg::Complement => DiceConvention::Complement,
            DiceConventionArg::Raw => DiceConvention::Raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TopKNormalizationArg {
    Total,
    Selected,
}

impl From<TopKNormalizationArg> for TopKNormalization {
    fn from(t: TopKNormalizationArg) -> Self {
        match t {
            TopKNormalizationArg::Total => TopKNormalization::Total,
            TopKNormalizationArg::Selected => TopKNormalization::Selected,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct UncertaintyArgs {
    /// Member probability volumes (at least two).
    #[arg(long, num_args = 1.., required = true)]
    pub members: Vec<PathBuf>,
    #[arg(long)]
    pub region: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Population)]
    pub estimator: EstimatorArg,
    /// Variance volume (`.mhd`).
    #[arg(long)]
    pub out_volume: PathBuf,
    /// Summary report.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Population,
    Sample,
}

impl From<EstimatorArg> for VarianceEstimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Population => VarianceEstimator::Population,
            EstimatorArg::Sample => VarianceEstimator::Sample,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub activations: PathBuf,
    #[arg(long)]
    pub gradients: PathBuf,
    /// Output grid, e.g. `64x64x32`; default keeps the feature grid.
    #[arg(long)]
    pub target_dims: Option<GridDims>,
    /// Normalized heatmap (`.mhd`, one-channel tensor).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    /// PhantomSpec JSON.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Case id prefix; default is the spec file stem.
    #[arg(long)]
    pub case_id: Option<String>,
    /// Number of cases; case i uses seed + i and id `<case>_<iii>`.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

/// `AxBxC...` grid sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridDims(pub Vec<usize>);

impl std::str::FromStr for GridDims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let dims = s
            .split(['x', 'X', ','])
            .map(|t| t.trim().parse::<usize>().map_err(|_| format!("`{t}` in `{s}` is not a size")))
            .collect::<Result<Vec<_>, _>>()?;
        if dims.contains(&0) {
            return Err(format!("`{s}` has a zero size"));
        }
        Ok(GridDims(dims))
    }
}

impl fmt::Display for GridDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

/// Error that ends a command with exit code 1.
#[derive(Debug)]
pub struct CliError(pub String);

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<airwayseg::Error> for CliError {
    fn from(e: airwayseg::Error) -> Self {
        CliError(e.to_string())
    }
}

impl From<String> for CliError {
    fn from(s: String) -> Self {
        CliError(s)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn load_classes(path: Option<&Path>) -> CliResult<Option<ClassTable>> {
    path.map(|p| {
        let text = std::fs::read_to_string(p).map_err(|e| CliError(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError(format!("{}: {e}", p.display())))
    })
    .transpose()
}

/// Runs one parsed command inside a pool of the requested size.
pub fn execute(cli: Cli) -> i32 {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_INPUT;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_INPUT;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Evaluate(a) => commands::evaluate::run(a),
        Command::Correlate(a) => commands::correlate::run(a),
        Command::LossCheck(a) => commands::loss_check::run(a),
        Command::Uncertainty(a) => commands::uncertainty::run(a),
        Command::Gradcam(a) => commands::gradcam::run(a),
        Command::Phantom(a) => commands::phantom::run(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

/// Parses `args` (program name first) and runs the command. Usage errors map to
/// exit code 1; `--help` and `--version` to 0.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_INPUT
            } else {
                EXIT_OK
            }
        }
    }
}
