//! Command-line front end: `run`, `diagnose`, `simulate` and `calibrate`.
//!
//! Results go to `--output` (or stdout); warnings go to stderr as JSON lines.
//! Exit status is 0 on success, 2 for input errors and 3 for numerical failures.

mod diagnose;

pub use diagnose::{
    central_fit_score, diagnostics, histogram, resample_stability, Diagnostics, Histogram, ResampleCheck,
    HISTOGRAM_BINS, RESAMPLE_DROP, RESAMPLE_FLAG_RANGE,
};

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::correlation::{PairCorrelations, Scale};
use crate::dataset_io::{load_dataset, standardize_outcomes, CleaningPolicy, RegressionDataset, Schema};
use crate::error::{Module, Result, TmoError};
use crate::null_threshold::{BinDistance, BinFit};
use crate::pipeline::{self, Augment, NullSpec, PipelineOptions, PipelineOutput};
use crate::regression::FixedEffectMode;
use crate::simulation::{calibrate_sigma, run_horserace, CalibratedSigma, SimulateConfig};
use crate::variance::{Kernel, Method};
use crate::warnings::{to_json_lines, Warning};

#[derive(Debug, Parser)]
#[command(
    name = "tmo",
    version,
    about = "Standard errors adjusted for cross-sectional correlation using auxiliary outcomes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "TMO_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Seed for resampling (`diagnose`) or simulation draws (`simulate`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the coefficient and its TMO standard error.
    Run(RunArgs),
    /// Emit the null fit, threshold curve and stability checks.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo comparison of standard errors from a TOML config.
    Simulate(SimulateArgs),
    /// Build a block covariance file from pair correlations.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Delimited input file, one row per unit (and period).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `key = value` schema file; flags below override its entries.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub treatment: Option<String>,
    /// Auxiliary outcome columns; `prefix*` selects by prefix.
    #[arg(long, value_delimiter = ',')]
    pub aux: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub fixed_effects: Vec<String>,
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub instrument: Option<String>,
    /// Cluster column; also adds the cluster-robust baseline.
    #[arg(long)]
    pub cluster: Option<String>,
    /// Latitude and longitude columns, `LAT,LON`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub coords: Vec<String>,
    #[arg(long)]
    pub period: Option<String>,
    #[arg(long)]
    pub unit: Option<String>,
    /// Field delimiter: a single character, `tab` or `comma`.
    #[arg(long)]
    pub delimiter: Option<String>,
    /// Standardize auxiliary outcomes within period.
    #[arg(long)]
    pub standardize: bool,
    /// Winsorize standardized auxiliary outcomes at `LO,HI` fractions.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub winsorize: Vec<f64>,
    /// Drop auxiliary columns missing for more than this fraction of rows.
    #[arg(long, default_value_t = 0.5)]
    pub drop_missing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NullArg {
    Iqr,
    Binned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Uniform,
    Bartlett,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Fisher,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistanceArg {
    L1,
    L2,
    Linf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitArg {
    Density,
    Mass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AugmentArg {
    None,
    Cluster,
    Distance,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct MethodArgs {
    /// Conley bandwidth; also adds the Conley baseline.
    #[arg(long)]
    pub bandwidth_miles: Option<f64>,
    #[arg(long, value_enum, default_value_t = KernelArg::Uniform)]
    pub kernel: KernelArg,
    #[arg(long, value_enum, default_value_t = NullArg::Iqr)]
    pub null_method: NullArg,
    /// Tail fraction trimmed from each side by the binned null fit.
    #[arg(long, default_value_t = 0.2)]
    pub trim_q: f64,
    #[arg(long, value_enum, default_value_t = DistanceArg::L2)]
    pub bin_distance: DistanceArg,
    #[arg(long, value_enum, default_value_t = FitArg::Density)]
    pub bin_fit: FitArg,
    #[arg(long, value_enum, default_value_t = ScaleArg::Fisher)]
    pub scale: ScaleArg,
    /// Fixed threshold on the active scale instead of the fitted δ*.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Comparison methods: hc0, hc1, cluster, conley.
    #[arg(long, value_delimiter = ',', default_value = "hc0,hc1")]
    pub baselines: Vec<String>,
    /// Denominator of the SE ratios.
    #[arg(long, default_value = "hc1")]
    pub reference: String,
    /// Pairs never thresholded.
    #[arg(long, value_enum, default_value_t = AugmentArg::None)]
    pub augment: AugmentArg,
    /// Scale the TMO variance by N/(N − k − 2).
    #[arg(long)]
    pub tmo_hc1: bool,
    #[arg(long)]
    pub cluster_small_sample: bool,
    /// Absorb the first fixed effect by demeaning instead of indicators.
    #[arg(long)]
    pub fe_within: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Write the pair table (`.bin` for binary, otherwise CSV).
    #[arg(long)]
    pub emit_pairs: Option<PathBuf>,
    /// Use a precomputed pair table instead of computing correlations.
    #[arg(long)]
    pub pairs_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long)]
    pub pairs_file: Option<PathBuf>,
    /// Outcome resamples for the δ* stability check; 0 disables it.
    #[arg(long, default_value_t = 20)]
    pub resamples: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override the replicate count in the config.
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Pair table (`.bin` or CSV); otherwise computed from the dataset flags.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 0.45)]
    pub cutoff: f64,
    #[command(flatten)]
    pub data: DataArgs,
}

fn input_error(msg: impl Into<String>) -> TmoError {
    TmoError::invalid(Module::Cli, msg)
}

fn parse_delimiter(s: &str) -> Result<u8> {
    match s {
        "tab" | "\\t" => Ok(b'\t'),
        "comma" => Ok(b','),
        s if s.len() == 1 => Ok(s.as_bytes()[0]),
        _ => Err(input_error(format!("unsupported delimiter `{s}`"))),
    }
}

impl DataArgs {
    pub fn schema(&self) -> Result<Schema> {
        let mut s = match &self.schema {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| TmoError::io(p.display().to_string(), e))?;
                Schema::from_config_str(&text)?
            }
            None => Schema::new("", "", &[]),
        };
        if let Some(v) = &self.outcome {
            s.outcome = v.clone();
        }
        if let Some(v) = &self.treatment {
            s.treatment = v.clone();
        }
        if !self.aux.is_empty() {
            s.aux = self.aux.clone();
        }
        if !self.covariates.is_empty() {
            s.covariates = self.covariates.clone();
        }
        if !self.fixed_effects.is_empty() {
            s.fixed_effects = self.fixed_effects.clone();
        }
        s.weights = self.weights.clone().or(s.weights);
        s.instrument = self.instrument.clone().or(s.instrument);
        s.cluster = self.cluster.clone().or(s.cluster);
        s.period = self.period.clone().or(s.period);
        s.unit = self.unit.clone().or(s.unit);
        match self.coords.as_slice() {
            [] => {}
            [lat, lon] => s.coords = Some((lat.clone(), lon.clone())),
            _ => return Err(input_error("--coords takes two column names, LAT,LON")),
        }
        if let Some(d) = &self.delimiter {
            s.delimiter = parse_delimiter(d)?;
        }
        if s.outcome.is_empty() || s.treatment.is_empty() || s.aux.is_empty() {
            return Err(input_error("outcome, treatment and auxiliary columns are required (flags or --schema)"));
        }
        Ok(s)
    }

    pub fn load(&self) -> Result<RegressionDataset> {
        let path = self.data.as_ref().ok_or_else(|| input_error("--data is required"))?;
        let schema = self.schema()?;
        let mut policy =
            CleaningPolicy { drop_missing_threshold: self.drop_missing, ..CleaningPolicy::no_winsorization() };
        let ds = load_dataset(path, &schema, &policy)?;
        match self.winsorize.as_slice() {
            [] => {}
            [lo, hi] => {
                policy.winsor_lo = *lo;
                policy.winsor_hi = *hi;
            }
            _ => return Err(input_error("--winsorize takes two fractions, LO,HI")),
        }
        if self.standardize || !self.winsorize.is_empty() {
            return standardize_outcomes(ds, &policy);
        }
        Ok(ds)
    }
}

impl MethodArgs {
    pub fn options(&self, ds: &RegressionDataset) -> Result<PipelineOptions> {
        let scale = match self.scale {
            ScaleArg::Fisher => Scale::Fisher,
            ScaleArg::Raw => Scale::Raw,
        };
        let null = match self.null_method {
            NullArg::Iqr => NullSpec::Iqr,
            NullArg::Binned => NullSpec::Binned {
                trim_q: self.trim_q,
                distance: match self.bin_distance {
                    DistanceArg::L1 => BinDistance::L1,
                    DistanceArg::L2 => BinDistance::L2,
                    DistanceArg::Linf => BinDistance::Linf,
                },
                fit: match self.bin_fit {
                    FitArg::Density => BinFit::Density,
                    FitArg::Mass => BinFit::Mass,
                },
            },
        };
        let parse = |s: &str| Method::parse(s).ok_or_else(|| input_error(format!("unknown method `{s}`")));
        let mut baselines = self.baselines.iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
        if ds.clusters.is_some() && !baselines.contains(&Method::Cluster) {
            baselines.push(Method::Cluster);
        }
        if ds.coords.is_some() && self.bandwidth_miles.is_some() && !baselines.contains(&Method::Conley) {
            baselines.push(Method::Conley);
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0) {
                return Err(input_error("--threshold must be positive"));
            }
        }
        Ok(PipelineOptions {
            scale,
            null,
            threshold_override: self.threshold,
            fixed_effects: if self.fe_within { FixedEffectMode::Within } else { FixedEffectMode::Indicators },
            augment: match self.augment {
                AugmentArg::None => Augment::None,
                AugmentArg::Cluster => Augment::Cluster,
                AugmentArg::Distance => Augment::Distance,
                AugmentArg::Both => Augment::Both,
            },
            bandwidth_miles: self.bandwidth_miles,
            kernel: match self.kernel {
                KernelArg::Uniform => Kernel::Uniform,
                KernelArg::Bartlett => Kernel::Bartlett,
            },
            baselines,
            reference: parse(&self.reference)?,
            tmo_hc1: self.tmo_hc1,
            cluster_small_sample: self.cluster_small_sample,
            scpc_basis: None,
        })
    }
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

pub fn read_pairs(path: &Path, scale: Scale) -> Result<PairCorrelations> {
    if is_binary(path) {
        PairCorrelations::read_binary(path, scale)
    } else {
        PairCorrelations::read_csv(path, scale)
    }
}

pub fn write_pairs(pc: &PairCorrelations, path: &Path) -> Result<()> {
    if is_binary(path) {
        pc.write_binary(path)
    } else {
        pc.write_csv(path)
    }
}

fn run_or_pairs(ds: &RegressionDataset, opts: &PipelineOptions, pairs: Option<&Path>) -> Result<PipelineOutput> {
    match pairs {
        Some(p) => pipeline::run_with_pairs(ds, read_pairs(p, opts.scale)?, opts),
        None => pipeline::run_pipeline(ds, opts),
    }
}

/// Rendered output and the warnings to report.
pub struct CommandOutput {
    pub body: String,
    pub warnings: Vec<Warning>,
}

pub fn cmd_run(args: &RunArgs, format: Format) -> Result<CommandOutput> {
    let ds = args.data.load()?;
    let opts = args.method.options(&ds)?;
    let out = run_or_pairs(&ds, &opts, args.pairs_file.as_deref())?;
    if let Some(p) = &args.emit_pairs {
        write_pairs(&out.pairs, p)?;
    }
    log::info!(
        "delta* = {} keeps {} of {} pairs",
        out.threshold.delta_star,
        out.keep.n_threshold,
        out.keep.n_candidates
    );
    let body = match format {
        Format::Json => out.report.to_json(),
        Format::Csv => out.report.to_csv(),
        Format::Table => out.report.to_table(),
    };
    Ok(CommandOutput { body, warnings: out.report.warnings.clone() })
}

pub fn cmd_diagnose(args: &DiagnoseArgs, format: Format, seed: u64) -> Result<CommandOutput> {
    let ds = args.data.load()?;
    let opts = args.method.options(&ds)?;
    let out = run_or_pairs(&ds, &opts, args.pairs_file.as_deref())?;
    let resampling = if args.pairs_file.is_none() && args.resamples > 0 {
        let never = pipeline::never_threshold_for(&ds, &opts)?;
        Some(resample_stability(&out, &opts, &never, args.resamples, seed)?)
    } else {
        None
    };
    let diag = diagnostics(&out, resampling);
    let mut warnings = out.report.warnings.clone();
    if diag.resampling.as_ref().is_some_and(|r| r.unstable) {
        warnings.push(Warning::new(
            Module::Cli,
            "unstable_threshold",
            "delta* moves by more than 0.1 when 5% of outcomes are dropped",
        ));
    }
    let body = match format {
        Format::Json => serde_json::to_string_pretty(&diag).expect("diagnostics serialize"),
        Format::Csv => {
            let mut s = String::from("delta,q\n");
            for (d, q) in &diag.q_curve {
                let _ = writeln!(s, "{d},{q}");
            }
            s
        }
        Format::Table => {
            let mut s = String::new();
            let _ = writeln!(
                s,
                "null variance     {:.6e}  (df {:.3}, {:?})",
                diag.null.v_hat, diag.null.df_hat, diag.null.method
            );
            let _ = writeln!(s, "delta*            {:.6}  (correlation {:.6})", diag.delta_star, diag.delta_star_rho);
            let _ = writeln!(s, "bonferroni        {:.6}", diag.bonferroni_delta);
            let _ = writeln!(s, "kept fraction     {:.6}", diag.kept_fraction);
            let _ = writeln!(s, "central fit       {:.6}", diag.central_fit_score);
            if let Some(r) = &diag.resampling {
                let _ = writeln!(s, "resample range    {:.6}{}", r.range, if r.unstable { "  UNSTABLE" } else { "" });
            }
            s
        }
    };
    Ok(CommandOutput { body, warnings })
}

pub fn cmd_simulate(args: &SimulateArgs, format: Format, seed: Option<u64>) -> Result<CommandOutput> {
    let mut cfg = SimulateConfig::load(&args.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = args.reps {
        cfg.reps = r;
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    let (sigma, w, hr) = cfg.build(base)?;
    let res = run_horserace(&sigma, &w, &hr)?;
    let body = match format {
        Format::Json => res.to_json(),
        Format::Csv => res.to_csv(),
        Format::Table => res.to_table(),
    };
    Ok(CommandOutput { body, warnings: res.warnings.clone() })
}

pub fn cmd_calibrate(args: &CalibrateArgs, format: Format) -> Result<CommandOutput> {
    let pc = match &args.pairs {
        Some(p) => read_pairs(p, Scale::Raw)?,
        None => {
            let ds = args.data.load()?;
            ds.validate()?;
            let rp = pipeline::fit(&ds, FixedEffectMode::Indicators)?;
            pipeline::correlations(&rp, Scale::Raw)?
        }
    };
    let sigma: CalibratedSigma = calibrate_sigma(&pc, args.cutoff)?;
    let body = match format {
        Format::Table => {
            let mut s = String::new();
            let _ = writeln!(s, "units {}  blocks {}  cutoff {}", sigma.n, sigma.blocks.len(), sigma.cutoff);
            let _ = writeln!(s, "retained pair fraction {:.4}", sigma.retained_pair_fraction);
            for b in &sigma.blocks {
                let _ = writeln!(s, "block {}: {:?}", b.id, b.members);
            }
            s
        }
        _ => sigma.to_json(),
    };
    Ok(CommandOutput { body, warnings: sigma.warnings.clone() })
}

pub fn dispatch(cli: &Cli) -> Result<CommandOutput> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, cli.format),
        Command::Diagnose(a) => cmd_diagnose(a, cli.format, cli.seed.unwrap_or(0)),
        Command::Simulate(a) => cmd_simulate(a, cli.format, cli.seed),
        Command::Calibrate(a) => cmd_calibrate(a, cli.format),
    }
}

fn emit(cli: &Cli, out: &CommandOutput) -> Result<()> {
    let mut body = out.body.clone();
    if !body.ends_with('\n') {
        body.push('\n');
    }
    match &cli.output {
        Some(p) => std::fs::write(p, body).map_err(|e| TmoError::io(p.display().to_string(), e))?,
        None => {
            let _ = std::io::stdout().write_all(body.as_bytes());
        }
    }
    let _ = std::io::stderr().write_all(to_json_lines(&out.warnings).as_bytes());
    Ok(())
}

/// Parse arguments, run the command and return the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        pool = pool.num_threads(t);
    }
    let result = match pool.build() {
        Ok(p) => p.install(|| dispatch(&cli).and_then(|out| emit(&cli, &out))),
        Err(e) => Err(input_error(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
