//! `netmfd` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or arguments,
//! 3 estimator not applicable to the data, 4 numeric failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use netmfd::{Error, ErrorClass};

use crate::output::BinSet;

#[derive(Debug, Parser)]
#[command(
    name = "netmfd",
    version,
    about = "Network-wide flow, density and MFD estimation from sparse detectors"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Seed for coverage sampling and synthetic generation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Time bins to process, e.g. `0-5,8`.
    #[arg(long, global = true, value_parser = output::parse_bins)]
    pub bins: Option<BinSet>,
    /// Directory for output tables; the main table goes to stdout when absent.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Table delimiter for outputs.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Tsv,
}

/// Network and detector tables.
#[derive(Debug, Clone, Args)]
pub struct SiteArgs {
    /// Link table: link_id, from_node, to_node, length_km, hierarchy.
    #[arg(long)]
    pub network: PathBuf,
    /// Detector table: detector_id, link_id[, offset_fraction].
    #[arg(long)]
    pub detectors: PathBuf,
}

/// Network, detectors, readings and an optional coverage plan.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[command(flatten)]
    pub sites: SiteArgs,
    /// Reading table: detector_id, bin_index, flow_veh_per_h, density_veh_per_km[, speed_km_per_h].
    #[arg(long)]
    pub readings: PathBuf,
    /// Coverage plan from `sample`; only its retained detectors are used.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub bin_duration_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Uniform,
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UniformModeArg {
    ExactEquipped,
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariableArg {
    Flow,
    Density,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Spherical,
    Exponential,
    Gaussian,
}

/// Variogram binning and fitting.
#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Model kinds to try; the lowest weighted RSS wins.
    #[arg(long = "kind", value_enum, num_args = 1.., default_values_t = [KindArg::Spherical, KindArg::Exponential, KindArg::Gaussian])]
    pub kinds: Vec<KindArg>,
    #[arg(long, default_value_t = 15)]
    pub n_bins: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lo_percentile: f64,
    #[arg(long, default_value_t = 95.0)]
    pub hi_percentile: f64,
    /// Bins with fewer pairs are left out of the fit.
    #[arg(long, default_value_t = 5)]
    pub min_pairs: usize,
    /// Fit only nugget and sill at this range.
    #[arg(long)]
    pub fixed_range_km: Option<f64>,
    /// Respect link direction in network distances.
    #[arg(long)]
    pub directed: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate network, detector and (optionally) reading files.
    Ingest {
        #[command(flatten)]
        sites: SiteArgs,
        #[arg(long)]
        readings: Option<PathBuf>,
    },
    /// Draw a stratified coverage plan.
    Sample {
        #[command(flatten)]
        sites: SiteArgs,
        /// Share of each hierarchy's detectors to keep.
        #[arg(long, conflicts_with = "counts", required_unless_present = "counts")]
        fraction: Option<f64>,
        /// Explicit detectors per hierarchy, e.g. `1=12,2=22,3=8`.
        #[arg(long)]
        counts: Option<String>,
    },
    /// Uniform and hierarchical scaling estimates per bin.
    Scale {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "method", value_enum, num_args = 1.., default_values_t = [MethodArg::Uniform, MethodArg::Hierarchical])]
        methods: Vec<MethodArg>,
        #[arg(long, value_enum, default_value_t = UniformModeArg::ExactEquipped)]
        uniform_mode: UniformModeArg,
        /// Hierarchy relabelling for the hierarchical method, e.g. `3=2`.
        #[arg(long)]
        merge: Option<String>,
    },
    /// Empirical variograms and fitted models per bin.
    Variogram {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "variable", value_enum, num_args = 1.., default_values_t = [VariableArg::Flow, VariableArg::Density])]
        variables: Vec<VariableArg>,
        #[command(flatten)]
        fit: FitArgs,
        /// Fit one model to all bins pooled.
        #[arg(long)]
        reuse_fit: bool,
    },
    /// Krige every non-equipped link and report network means.
    Impute {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Fit one model to all bins pooled instead of one per bin.
        #[arg(long)]
        reuse_fit: bool,
        /// Use this model instead of fitting.
        #[arg(long, value_enum, requires_all = ["sill", "range_km"])]
        model: Option<KindArg>,
        #[arg(long, default_value_t = 0.0)]
        nugget: f64,
        #[arg(long)]
        sill: Option<f64>,
        #[arg(long)]
        range_km: Option<f64>,
        #[arg(long, default_value_t = 16)]
        max_neighbors: usize,
        #[arg(long, default_value_t = 3)]
        min_neighbors: usize,
        /// Minimum share of network length the field must cover.
        #[arg(long, default_value_t = netmfd::geostat::DEFAULT_COVERAGE_THRESHOLD)]
        coverage_threshold: f64,
    },
    /// Build an MFD from a per-bin estimate table and fit a quadratic.
    Mfd {
        /// Table with bin_index, flow_veh_per_h, density_veh_per_km.
        #[arg(long)]
        input: PathBuf,
        /// Rows to use when the table has a `method` column.
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        /// Prediction bands instead of mean-response bands.
        #[arg(long)]
        prediction: bool,
        /// Abscissae in the band table.
        #[arg(long, default_value_t = 41)]
        samples: usize,
    },
    /// Accuracy metrics against truth and a paired t-test between two estimates.
    Evaluate {
        /// Estimate table with bin_index and the variable's column.
        #[arg(long)]
        estimated: PathBuf,
        /// Truth table; without it only the t-test is reported.
        #[arg(long)]
        actual: Option<PathBuf>,
        /// Second estimate table, tested against `--estimated`.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        compare_method: Option<String>,
        #[arg(long, value_enum, default_value_t = VariableArg::Flow)]
        variable: VariableArg,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Generate a synthetic scenario with full-coverage truth.
    Synth {
        /// TOML scenario; the built-in three-hierarchy grid when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        days: Option<usize>,
    },
    /// Run the coverage × seed × estimator grid.
    Experiment {
        /// TOML experiment configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::class);
    match class {
        Some(ErrorClass::Validation) => 2,
        Some(ErrorClass::NotApplicable) => 3,
        Some(ErrorClass::Numeric) => 4,
        Some(ErrorClass::Io) | None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
