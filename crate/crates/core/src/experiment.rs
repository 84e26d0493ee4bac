//! Experiment grid: coverage fractions × sampling seeds × estimators, scored
//! against full-coverage truth, with plot-ready output tables.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorClass, Result};
use crate::geostat::{
    autofit_pooled, impute_network, network_mean_from_field, AutoFit, ImputeParams, ImputedField, ModelSource,
    VariogramModelSpec, DEFAULT_COVERAGE_THRESHOLD,
};
use crate::mfd::{
    build_mfd, compute_metrics_grouped, fit_quadratic_with_ci, paired_t_test, speed_series_from_mfd, BandKind,
    MetricsPooling, MetricsReport, MfdPoint, PairedTTestResult, QuadraticFit,
};
use crate::network::{
    load_network_path, load_sites_path, DetectorSite, DistanceMode, Network, DEFAULT_OFFSET_FRACTION,
};
use crate::scaling::{hierarchical_scaled_mean, uniform_scaled_mean, HierarchyPartition, UniformMode};
use crate::sensing::{
    aggregate_to_links, edie_network_truth, group_by_bin, load_readings_path, sample_coverage, CoveragePlan,
    DetectorReading, LinkObservation, NetworkMeans, TimeBin, Variable,
};
use crate::synth::{generate_scenario, SyntheticScenario};
use crate::table::{opt_cell, write_atomic, Table, TableFormat};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Uniform,
    Hierarchical,
    Variogram,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Uniform, Estimator::Hierarchical, Estimator::Variogram];
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Uniform => "uniform",
            Estimator::Hierarchical => "hierarchical",
            Estimator::Variogram => "variogram",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Estimator::Uniform),
            "hierarchical" => Ok(Estimator::Hierarchical),
            "variogram" => Ok(Estimator::Variogram),
            other => Err(Error::Argument(format!("unknown estimator '{other}'"))),
        }
    }
}

/// Where the experiment data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic {
        #[serde(default = "default_scenario")]
        scenario: SyntheticScenario,
    },
    Files {
        network: PathBuf,
        detectors: PathBuf,
        readings: PathBuf,
        #[serde(default = "one")]
        bin_duration_h: f64,
    },
}

fn default_scenario() -> SyntheticScenario {
    SyntheticScenario::athens_like(1)
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariogramSettings {
    /// Fixed model; when absent a model is fitted to every bin.
    pub model: Option<VariogramModelSpec>,
    pub autofit: AutoFit,
    /// Fit once per cell on all bins pooled instead of refitting per bin.
    pub reuse_fit: bool,
    pub impute: ImputeParams,
    /// Minimum share of network length the imputed field must cover.
    pub coverage_threshold: f64,
}

impl Default for VariogramSettings {
    fn default() -> Self {
        VariogramSettings {
            model: None,
            autofit: AutoFit::default(),
            reuse_fit: false,
            impute: ImputeParams::default(),
            coverage_threshold: DEFAULT_COVERAGE_THRESHOLD,
        }
    }
}

/// Model sources for flow and density of one cell.
struct CellModels {
    flow: ModelSource,
    density: ModelSource,
}

impl VariogramSettings {
    fn models(
        &self,
        data: &Dataset,
        obs: &BTreeMap<u32, Vec<LinkObservation>>,
        kept: &[DetectorSite],
    ) -> Result<CellModels> {
        if let Some(m) = self.model {
            return Ok(CellModels {
                flow: ModelSource::Fixed(m),
                density: ModelSource::Fixed(m),
            });
        }
        if !self.reuse_fit {
            let auto = ModelSource::AutoFit(self.autofit.clone());
            return Ok(CellModels {
                flow: auto.clone(),
                density: auto,
            });
        }
        let bins: Vec<&[LinkObservation]> = obs.values().map(Vec::as_slice).collect();
        let fit = |v| autofit_pooled(&bins, &data.network, kept, v, &self.autofit, self.impute.distance_mode);
        Ok(CellModels {
            flow: ModelSource::Fixed(fit(Variable::Flow)?),
            density: ModelSource::Fixed(fit(Variable::Density)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub coverages: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "all_estimators")]
    pub estimators: Vec<Estimator>,
    /// Mixed into every per-cell sampling seed.
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub variogram: VariogramSettings,
    #[serde(default)]
    pub uniform_mode: UniformMode,
    /// Optional relabelling of hierarchies for the hierarchical estimator,
    /// e.g. `{ 3 = 2 }` merges class 3 into class 2.
    #[serde(default, deserialize_with = "class_map")]
    pub hierarchy_map: BTreeMap<u32, u32>,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub pooling: MetricsPooling,
    /// Abscissae per fitted band table.
    #[serde(default = "default_band_samples")]
    pub band_samples: usize,
    /// Restricts the run to these time bins; all bins when absent.
    #[serde(default)]
    pub bins: Option<Vec<u32>>,
    /// Bins whose per-link fields are kept; defaults to the peak-flow bin.
    #[serde(default)]
    pub field_map_bins: Option<Vec<u32>>,
    /// Worker threads for the grid; all cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Class maps arrive with string keys from formats such as TOML.
fn class_map<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<u32, u32>, D::Error> {
    let raw = BTreeMap::<String, u32>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| {
            k.trim()
                .parse()
                .map(|k| (k, v))
                .map_err(|_| serde::de::Error::custom(format!("hierarchy class '{k}' is not an integer")))
        })
        .collect()
}

fn all_estimators() -> Vec<Estimator> {
    Estimator::ALL.to_vec()
}

fn default_confidence() -> f64 {
    0.95
}

fn default_alpha() -> f64 {
    0.05
}

fn default_band_samples() -> usize {
    41
}

impl ExperimentConfig {
    /// Default synthetic grid at the given coverages and seeds.
    pub fn synthetic(scenario: SyntheticScenario, coverages: Vec<f64>, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic { scenario },
            coverages,
            seeds,
            estimators: all_estimators(),
            master_seed: 0,
            variogram: VariogramSettings::default(),
            uniform_mode: UniformMode::default(),
            hierarchy_map: BTreeMap::new(),
            confidence: default_confidence(),
            alpha: default_alpha(),
            pooling: MetricsPooling::default(),
            band_samples: default_band_samples(),
            bins: None,
            field_map_bins: None,
            workers: None,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coverages.is_empty() || self.seeds.is_empty() {
            return Err(Error::Argument("need at least one coverage and one seed".into()));
        }
        if let Some(c) = self.coverages.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
            return Err(Error::Argument(format!("coverage fraction {c} outside (0, 1]")));
        }
        if self.estimators.is_empty() {
            return Err(Error::Argument("select at least one estimator".into()));
        }
        let unique = |n: usize, m: usize, what: &str| {
            if n == m {
                Ok(())
            } else {
                Err(Error::Argument(format!("duplicate {what} in the grid")))
            }
        };
        unique(
            self.coverages.iter().map(|c| c.to_bits()).collect::<HashSet<_>>().len(),
            self.coverages.len(),
            "coverages",
        )?;
        unique(
            self.seeds.iter().collect::<HashSet<_>>().len(),
            self.seeds.len(),
            "seeds",
        )?;
        unique(
            self.estimators.iter().collect::<HashSet<_>>().len(),
            self.estimators.len(),
            "estimators",
        )?;
        if !(self.confidence > 0.0 && self.confidence < 1.0) || !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Argument("confidence and alpha must lie in (0, 1)".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Argument("workers must be at least 1".into()));
        }
        if let Some(m) = &self.variogram.model {
            m.validate()?;
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sampling seed of one (coverage, seed) cell; independent of scheduling
/// and shared by every estimator so their comparison is paired.
pub fn cell_seed(master: u64, coverage: f64, seed: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ coverage.to_bits()) ^ seed)
}

/// Network, detectors and readings, plus truth where every link is observed.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub network: Network,
    pub sites: Vec<DetectorSite>,
    pub bins: Vec<TimeBin>,
    pub readings: Vec<DetectorReading>,
    /// Edie means of the bins where every link has an observation.
    pub truth: BTreeMap<u32, NetworkMeans>,
    /// Per-link observations from all detectors, by bin.
    pub full_links: BTreeMap<u32, Vec<LinkObservation>>,
}

impl Dataset {
    pub fn from_parts(
        network: Network,
        sites: Vec<DetectorSite>,
        readings: Vec<DetectorReading>,
        bin_duration_h: f64,
    ) -> Result<Self> {
        let full_links = group_by_bin(&aggregate_to_links(&readings, &sites)?);
        let bins: Vec<TimeBin> = readings
            .iter()
            .map(|r| r.bin_index)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|b| TimeBin::regular(b, bin_duration_h))
            .collect();
        let mut truth = BTreeMap::new();
        for (bin, obs) in &full_links {
            match edie_network_truth(obs, &network) {
                Ok(m) => {
                    truth.insert(*bin, m);
                }
                Err(Error::MissingLinks(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(Dataset {
            network,
            sites,
            bins,
            readings,
            truth,
            full_links,
        })
    }

    pub fn from_scenario(spec: &SyntheticScenario) -> Result<Self> {
        let g = generate_scenario(spec)?;
        let readings = g
            .observations
            .iter()
            .map(|o| DetectorReading {
                detector_id: format!("D{}", o.link_id),
                bin_index: o.bin_index,
                flow_veh_per_h: o.flow_veh_per_h,
                density_veh_per_km: o.density_veh_per_km,
                speed_km_per_h: None,
            })
            .collect();
        Self::from_parts(g.network, g.sites, readings, spec.bin_duration_h)
    }

    pub fn load(source: &DataSource) -> Result<Self> {
        match source {
            DataSource::Synthetic { scenario } => Self::from_scenario(scenario),
            DataSource::Files {
                network,
                detectors,
                readings,
                bin_duration_h,
            } => {
                if !(*bin_duration_h > 0.0) {
                    return Err(Error::Argument(format!("bin duration {bin_duration_h} must be > 0")));
                }
                let net = load_network_path(network)?;
                let sites = load_sites_path(detectors, &net)?;
                let readings = load_readings_path(readings)?;
                Self::from_parts(net, sites, readings, *bin_duration_h)
            }
        }
    }

    /// The same dataset limited to the given bins.
    pub fn restrict_bins(&self, keep: &BTreeSet<u32>) -> Result<Dataset> {
        let bins: Vec<TimeBin> = self.bins.iter().filter(|b| keep.contains(&b.index)).copied().collect();
        if bins.is_empty() {
            return Err(Error::Argument(format!(
                "none of the requested bins {keep:?} has readings"
            )));
        }
        let kept = |bin: &u32| keep.contains(bin);
        Ok(Dataset {
            network: self.network.clone(),
            sites: self.sites.clone(),
            bins,
            readings: self.readings.iter().filter(|r| kept(&r.bin_index)).cloned().collect(),
            truth: self
                .truth
                .iter()
                .filter(|(b, _)| kept(b))
                .map(|(b, m)| (*b, *m))
                .collect(),
            full_links: self
                .full_links
                .iter()
                .filter(|(b, _)| kept(b))
                .map(|(b, o)| (*b, o.clone()))
                .collect(),
        })
    }

    /// True when every bin has a full-coverage truth value.
    pub fn has_truth(&self) -> bool {
        !self.bins.is_empty() && self.bins.iter().all(|b| self.truth.contains_key(&b.index))
    }

    fn day_of(bin: &TimeBin) -> i64 {
        (bin.start_h / 24.0).floor() as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Ok,
    NotEstimable,
    Failed,
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellStatus::Ok => "ok",
            CellStatus::NotEstimable => "not-estimable",
            CellStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinEstimate {
    pub bin_index: u32,
    pub flow: f64,
    pub density: f64,
}

/// Fitted MFD of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfdSummary {
    pub points: Vec<MfdPoint>,
    pub fit: QuadraticFit,
    /// `fit(k)/k` at each point's density.
    pub speeds: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub coverage: f64,
    pub seed: u64,
    pub estimator: Estimator,
    pub sample_seed: u64,
    pub status: CellStatus,
    pub message: Option<String>,
    pub plan: CoveragePlan,
    pub estimates: Vec<BinEstimate>,
    pub flow_metrics: Option<MetricsReport>,
    pub density_metrics: Option<MetricsReport>,
    pub mfd: Option<MfdSummary>,
    /// Fitted estimated MFD against fitted actual MFD, bin by bin.
    pub mfd_metrics: Option<MetricsReport>,
    /// Fitted-MFD speed against actual network speed.
    pub speed_metrics: Option<MetricsReport>,
    /// Largest failed-length share over the bins (variogram only).
    pub max_failed_length_fraction: Option<f64>,
    /// Imputed flow fields at the field-map bins (variogram only).
    pub fields: Vec<ImputedField>,
}

impl CellResult {
    pub fn id(&self) -> String {
        format!("{}_c{}_s{}", self.estimator, self.coverage, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub coverage: f64,
    pub seed: u64,
    /// `None` when either MFD is missing or the test is degenerate.
    pub result: Option<PairedTTestResult>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub coverage: f64,
    pub estimator: Estimator,
    pub ok: usize,
    pub not_estimable: usize,
    pub failed: usize,
    pub flow_rmse_median: Option<f64>,
    pub flow_rmse_mean: Option<f64>,
    pub density_rmse_median: Option<f64>,
    pub mfd_rmse_mean: Option<f64>,
    pub mfd_mae_mean: Option<f64>,
    pub mfd_mape_mean: Option<f64>,
    pub mfd_r2_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBin {
    pub bin_index: u32,
    pub flow: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentBundle {
    pub config: ExperimentConfig,
    pub bins: Vec<TimeBin>,
    pub truth: Vec<TruthBin>,
    pub actual_mfd: Option<MfdSummary>,
    /// Actual per-link flows at the field-map bins.
    pub truth_fields: Vec<(u32, Vec<(String, f64)>)>,
    /// Coverage-major, then seed, then estimator, in config order.
    pub cells: Vec<CellResult>,
    pub comparisons: Vec<PairedComparison>,
    pub summary: Vec<GridSummary>,
}

impl ExperimentBundle {
    /// A bundle with no data, e.g. for emitting table headers.
    pub fn empty(config: ExperimentConfig) -> Self {
        ExperimentBundle {
            config,
            bins: Vec::new(),
            truth: Vec::new(),
            actual_mfd: None,
            truth_fields: Vec::new(),
            cells: Vec::new(),
            comparisons: Vec::new(),
            summary: Vec::new(),
        }
    }
}

/// Shared read-only state of one run.
struct Context<'a> {
    config: &'a ExperimentConfig,
    data: &'a Dataset,
    field_bins: BTreeSet<u32>,
    actual_mfd: Option<&'a MfdSummary>,
}

fn fit_mfd(points: Vec<MfdPoint>, confidence: f64) -> Result<MfdSummary> {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.density_k, p.flow_q)).collect();
    let fit = fit_quadratic_with_ci(&xy, confidence)?;
    let ks: Vec<f64> = points.iter().map(|p| p.density_k).collect();
    let speeds = speed_series_from_mfd(&fit, &ks);
    Ok(MfdSummary { points, fit, speeds })
}

/// Loads the configured data and runs the whole grid.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentBundle> {
    config.validate()?;
    let data = Dataset::load(&config.data)?;
    run_experiment_on(config, &data)
}

/// Runs the grid on an already loaded dataset.
pub fn run_experiment_on(config: &ExperimentConfig, data: &Dataset) -> Result<ExperimentBundle> {
    config.validate()?;
    let restricted;
    let data = match &config.bins {
        Some(b) => {
            restricted = data.restrict_bins(&b.iter().copied().collect())?;
            &restricted
        }
        None => data,
    };
    if data.bins.is_empty() {
        return Err(Error::InsufficientData("dataset has no readings".into()));
    }
    let truth_ok = data.has_truth();
    let truth: Vec<TruthBin> = if truth_ok {
        data.bins
            .iter()
            .map(|b| {
                let m = data.truth[&b.index];
                TruthBin {
                    bin_index: b.index,
                    flow: m.flow_veh_per_h,
                    density: m.density_veh_per_km,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let actual_mfd = if truth_ok {
        let q: Vec<(u32, f64)> = truth.iter().map(|t| (t.bin_index, t.flow)).collect();
        let k: Vec<(u32, f64)> = truth.iter().map(|t| (t.bin_index, t.density)).collect();
        fit_mfd(build_mfd(&q, &k)?, config.confidence).ok()
    } else {
        None
    };
    let field_bins: BTreeSet<u32> = match &config.field_map_bins {
        Some(b) => b.iter().copied().collect(),
        None => {
            let peak = truth
                .iter()
                .max_by(|a, b| a.flow.total_cmp(&b.flow).then(b.bin_index.cmp(&a.bin_index)))
                .map_or(data.bins[0].index, |t| t.bin_index);
            BTreeSet::from([peak])
        }
    };
    let truth_fields = field_bins
        .iter()
        .filter(|b| truth_ok && data.truth.contains_key(b))
        .map(|b| {
            let links = data.full_links[b]
                .iter()
                .map(|o| (o.link_id.clone(), o.flow_veh_per_h))
                .collect();
            (*b, links)
        })
        .collect();

    let ctx = Context {
        config,
        data,
        field_bins,
        actual_mfd: actual_mfd.as_ref(),
    };
    let jobs: Vec<(f64, u64)> = config
        .coverages
        .iter()
        .flat_map(|&c| config.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let run = || -> Vec<Vec<CellResult>> { jobs.par_iter().map(|&(c, s)| run_sample(&ctx, c, s)).collect() };
    let groups = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Argument(format!("cannot start worker pool: {e}")))?
            .install(run),
        None => run(),
    };
    let comparisons = groups
        .iter()
        .zip(&jobs)
        .map(|(g, &(c, s))| compare(g, c, s, config.alpha))
        .collect();
    let cells: Vec<CellResult> = groups.into_iter().flatten().collect();
    let summary = summarize(config, &cells);
    Ok(ExperimentBundle {
        config: config.clone(),
        bins: data.bins.clone(),
        truth,
        actual_mfd,
        truth_fields,
        cells,
        comparisons,
        summary,
    })
}

/// Runs every estimator on one sampled coverage plan.
fn run_sample(ctx: &Context, coverage: f64, seed: u64) -> Vec<CellResult> {
    let sample_seed = cell_seed(ctx.config.master_seed, coverage, seed);
    let data = ctx.data;
    let sampled = sample_coverage(&data.sites, &data.network, coverage, sample_seed).and_then(|(plan, kept)| {
        let keep: HashSet<&str> = plan.retained.iter().map(String::as_str).collect();
        let readings: Vec<DetectorReading> = data
            .readings
            .iter()
            .filter(|r| keep.contains(r.detector_id.as_str()))
            .cloned()
            .collect();
        let obs = group_by_bin(&aggregate_to_links(&readings, &kept)?);
        Ok((plan, kept, obs))
    });
    ctx.config
        .estimators
        .iter()
        .map(|&est| {
            let blank = |plan: CoveragePlan, status, message| CellResult {
                coverage,
                seed,
                estimator: est,
                sample_seed,
                status,
                message: Some(message),
                plan,
                estimates: Vec::new(),
                flow_metrics: None,
                density_metrics: None,
                mfd: None,
                mfd_metrics: None,
                speed_metrics: None,
                max_failed_length_fraction: None,
                fields: Vec::new(),
            };
            match &sampled {
                Ok((plan, kept, obs)) => run_cell(ctx, est, coverage, seed, sample_seed, plan, kept, obs),
                Err(e) => blank(
                    CoveragePlan {
                        fraction: Some(coverage),
                        per_hierarchy_counts: BTreeMap::new(),
                        seed: sample_seed,
                        retained: Vec::new(),
                    },
                    status_of(e),
                    e.to_string(),
                ),
            }
        })
        .collect()
}

fn status_of(e: &Error) -> CellStatus {
    match e.class() {
        ErrorClass::NotApplicable => CellStatus::NotEstimable,
        _ => CellStatus::Failed,
    }
}

struct BinOutput {
    flow: f64,
    density: f64,
    failed_fraction: Option<f64>,
    field: Option<ImputedField>,
}

fn estimate_bin(
    ctx: &Context,
    est: Estimator,
    bin: &TimeBin,
    obs: &[LinkObservation],
    kept: &[DetectorSite],
    models: Option<&CellModels>,
) -> Result<BinOutput> {
    let net = &ctx.data.network;
    let cfg = ctx.config;
    if obs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no retained detector reported in bin {}",
            bin.index
        )));
    }
    match est {
        Estimator::Uniform => Ok(BinOutput {
            flow: uniform_scaled_mean(obs, net, Variable::Flow, cfg.uniform_mode, bin)?.value,
            density: uniform_scaled_mean(obs, net, Variable::Density, cfg.uniform_mode, bin)?.value,
            failed_fraction: None,
            field: None,
        }),
        Estimator::Hierarchical => {
            let map = &cfg.hierarchy_map;
            let partition = HierarchyPartition::grouped(net, obs.iter().map(|o| o.link_id.as_str()), |h| {
                map.get(&h).copied().unwrap_or(h)
            })?;
            Ok(BinOutput {
                flow: hierarchical_scaled_mean(obs, &partition, Variable::Flow, bin)?.value,
                density: hierarchical_scaled_mean(obs, &partition, Variable::Density, bin)?.value,
                failed_fraction: None,
                field: None,
            })
        }
        Estimator::Variogram => {
            let vs = &cfg.variogram;
            let models = models.expect("variogram cells carry model sources");
            let qf = impute_network(&models.flow, obs, net, kept, Variable::Flow, &vs.impute)?;
            let kf = impute_network(&models.density, obs, net, kept, Variable::Density, &vs.impute)?;
            let failed = qf.failed_length_fraction(net).max(kf.failed_length_fraction(net));
            let flow = network_mean_from_field(&qf, net, vs.coverage_threshold)?.value;
            let density = network_mean_from_field(&kf, net, vs.coverage_threshold)?.value;
            Ok(BinOutput {
                flow,
                density,
                failed_fraction: Some(failed),
                field: ctx.field_bins.contains(&bin.index).then_some(qf),
            })
        }
    }
}

fn day_groups(bins: &[TimeBin], est: &[f64], act: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut groups: BTreeMap<i64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((b, e), a) in bins.iter().zip(est).zip(act) {
        let g = groups.entry(Dataset::day_of(b)).or_default();
        g.0.push(*e);
        g.1.push(*a);
    }
    groups.into_values().collect()
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    ctx: &Context,
    est: Estimator,
    coverage: f64,
    seed: u64,
    sample_seed: u64,
    plan: &CoveragePlan,
    kept: &[DetectorSite],
    obs: &BTreeMap<u32, Vec<LinkObservation>>,
) -> CellResult {
    let mut cell = CellResult {
        coverage,
        seed,
        estimator: est,
        sample_seed,
        status: CellStatus::Ok,
        message: None,
        plan: plan.clone(),
        estimates: Vec::new(),
        flow_metrics: None,
        density_metrics: None,
        mfd: None,
        mfd_metrics: None,
        speed_metrics: None,
        max_failed_length_fraction: None,
        fields: Vec::new(),
    };
    let data = ctx.data;
    let models = if est == Estimator::Variogram {
        match ctx.config.variogram.models(data, obs, kept) {
            Ok(m) => Some(m),
            Err(e) => {
                cell.status = status_of(&e);
                cell.message = Some(format!("pooled fit: {e}"));
                return cell;
            }
        }
    } else {
        None
    };
    let mut max_failed: Option<f64> = None;
    for bin in &data.bins {
        let bin_obs = obs.get(&bin.index).map_or(&[][..], Vec::as_slice);
        match estimate_bin(ctx, est, bin, bin_obs, kept, models.as_ref()) {
            Ok(out) => {
                cell.estimates.push(BinEstimate {
                    bin_index: bin.index,
                    flow: out.flow,
                    density: out.density,
                });
                if let Some(f) = out.failed_fraction {
                    max_failed = Some(max_failed.map_or(f, |m: f64| m.max(f)));
                }
                cell.fields.extend(out.field);
            }
            Err(e) => {
                if let Error::IncompleteField { covered, .. } = e {
                    max_failed = Some(max_failed.map_or(1.0 - covered, |m: f64| m.max(1.0 - covered)));
                }
                cell.status = status_of(&e);
                cell.message = Some(format!("bin {}: {e}", bin.index));
                cell.estimates.clear();
                cell.fields.clear();
                break;
            }
        }
    }
    cell.max_failed_length_fraction = max_failed;
    if cell.status != CellStatus::Ok {
        return cell;
    }

    let cfg = ctx.config;
    let q: Vec<(u32, f64)> = cell.estimates.iter().map(|e| (e.bin_index, e.flow)).collect();
    let k: Vec<(u32, f64)> = cell.estimates.iter().map(|e| (e.bin_index, e.density)).collect();
    let mfd = build_mfd(&q, &k).and_then(|p| fit_mfd(p, cfg.confidence));
    match mfd {
        Ok(m) => cell.mfd = Some(m),
        Err(e) => cell.message = Some(format!("mfd: {e}")),
    }

    if data.has_truth() {
        let truth: Vec<&NetworkMeans> = data.bins.iter().map(|b| &data.truth[&b.index]).collect();
        let score = |est: Vec<f64>, act: Vec<f64>| {
            compute_metrics_grouped(&day_groups(&data.bins, &est, &act), cfg.pooling).ok()
        };
        cell.flow_metrics = score(
            cell.estimates.iter().map(|e| e.flow).collect(),
            truth.iter().map(|t| t.flow_veh_per_h).collect(),
        );
        cell.density_metrics = score(
            cell.estimates.iter().map(|e| e.density).collect(),
            truth.iter().map(|t| t.density_veh_per_km).collect(),
        );
        if let (Some(m), Some(actual)) = (&cell.mfd, ctx.actual_mfd) {
            cell.mfd_metrics = score(
                m.points.iter().map(|p| m.fit.eval(p.density_k)).collect(),
                actual.points.iter().map(|p| actual.fit.eval(p.density_k)).collect(),
            );
            // speeds only where both sides are defined
            let (est_v, act_v): (Vec<f64>, Vec<f64>) = m
                .speeds
                .iter()
                .zip(&actual.points)
                .filter_map(|(v, p)| Some((v.as_ref().copied()?, p.speed_v?)))
                .unzip();
            if !est_v.is_empty() {
                cell.speed_metrics = compute_metrics_grouped(&[(est_v, act_v)], MetricsPooling::Pooled).ok();
            }
        }
    }
    cell
}

/// Hierarchical against uniform fitted flows, each evaluated at its own
/// estimated densities.
fn compare(cells: &[CellResult], coverage: f64, seed: u64, alpha: f64) -> PairedComparison {
    let fitted = |e: Estimator| {
        cells
            .iter()
            .find(|c| c.estimator == e)
            .and_then(|c| c.mfd.as_ref())
            .map(|m| m.points.iter().map(|p| m.fit.eval(p.density_k)).collect::<Vec<f64>>())
    };
    let (result, message) = match (fitted(Estimator::Hierarchical), fitted(Estimator::Uniform)) {
        (Some(h), Some(u)) => match paired_t_test(&h, &u, alpha) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        },
        _ => (None, Some("needs fitted hierarchical and uniform MFDs".to_string())),
    };
    PairedComparison {
        coverage,
        seed,
        result,
        message,
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean(v: Vec<f64>) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(config: &ExperimentConfig, cells: &[CellResult]) -> Vec<GridSummary> {
    let mut out = Vec::new();
    for &coverage in &config.coverages {
        for &estimator in &config.estimators {
            let group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.coverage == coverage && c.estimator == estimator)
                .collect();
            let count = |s| group.iter().filter(|c| c.status == s).count();
            let collect =
                |f: &dyn Fn(&CellResult) -> Option<f64>| group.iter().filter_map(|c| f(c)).collect::<Vec<f64>>();
            out.push(GridSummary {
                coverage,
                estimator,
                ok: count(CellStatus::Ok),
                not_estimable: count(CellStatus::NotEstimable),
                failed: count(CellStatus::Failed),
                flow_rmse_median: median(collect(&|c| c.flow_metrics.as_ref().map(|m| m.rmse))),
                flow_rmse_mean: mean(collect(&|c| c.flow_metrics.as_ref().map(|m| m.rmse))),
                density_rmse_median: median(collect(&|c| c.density_metrics.as_ref().map(|m| m.rmse))),
                mfd_rmse_mean: mean(collect(&|c| c.mfd_metrics.as_ref().map(|m| m.rmse))),
                mfd_mae_mean: mean(collect(&|c| c.mfd_metrics.as_ref().map(|m| m.mae))),
                mfd_mape_mean: mean(collect(&|c| c.mfd_metrics.as_ref().and_then(|m| m.mape))),
                mfd_r2_mean: mean(collect(&|c| c.mfd_metrics.as_ref().and_then(|m| m.r2))),
            });
        }
    }
    out
}

fn band_table(name: String, fit: &QuadraticFit, points: &[MfdPoint], samples: usize) -> Table {
    let mut t = Table::new(name, &["x", "y_fit", "ci_low", "ci_high"]);
    let lo = points.iter().map(|p| p.density_k).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.density_k).fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi.is_finite() {
        for b in fit.band_samples(lo, hi, samples, BandKind::Mean) {
            t.push([b.x, b.y_fit, b.low, b.high]);
        }
    }
    t
}

/// Plot-ready tables: per-bin series with residuals, actual-vs-estimated
/// scatter, MFD points and fitted bands per (estimator, coverage), per-link
/// field maps, the RMSE/MFD grids and the paired t-tests.
pub fn emit_plot_data(bundle: &ExperimentBundle) -> Vec<Table> {
    let truth: BTreeMap<u32, &TruthBin> = bundle.truth.iter().map(|t| (t.bin_index, t)).collect();
    let mut series = Table::new(
        "series",
        &[
            "coverage",
            "seed",
            "estimator",
            "bin_index",
            "actual_flow",
            "estimated_flow",
            "flow_residual",
            "actual_density",
            "estimated_density",
            "density_residual",
        ],
    );
    let mut scatter = Table::new(
        "scatter",
        &["coverage", "seed", "estimator", "variable", "actual", "estimated"],
    );
    let mut fields = Table::new(
        "fields",
        &[
            "coverage",
            "seed",
            "estimator",
            "bin_index",
            "link_id",
            "value",
            "provenance",
            "kriging_variance",
        ],
    );
    for (bin, links) in &bundle.truth_fields {
        for (id, v) in links {
            fields.push([
                "".into(),
                "".into(),
                "actual".into(),
                bin.to_string(),
                id.clone(),
                v.to_string(),
                "observed".into(),
                "".into(),
            ]);
        }
    }
    for c in &bundle.cells {
        for e in &c.estimates {
            let t = truth.get(&e.bin_index);
            let resid = |est: f64, act: Option<f64>| opt_cell(act.map(|a| est - a));
            series.push([
                c.coverage.to_string(),
                c.seed.to_string(),
                c.estimator.to_string(),
                e.bin_index.to_string(),
                opt_cell(t.map(|t| t.flow)),
                e.flow.to_string(),
                resid(e.flow, t.map(|t| t.flow)),
                opt_cell(t.map(|t| t.density)),
                e.density.to_string(),
                resid(e.density, t.map(|t| t.density)),
            ]);
            if let Some(t) = t {
                for (var, act, est) in [("flow", t.flow, e.flow), ("density", t.density, e.density)] {
                    scatter.push([
                        c.coverage.to_string(),
                        c.seed.to_string(),
                        c.estimator.to_string(),
                        var.to_string(),
                        act.to_string(),
                        est.to_string(),
                    ]);
                }
            }
        }
        for f in &c.fields {
            for l in &f.links {
                fields.push([
                    c.coverage.to_string(),
                    c.seed.to_string(),
                    c.estimator.to_string(),
                    f.bin_index.to_string(),
                    l.link_id.clone(),
                    opt_cell(l.value),
                    l.provenance.to_string(),
                    opt_cell(l.kriging_variance),
                ]);
            }
        }
    }

    let mut grid = Table::new(
        "rmse_grid",
        &[
            "coverage",
            "estimator",
            "ok",
            "not_estimable",
            "failed",
            "flow_rmse_median",
            "flow_rmse_mean",
            "density_rmse_median",
        ],
    );
    let mut mfd_grid = Table::new("mfd_metrics", &["coverage", "estimator", "rmse", "mae", "mape", "r2"]);
    for s in &bundle.summary {
        grid.push([
            s.coverage.to_string(),
            s.estimator.to_string(),
            s.ok.to_string(),
            s.not_estimable.to_string(),
            s.failed.to_string(),
            opt_cell(s.flow_rmse_median),
            opt_cell(s.flow_rmse_mean),
            opt_cell(s.density_rmse_median),
        ]);
        mfd_grid.push([
            s.coverage.to_string(),
            s.estimator.to_string(),
            opt_cell(s.mfd_rmse_mean),
            opt_cell(s.mfd_mae_mean),
            opt_cell(s.mfd_mape_mean),
            opt_cell(s.mfd_r2_mean),
        ]);
    }

    let mut tests = Table::new(
        "t_tests",
        &[
            "coverage",
            "seed",
            "t_statistic",
            "degrees_of_freedom",
            "p_value",
            "reject",
            "critical_value",
            "message",
        ],
    );
    for p in &bundle.comparisons {
        let r = p.result.as_ref();
        tests.push([
            p.coverage.to_string(),
            p.seed.to_string(),
            opt_cell(r.map(|r| r.t_statistic)),
            r.map_or(String::new(), |r| r.degrees_of_freedom.to_string()),
            opt_cell(r.map(|r| r.p_value)),
            r.map_or(String::new(), |r| r.reject_at_alpha.to_string()),
            opt_cell(r.map(|r| r.critical_value)),
            p.message.clone().unwrap_or_default(),
        ]);
    }

    let mut tables = vec![series, scatter, fields, grid, mfd_grid, tests];

    let point_header = ["seed", "bin_index", "density", "flow", "speed"];
    if let Some(a) = &bundle.actual_mfd {
        let mut t = Table::new("mfd_points_actual", &point_header);
        for p in &a.points {
            t.push([
                "".into(),
                p.bin_index.to_string(),
                p.density_k.to_string(),
                p.flow_q.to_string(),
                opt_cell(p.speed_v),
            ]);
        }
        tables.push(t);
        tables.push(band_table(
            "mfd_band_actual".into(),
            &a.fit,
            &a.points,
            bundle.config.band_samples,
        ));
    }
    for &coverage in &bundle.config.coverages {
        for &est in &bundle.config.estimators {
            let tag = format!("{est}_c{coverage}");
            let mut t = Table::new(format!("mfd_points_{tag}"), &point_header);
            let mut pooled = Vec::new();
            for c in bundle
                .cells
                .iter()
                .filter(|c| c.coverage == coverage && c.estimator == est)
            {
                for p in c.mfd.iter().flat_map(|m| &m.points) {
                    t.push([
                        c.seed.to_string(),
                        p.bin_index.to_string(),
                        p.density_k.to_string(),
                        p.flow_q.to_string(),
                        opt_cell(p.speed_v),
                    ]);
                    pooled.push(*p);
                }
            }
            tables.push(t);
            let xy: Vec<(f64, f64)> = pooled.iter().map(|p| (p.density_k, p.flow_q)).collect();
            let band = match fit_quadratic_with_ci(&xy, bundle.config.confidence) {
                Ok(fit) => band_table(format!("mfd_band_{tag}"), &fit, &pooled, bundle.config.band_samples),
                Err(_) => Table::new(format!("mfd_band_{tag}"), &["x", "y_fit", "ci_low", "ci_high"]),
            };
            tables.push(band);
        }
    }
    tables
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCell {
    pub coverage: f64,
    pub seed: u64,
    pub estimator: Estimator,
    pub status: CellStatus,
    pub message: Option<String>,
    pub sample_seed: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: String,
    pub config: ExperimentConfig,
    pub table_format: TableFormat,
    pub cells: Vec<ManifestCell>,
    pub tables: Vec<String>,
    pub conventions: Conventions,
}

/// Modelling choices a reader of the outputs needs to interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    /// Where a detector sits on its link when the input gives no offset.
    pub default_offset_fraction: f64,
    pub distance_mode: DistanceMode,
    /// Exponential and gaussian ranges reach 95% of the sill.
    pub variogram_range: String,
    pub uniform_mode: UniformMode,
}

impl Conventions {
    pub fn of(config: &ExperimentConfig) -> Self {
        Conventions {
            default_offset_fraction: DEFAULT_OFFSET_FRACTION,
            distance_mode: config.variogram.impute.distance_mode,
            variogram_range: "practical".into(),
            uniform_mode: config.uniform_mode,
        }
    }
}

/// Writes every cell, the plot tables and a manifest under `dir`. Each file
/// is written atomically; the manifest is written last.
pub fn write_bundle(bundle: &ExperimentBundle, dir: &Path, format: TableFormat) -> Result<Manifest> {
    let cell_dir = dir.join("cells");
    std::fs::create_dir_all(&cell_dir)?;
    let cells = bundle
        .cells
        .iter()
        .map(|c| {
            let file = format!("cells/{}.json", c.id());
            let mut text = serde_json::to_string_pretty(c)?;
            text.push('\n');
            write_atomic(&dir.join(&file), text.as_bytes())?;
            Ok(ManifestCell {
                coverage: c.coverage,
                seed: c.seed,
                estimator: c.estimator,
                status: c.status,
                message: c.message.clone(),
                sample_seed: c.sample_seed,
                file,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tables = Vec::new();
    for t in emit_plot_data(bundle) {
        let path = t.write_to_dir(dir, format)?;
        tables.push(path.file_name().expect("file path").to_string_lossy().into_owned());
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        generator: format!("netmfd {}", env!("CARGO_PKG_VERSION")),
        config: bundle.config.clone(),
        table_format: format,
        cells,
        tables,
        conventions: Conventions::of(&bundle.config),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}
