//! Detector readings, per-link aggregation, coverage sampling and the
//! full-coverage (Edie) network means used as ground truth.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{neumaier_sum, DetectorSite, Network};
use crate::table::{RawTable, TableFormat};

/// Traffic variable carried by an observation or estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Flow,
    Density,
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variable::Flow => "flow",
            Variable::Density => "density",
        })
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Variable::Flow),
            "density" => Ok(Variable::Density),
            other => Err(Error::Argument(format!("unknown variable '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeBin {
    pub index: u32,
    /// Hours since the start of the dataset.
    pub start_h: f64,
    pub duration_h: f64,
}

impl TimeBin {
    pub fn regular(index: u32, duration_h: f64) -> Self {
        TimeBin {
            index,
            start_h: index as f64 * duration_h,
            duration_h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReading {
    pub detector_id: String,
    pub bin_index: u32,
    pub flow_veh_per_h: f64,
    /// Already corrected for detector location bias.
    pub density_veh_per_km: f64,
    pub speed_km_per_h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkObservation {
    pub link_id: String,
    pub bin_index: u32,
    pub flow_veh_per_h: f64,
    pub density_veh_per_km: f64,
}

impl LinkObservation {
    pub fn new(link_id: impl Into<String>, bin_index: u32, flow: f64, density: f64) -> Self {
        LinkObservation {
            link_id: link_id.into(),
            bin_index,
            flow_veh_per_h: flow,
            density_veh_per_km: density,
        }
    }

    pub fn value(&self, variable: Variable) -> f64 {
        match variable {
            Variable::Flow => self.flow_veh_per_h,
            Variable::Density => self.density_veh_per_km,
        }
    }
}

/// Groups observations by bin, preserving input order inside each bin.
pub fn group_by_bin(obs: &[LinkObservation]) -> BTreeMap<u32, Vec<LinkObservation>> {
    let mut out: BTreeMap<u32, Vec<LinkObservation>> = BTreeMap::new();
    for o in obs {
        out.entry(o.bin_index).or_default().push(o.clone());
    }
    out
}

/// Parses a readings table
/// (`detector_id, bin_index, flow_veh_per_h, density_veh_per_km, speed_km_per_h`).
pub fn load_readings<R: Read>(reader: R, format: TableFormat) -> Result<Vec<DetectorReading>> {
    let table = RawTable::read(reader, format)?;
    let id = table.column("detector_id")?;
    let bin = table.column("bin_index")?;
    let flow = table.column("flow_veh_per_h")?;
    let density = table.column("density_veh_per_km")?;
    let speed = table.optional_column("speed_km_per_h");
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(table.len());
    for row in table.rows() {
        let reading = DetectorReading {
            detector_id: row.str(id)?.to_string(),
            bin_index: row.parse(bin)?,
            flow_veh_per_h: row.parse(flow)?,
            density_veh_per_km: row.parse(density)?,
            speed_km_per_h: row.parse_opt(speed)?,
        };
        let negative = [
            Some(reading.flow_veh_per_h),
            Some(reading.density_veh_per_km),
            reading.speed_km_per_h,
        ]
        .into_iter()
        .flatten()
        .any(|v| !(v >= 0.0 && v.is_finite()));
        if negative {
            return Err(Error::Validation(format!(
                "line {}: traffic values must be finite and nonnegative",
                row.line
            )));
        }
        if !seen.insert((reading.detector_id.clone(), reading.bin_index)) {
            return Err(Error::Validation(format!(
                "line {}: second reading for detector '{}' in bin {}",
                row.line, reading.detector_id, reading.bin_index
            )));
        }
        out.push(reading);
    }
    Ok(out)
}

pub fn load_readings_path(path: &Path) -> Result<Vec<DetectorReading>> {
    load_readings(std::fs::File::open(path)?, TableFormat::from_path(path))
}

/// Averages detector readings into one observation per (link, bin).
///
/// Output is ordered by bin, then by first appearance of the link in `sites`.
/// Detectors missing from a bin simply do not contribute to it.
pub fn aggregate_to_links(readings: &[DetectorReading], sites: &[DetectorSite]) -> Result<Vec<LinkObservation>> {
    let mut link_rank: HashMap<&str, usize> = HashMap::new();
    for s in sites {
        let next = link_rank.len();
        link_rank.entry(s.link_id.as_str()).or_insert(next);
    }
    let site_link: HashMap<&str, &str> = sites
        .iter()
        .map(|s| (s.detector_id.as_str(), s.link_id.as_str()))
        .collect();
    // (bin, link rank) -> (flow sum, density sum, count)
    let mut acc: BTreeMap<(u32, usize), (f64, f64, usize)> = BTreeMap::new();
    let mut link_ids: Vec<&str> = vec![""; link_rank.len()];
    for (id, &rank) in &link_rank {
        link_ids[rank] = id;
    }
    for r in readings {
        let link = site_link
            .get(r.detector_id.as_str())
            .ok_or_else(|| Error::Validation(format!("reading references unknown detector '{}'", r.detector_id)))?;
        let slot = acc.entry((r.bin_index, link_rank[link])).or_default();
        slot.0 += r.flow_veh_per_h;
        slot.1 += r.density_veh_per_km;
        slot.2 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|((bin, rank), (q, k, n))| LinkObservation {
            link_id: link_ids[rank].to_string(),
            bin_index: bin,
            flow_veh_per_h: q / n as f64,
            density_veh_per_km: k / n as f64,
        })
        .collect())
}

/// Retained detectors for one partially equipped network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveragePlan {
    /// `None` when the plan was built from explicit counts.
    pub fraction: Option<f64>,
    pub per_hierarchy_counts: BTreeMap<u32, usize>,
    pub seed: u64,
    pub retained: Vec<String>,
}

impl CoveragePlan {
    pub fn total(&self) -> usize {
        self.per_hierarchy_counts.values().sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The retained subset of `sites`, in input order.
    pub fn retained_sites(&self, sites: &[DetectorSite]) -> Vec<DetectorSite> {
        let keep: HashSet<&str> = self.retained.iter().map(String::as_str).collect();
        sites
            .iter()
            .filter(|s| keep.contains(s.detector_id.as_str()))
            .cloned()
            .collect()
    }
}

/// Rounds to nearest, sending exact halves to the even neighbour. Products
/// like `75 * 0.3` land a few ulps off the half, so ties are detected with a
/// small tolerance.
pub fn round_half_even(x: f64) -> f64 {
    let floor = x.floor();
    let frac = x - floor;
    if (frac - 0.5).abs() <= 1e-9 * x.abs().max(1.0) {
        if floor % 2.0 == 0.0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        x.round()
    }
}

/// Number of detectors kept out of `available` at coverage `fraction`.
pub fn coverage_count(available: usize, fraction: f64) -> usize {
    if available == 0 {
        return 0;
    }
    (round_half_even(fraction * available as f64) as usize).clamp(1, available)
}

fn sites_by_hierarchy<'a>(sites: &'a [DetectorSite], net: &Network) -> Result<BTreeMap<u32, Vec<&'a DetectorSite>>> {
    let mut groups: BTreeMap<u32, Vec<&DetectorSite>> = BTreeMap::new();
    for s in sites {
        net.locate(s)?;
        let h = net.link(&s.link_id).expect("located").hierarchy;
        groups.entry(h).or_default().push(s);
    }
    Ok(groups)
}

/// Stratified random removal: each hierarchy keeps `fraction` of its
/// detectors (half-to-even rounding, at least one).
pub fn sample_coverage(
    sites: &[DetectorSite],
    net: &Network,
    fraction: f64,
    seed: u64,
) -> Result<(CoveragePlan, Vec<DetectorSite>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("coverage fraction {fraction} outside (0, 1]")));
    }
    let groups = sites_by_hierarchy(sites, net)?;
    let counts = groups
        .iter()
        .map(|(&h, g)| (h, coverage_count(g.len(), fraction)))
        .collect();
    let (mut plan, kept) = select(sites, &groups, &counts, seed)?;
    plan.fraction = Some(fraction);
    Ok((plan, kept))
}

/// Stratified random removal with explicit per-hierarchy target counts.
pub fn sample_coverage_counts(
    sites: &[DetectorSite],
    net: &Network,
    counts: &BTreeMap<u32, usize>,
    seed: u64,
) -> Result<(CoveragePlan, Vec<DetectorSite>)> {
    let groups = sites_by_hierarchy(sites, net)?;
    select(sites, &groups, counts, seed)
}

fn select(
    sites: &[DetectorSite],
    groups: &BTreeMap<u32, Vec<&DetectorSite>>,
    counts: &BTreeMap<u32, usize>,
    seed: u64,
) -> Result<(CoveragePlan, Vec<DetectorSite>)> {
    for (h, &c) in counts {
        let available = groups.get(h).map_or(0, Vec::len);
        if c > available {
            return Err(Error::Argument(format!(
                "hierarchy {h}: requested {c} detectors, only {available} equipped"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = HashSet::new();
    let mut per_hierarchy_counts = BTreeMap::new();
    for (h, group) in groups {
        let c = counts.get(h).copied().unwrap_or(0);
        for i in index::sample(&mut rng, group.len(), c) {
            keep.insert(group[i].detector_id.as_str());
        }
        per_hierarchy_counts.insert(*h, c);
    }
    let kept: Vec<DetectorSite> = sites
        .iter()
        .filter(|s| keep.contains(s.detector_id.as_str()))
        .cloned()
        .collect();
    let plan = CoveragePlan {
        fraction: None,
        per_hierarchy_counts,
        seed,
        retained: kept.iter().map(|s| s.detector_id.clone()).collect(),
    };
    Ok((plan, kept))
}

/// Length-weighted network means of a fully observed bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeans {
    pub flow_veh_per_h: f64,
    pub density_veh_per_km: f64,
}

impl NetworkMeans {
    pub fn value(&self, variable: Variable) -> f64 {
        match variable {
            Variable::Flow => self.flow_veh_per_h,
            Variable::Density => self.density_veh_per_km,
        }
    }

    /// Total travel distance (veh·km) over a bin of `duration_h`.
    pub fn ttd(&self, net: &Network, duration_h: f64) -> f64 {
        self.flow_veh_per_h * net.total_length_km() * duration_h
    }

    /// Total travel time (veh·h) over a bin of `duration_h`.
    pub fn ttt(&self, net: &Network, duration_h: f64) -> f64 {
        self.density_veh_per_km * net.total_length_km() * duration_h
    }
}

/// Edie network means from observations covering every link in one bin.
pub fn edie_network_truth(obs: &[LinkObservation], net: &Network) -> Result<NetworkMeans> {
    let mut by_link: Vec<Option<&LinkObservation>> = vec![None; net.links().len()];
    for o in obs {
        let i = net
            .link_position(&o.link_id)
            .ok_or_else(|| Error::Validation(format!("observation for unknown link '{}'", o.link_id)))?;
        if by_link[i].replace(o).is_some() {
            return Err(Error::Validation(format!(
                "duplicate observation for link '{}'",
                o.link_id
            )));
        }
    }
    let missing: Vec<String> = net
        .links()
        .iter()
        .zip(&by_link)
        .filter(|(_, o)| o.is_none())
        .map(|(l, _)| l.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingLinks(missing));
    }
    let pairs = || net.links().iter().zip(by_link.iter().map(|o| o.expect("checked")));
    let flow = neumaier_sum(pairs().map(|(l, o)| o.flow_veh_per_h * l.length_km));
    let density = neumaier_sum(pairs().map(|(l, o)| o.density_veh_per_km * l.length_km));
    let total = net.total_length_km();
    Ok(NetworkMeans {
        flow_veh_per_h: flow / total,
        density_veh_per_km: density / total,
    })
}
