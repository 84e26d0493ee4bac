//! Full-network imputation: every non-equipped link is kriged at its
//! midpoint from the equipped links of the same bin.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{fit_variogram, FitOptions};
use super::kriging::{krige, KrigingParams};
use super::variogram::{default_bin_edges, empirical_variogram, EmpiricalVariogram, VariogramKind, VariogramModelSpec};
use crate::error::{Error, Result};
use crate::network::{neumaier_sum, position_distance_matrix, DetectorSite, DistanceMode, Network, SitePosition};
use crate::sensing::{LinkObservation, Variable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Observed,
    Imputed,
    Failed,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Observed => "observed",
            Provenance::Imputed => "imputed",
            Provenance::Failed => "failed",
        })
    }
}

/// Automatic variogram fitting on the equipped data of one bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoFit {
    pub kinds: Vec<VariogramKind>,
    pub n_bins: usize,
    pub lo_percentile: f64,
    pub hi_percentile: f64,
    pub fit: FitOptions,
}

impl Default for AutoFit {
    fn default() -> Self {
        AutoFit {
            kinds: VariogramKind::ALL.to_vec(),
            n_bins: 15,
            lo_percentile: 1.0,
            hi_percentile: 95.0,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelSource {
    Fixed(VariogramModelSpec),
    AutoFit(AutoFit),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeParams {
    pub kriging: KrigingParams,
    pub distance_mode: DistanceMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedLink {
    pub link_id: String,
    /// `None` only for failed links.
    pub value: Option<f64>,
    pub provenance: Provenance,
    pub kriging_variance: Option<f64>,
}

/// Per-link values for one bin, in network link order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedField {
    pub bin_index: u32,
    pub variable: Variable,
    pub links: Vec<ImputedLink>,
    /// Model used for the kriging solves; `None` when every link was
    /// observed and nothing had to be kriged.
    pub model: Option<VariogramModelSpec>,
}

impl ImputedField {
    pub fn count(&self, provenance: Provenance) -> usize {
        self.links.iter().filter(|l| l.provenance == provenance).count()
    }

    pub fn failures(&self) -> usize {
        self.count(Provenance::Failed)
    }

    /// Share of network length whose links failed to impute.
    pub fn failed_length_fraction(&self, net: &Network) -> f64 {
        let failed = neumaier_sum(
            self.links
                .iter()
                .zip(net.links())
                .filter(|(l, _)| l.provenance == Provenance::Failed)
                .map(|(_, link)| link.length_km),
        );
        failed / net.total_length_km()
    }
}

/// Location of each equipped link's observation: the mean offset of its
/// detectors, or the midpoint when no detector is listed for the link.
fn known_positions(obs: &[LinkObservation], net: &Network, sites: &[DetectorSite]) -> Result<Vec<SitePosition>> {
    let mut offsets: HashMap<&str, (f64, usize)> = HashMap::new();
    for s in sites {
        let e = offsets.entry(s.link_id.as_str()).or_default();
        e.0 += s.offset_fraction;
        e.1 += 1;
    }
    obs.iter()
        .map(|o| {
            let link = net
                .link_position(&o.link_id)
                .ok_or_else(|| Error::Validation(format!("observation for unknown link '{}'", o.link_id)))?;
            let offset = offsets.get(o.link_id.as_str()).map_or(0.5, |&(sum, n)| sum / n as f64);
            Ok(SitePosition { link, offset })
        })
        .collect()
}

/// Fits a variogram to one bin's equipped values.
pub fn autofit_model(
    values: &[f64],
    positions: &[SitePosition],
    net: &Network,
    auto: &AutoFit,
    mode: DistanceMode,
) -> Result<VariogramModelSpec> {
    let dist = position_distance_matrix(net, positions, mode);
    let edges = default_bin_edges(&dist, auto.n_bins, auto.lo_percentile, auto.hi_percentile)?;
    let emp = empirical_variogram(values, &dist, &edges)?;
    fit_variogram(&emp, &auto.kinds, &auto.fit)
}

/// Empirical variogram of one bin's equipped values on the default bin edges.
pub fn bin_variogram(
    obs: &[LinkObservation],
    net: &Network,
    sites: &[DetectorSite],
    variable: Variable,
    auto: &AutoFit,
    mode: DistanceMode,
) -> Result<EmpiricalVariogram> {
    let positions = known_positions(obs, net, sites)?;
    let dist = position_distance_matrix(net, &positions, mode);
    let edges = default_bin_edges(&dist, auto.n_bins, auto.lo_percentile, auto.hi_percentile)?;
    let values: Vec<f64> = obs.iter().map(|o| o.value(variable)).collect();
    empirical_variogram(&values, &dist, &edges)
}

/// Fits one variogram to several bins at once: each bin is binned on the
/// edges of the first, and the bins are pooled by pair count.
pub fn autofit_pooled(
    bins: &[&[LinkObservation]],
    net: &Network,
    sites: &[DetectorSite],
    variable: Variable,
    auto: &AutoFit,
    mode: DistanceMode,
) -> Result<VariogramModelSpec> {
    let mut edges: Option<Vec<f64>> = None;
    let mut parts = Vec::with_capacity(bins.len());
    for obs in bins.iter().filter(|o| o.len() >= 2) {
        let positions = known_positions(obs, net, sites)?;
        let dist = position_distance_matrix(net, &positions, mode);
        let e = match &edges {
            Some(e) => e,
            None => edges.insert(default_bin_edges(
                &dist,
                auto.n_bins,
                auto.lo_percentile,
                auto.hi_percentile,
            )?),
        };
        let values: Vec<f64> = obs.iter().map(|o| o.value(variable)).collect();
        parts.push(empirical_variogram(&values, &dist, e)?);
    }
    if parts.is_empty() {
        return Err(Error::InsufficientData("no bin has two equipped links".into()));
    }
    fit_variogram(&EmpiricalVariogram::pool(&parts)?, &auto.kinds, &auto.fit)
}

/// Imputes every link of the network for one bin.
///
/// Equipped links keep their observed value. Non-equipped links are kriged
/// at their midpoint; a link without enough neighbours in range is marked
/// failed rather than aborting the field.
pub fn impute_network(
    source: &ModelSource,
    obs: &[LinkObservation],
    net: &Network,
    sites: &[DetectorSite],
    variable: Variable,
    params: &ImputeParams,
) -> Result<ImputedField> {
    let Some(first) = obs.first() else {
        return Err(Error::InsufficientData(
            "imputation needs at least one equipped link".into(),
        ));
    };
    let bin_index = first.bin_index;
    if let Some(o) = obs.iter().find(|o| o.bin_index != bin_index) {
        return Err(Error::Validation(format!(
            "observations span bins {bin_index} and {}",
            o.bin_index
        )));
    }
    let positions = known_positions(obs, net, sites)?;
    let values: Vec<f64> = obs.iter().map(|o| o.value(variable)).collect();
    let mut observed: Vec<Option<f64>> = vec![None; net.links().len()];
    for (o, p) in obs.iter().zip(&positions) {
        if observed[p.link].replace(o.value(variable)).is_some() {
            return Err(Error::Validation(format!(
                "duplicate observation for link '{}'",
                o.link_id
            )));
        }
    }
    let model = if observed.iter().all(Option::is_some) {
        None
    } else {
        Some(match source {
            ModelSource::Fixed(m) => {
                m.validate()?;
                *m
            }
            ModelSource::AutoFit(auto) => autofit_model(&values, &positions, net, auto, params.distance_mode)?,
        })
    };

    let fields: Vec<_> = positions
        .par_iter()
        .map(|&p| net.distance_field(p, params.distance_mode))
        .collect();
    let pair = |i: usize, j: usize| fields[i].distance_to(net, positions[j]);

    let links = net
        .links()
        .par_iter()
        .enumerate()
        .map(|(idx, link)| {
            if let Some(v) = observed[idx] {
                return Ok(ImputedLink {
                    link_id: link.id.clone(),
                    value: Some(v),
                    provenance: Provenance::Observed,
                    kriging_variance: None,
                });
            }
            let target = net.midpoint(idx);
            let target_dist: Vec<Option<f64>> = fields.iter().map(|f| f.distance_to(net, target)).collect();
            let model = model.as_ref().expect("a model exists when some link is unobserved");
            match krige(model, &values, &target_dist, pair, &params.kriging) {
                Ok(sol) => Ok(ImputedLink {
                    link_id: link.id.clone(),
                    value: Some(sol.prediction),
                    provenance: Provenance::Imputed,
                    kriging_variance: sol.kriging_variance,
                }),
                Err(Error::InsufficientNeighbors { .. }) => Ok(ImputedLink {
                    link_id: link.id.clone(),
                    value: None,
                    provenance: Provenance::Failed,
                    kriging_variance: None,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ImputedField {
        bin_index,
        variable,
        links,
        model,
    })
}

/// Length-weighted mean of an imputed field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldMean {
    pub value: f64,
    /// Share of network length with an observed or imputed value.
    pub covered_fraction: f64,
}

pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.95;

/// Length-weighted mean over the links that have a value; fails when they
/// cover less than `threshold` of the network length.
pub fn network_mean_from_field(field: &ImputedField, net: &Network, threshold: f64) -> Result<FieldMean> {
    if field.links.is_empty() {
        return Err(Error::InsufficientData("empty field".into()));
    }
    if field.links.len() != net.links().len() {
        return Err(Error::Validation(format!(
            "field has {} links, network has {}",
            field.links.len(),
            net.links().len()
        )));
    }
    let mut weighted = Vec::new();
    let mut lengths = Vec::new();
    for (l, link) in field.links.iter().zip(net.links()) {
        if l.link_id != link.id {
            return Err(Error::Validation(format!(
                "field link '{}' does not match network link '{}'",
                l.link_id, link.id
            )));
        }
        if let Some(v) = l.value.filter(|_| l.provenance != Provenance::Failed) {
            weighted.push(v * link.length_km);
            lengths.push(link.length_km);
        }
    }
    let covered = neumaier_sum(lengths);
    let covered_fraction = covered / net.total_length_km();
    if covered_fraction < threshold || covered == 0.0 {
        return Err(Error::IncompleteField {
            covered: covered_fraction,
            threshold,
        });
    }
    Ok(FieldMean {
        value: neumaier_sum(weighted) / covered,
        covered_fraction,
    })
}
