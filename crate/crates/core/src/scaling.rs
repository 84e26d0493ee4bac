//! Uniform and hierarchical scaling of equipped-link observations to
//! whole-network means.
//!
//! Both estimators split total travel distance (or time, for density) into a
//! measured part on equipped links and an extrapolated part on non-equipped
//! links. The uniform estimator extrapolates with the unweighted mean of all
//! equipped links; the hierarchical estimator extrapolates class by class with
//! the length-weighted equipped mean of that class.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{neumaier_sum, Network};
use crate::sensing::{LinkObservation, TimeBin, Variable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMethod {
    Uniform,
    Hierarchical,
}

impl fmt::Display for ScalingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalingMethod::Uniform => "uniform",
            ScalingMethod::Hierarchical => "hierarchical",
        })
    }
}

/// How the uniform estimator treats equipped links.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UniformMode {
    /// Measured TTD on equipped links plus the equipped mean times the
    /// non-equipped length.
    #[default]
    ExactEquipped,
    /// Equipped mean times the whole network length.
    Strict,
}

/// Length sums and link counts of one link class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTotals {
    pub equipped_count: usize,
    pub equipped_length_km: f64,
    pub non_equipped_count: usize,
    pub non_equipped_length_km: f64,
}

/// Equipped / non-equipped split of the network per link class.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyPartition {
    classes: BTreeMap<u32, ClassTotals>,
    equipped: HashMap<String, (u32, f64)>,
    total_length_km: f64,
}

impl HierarchyPartition {
    /// Partition by the network's own hierarchy labels.
    pub fn new<'a>(net: &Network, equipped: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        Self::grouped(net, equipped, |h| h)
    }

    /// Partition treating the whole network as one class.
    pub fn single_class<'a>(net: &Network, equipped: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        Self::grouped(net, equipped, |_| 1)
    }

    /// Partition with hierarchy labels mapped through `class_of`, e.g. to
    /// merge the two lower classes of a three-level hierarchy.
    pub fn grouped<'a>(
        net: &Network,
        equipped: impl IntoIterator<Item = &'a str>,
        class_of: impl Fn(u32) -> u32,
    ) -> Result<Self> {
        let mut is_equipped = vec![false; net.links().len()];
        for id in equipped {
            let i = net
                .link_position(id)
                .ok_or_else(|| Error::Validation(format!("unknown equipped link '{id}'")))?;
            is_equipped[i] = true;
        }
        let mut classes: BTreeMap<u32, ClassTotals> = BTreeMap::new();
        let mut lengths: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let mut eq_map = HashMap::new();
        for (link, &eq) in net.links().iter().zip(&is_equipped) {
            let class = class_of(link.hierarchy);
            let totals = classes.entry(class).or_default();
            let (eq_lengths, neq_lengths) = lengths.entry(class).or_default();
            if eq {
                totals.equipped_count += 1;
                eq_lengths.push(link.length_km);
                eq_map.insert(link.id.clone(), (class, link.length_km));
            } else {
                totals.non_equipped_count += 1;
                neq_lengths.push(link.length_km);
            }
        }
        for (class, (eq_lengths, neq_lengths)) in lengths {
            let t = classes.get_mut(&class).expect("same keys");
            t.equipped_length_km = neumaier_sum(eq_lengths);
            t.non_equipped_length_km = neumaier_sum(neq_lengths);
        }
        Ok(HierarchyPartition {
            classes,
            equipped: eq_map,
            total_length_km: net.total_length_km(),
        })
    }

    /// Partition whose equipped set is the set of observed links.
    pub fn from_observations(net: &Network, obs: &[LinkObservation]) -> Result<Self> {
        Self::new(net, obs.iter().map(|o| o.link_id.as_str()))
    }

    pub fn classes(&self) -> &BTreeMap<u32, ClassTotals> {
        &self.classes
    }

    pub fn total_length_km(&self) -> f64 {
        self.total_length_km
    }

    pub fn equipped_length_km(&self) -> f64 {
        neumaier_sum(self.classes.values().map(|c| c.equipped_length_km))
    }

    pub fn non_equipped_length_km(&self) -> f64 {
        neumaier_sum(self.classes.values().map(|c| c.non_equipped_length_km))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledEstimate {
    pub bin_index: u32,
    pub variable: Variable,
    /// Network mean, veh/h for flow or veh/km for density.
    pub value: f64,
    /// TTD (veh·km) for flow, TTT (veh·h) for density, over the bin.
    pub ttd_or_ttt: f64,
    pub method: ScalingMethod,
    pub hierarchy_count: usize,
}

fn check_bin(obs: &[LinkObservation], bin: &TimeBin) -> Result<()> {
    if !(bin.duration_h > 0.0) {
        return Err(Error::Argument(format!(
            "bin duration {} h must be positive",
            bin.duration_h
        )));
    }
    match obs.iter().find(|o| o.bin_index != bin.index) {
        Some(o) => Err(Error::Validation(format!(
            "observation for link '{}' is in bin {}, expected {}",
            o.link_id, o.bin_index, bin.index
        ))),
        None => Ok(()),
    }
}

fn observed_lengths<'a>(
    obs: &'a [LinkObservation],
    partition: &HierarchyPartition,
) -> Result<Vec<(&'a LinkObservation, u32, f64)>> {
    if obs.len() != partition.equipped.len() {
        return Err(Error::Validation(format!(
            "{} observations for {} equipped links",
            obs.len(),
            partition.equipped.len()
        )));
    }
    obs.iter()
        .map(|o| {
            partition
                .equipped
                .get(&o.link_id)
                .map(|&(c, l)| (o, c, l))
                .ok_or_else(|| Error::Validation(format!("link '{}' is not equipped in the partition", o.link_id)))
        })
        .collect()
}

/// Baseline estimator: non-equipped links share the unweighted equipped mean.
pub fn uniform_scaled_mean(
    obs: &[LinkObservation],
    net: &Network,
    variable: Variable,
    mode: UniformMode,
    bin: &TimeBin,
) -> Result<ScaledEstimate> {
    check_bin(obs, bin)?;
    if obs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "uniform scaling of bin {} needs at least one equipped link",
            bin.index
        )));
    }
    let partition = HierarchyPartition::single_class(net, obs.iter().map(|o| o.link_id.as_str()))?;
    let rows = observed_lengths(obs, &partition)?;
    let mean = neumaier_sum(rows.iter().map(|(o, _, _)| o.value(variable))) / rows.len() as f64;
    let total = partition.total_length_km();
    let rate = match mode {
        UniformMode::ExactEquipped => {
            let measured = neumaier_sum(rows.iter().map(|(o, _, l)| o.value(variable) * l));
            measured + mean * partition.non_equipped_length_km()
        }
        UniformMode::Strict => mean * total,
    };
    Ok(ScaledEstimate {
        bin_index: bin.index,
        variable,
        value: rate / total,
        ttd_or_ttt: rate * bin.duration_h,
        method: ScalingMethod::Uniform,
        hierarchy_count: 1,
    })
}

/// Per-class scaling: each class's non-equipped links share that class's
/// length-weighted equipped mean.
pub fn hierarchical_scaled_mean(
    obs: &[LinkObservation],
    partition: &HierarchyPartition,
    variable: Variable,
    bin: &TimeBin,
) -> Result<ScaledEstimate> {
    check_bin(obs, bin)?;
    let rows = observed_lengths(obs, partition)?;
    let mut measured: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (o, class, length) in &rows {
        measured.entry(*class).or_default().push(o.value(variable) * length);
    }
    let mut eq_parts = Vec::with_capacity(partition.classes.len());
    let mut neq_parts = Vec::with_capacity(partition.classes.len());
    for (class, totals) in &partition.classes {
        if totals.equipped_count == 0 {
            if totals.non_equipped_count > 0 {
                return Err(Error::UncoverableHierarchy(*class));
            }
            continue;
        }
        let eq = neumaier_sum(measured.remove(class).unwrap_or_default());
        eq_parts.push(eq);
        neq_parts.push(eq * (totals.non_equipped_length_km / totals.equipped_length_km));
    }
    let rate = neumaier_sum(eq_parts) + neumaier_sum(neq_parts);
    let total = partition.total_length_km();
    Ok(ScaledEstimate {
        bin_index: bin.index,
        variable,
        value: rate / total,
        ttd_or_ttt: rate * bin.duration_h,
        method: ScalingMethod::Hierarchical,
        hierarchy_count: partition.classes.len(),
    })
}

/// Value–length covariance over equipped links, the term the uniform
/// estimator drops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceDiagnostic {
    pub covariance: f64,
    /// Covariance divided by the product of the mean value and mean length.
    pub ratio: f64,
    pub mean_value: f64,
    pub mean_length_km: f64,
}

/// Population covariance between observed values and link lengths.
pub fn flow_length_covariance(
    obs: &[LinkObservation],
    net: &Network,
    variable: Variable,
) -> Result<CovarianceDiagnostic> {
    if obs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 observations, got {}",
            obs.len()
        )));
    }
    let pairs = obs
        .iter()
        .map(|o| {
            net.link(&o.link_id)
                .map(|l| (o.value(variable), l.length_km))
                .ok_or_else(|| Error::Validation(format!("unknown link '{}'", o.link_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    let mean_q = neumaier_sum(pairs.iter().map(|p| p.0)) / n;
    let mean_l = neumaier_sum(pairs.iter().map(|p| p.1)) / n;
    let covariance = neumaier_sum(pairs.iter().map(|(q, l)| (q - mean_q) * (l - mean_l))) / n;
    let scale = mean_q * mean_l;
    Ok(CovarianceDiagnostic {
        covariance,
        ratio: if scale != 0.0 { covariance / scale } else { f64::NAN },
        mean_value: mean_q,
        mean_length_km: mean_l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Link;
    use crate::sensing::edie_network_truth;

    fn chain(lengths: &[(f64, u32)]) -> Network {
        Network::new(
            lengths
                .iter()
                .enumerate()
                .map(|(i, &(l, h))| Link::new(format!("L{}", i + 1), format!("n{i}"), format!("n{}", i + 1), l, h))
                .collect(),
        )
        .unwrap()
    }

    fn flows(pairs: &[(&str, f64)]) -> Vec<LinkObservation> {
        pairs
            .iter()
            .map(|&(id, q)| LinkObservation::new(id, 0, q, q / 10.0))
            .collect()
    }

    const BIN: TimeBin = TimeBin {
        index: 0,
        start_h: 0.0,
        duration_h: 1.0,
    };

    #[test]
    fn uniform_full_coverage_matches_edie() {
        let net = chain(&[(1.0, 1), (3.0, 1)]);
        let obs = flows(&[("L1", 100.0), ("L2", 300.0)]);
        let est = uniform_scaled_mean(&obs, &net, Variable::Flow, UniformMode::ExactEquipped, &BIN).unwrap();
        assert_eq!(est.value, 250.0);
        assert_eq!(est.value, edie_network_truth(&obs, &net).unwrap().flow_veh_per_h);
    }

    #[test]
    fn uniform_modes_by_hand() {
        let net = chain(&[(1.0, 1), (2.0, 1), (3.0, 1), (4.0, 1)]);
        let obs = flows(&[("L1", 100.0), ("L2", 200.0)]);
        let exact = uniform_scaled_mean(&obs, &net, Variable::Flow, UniformMode::ExactEquipped, &BIN).unwrap();
        assert!((exact.value - 155.0).abs() < 1e-12);
        assert!((exact.ttd_or_ttt - 1550.0).abs() < 1e-9);
        let strict = uniform_scaled_mean(&obs, &net, Variable::Flow, UniformMode::Strict, &BIN).unwrap();
        assert!((strict.value - 150.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_constant_field() {
        let net = chain(&[(1.0, 1), (2.0, 2), (5.0, 1)]);
        let obs = flows(&[("L1", 42.0), ("L3", 42.0)]);
        for mode in [UniformMode::ExactEquipped, UniformMode::Strict] {
            let v = uniform_scaled_mean(&obs, &net, Variable::Flow, mode, &BIN)
                .unwrap()
                .value;
            assert!((v - 42.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_needs_data() {
        let net = chain(&[(1.0, 1)]);
        assert!(matches!(
            uniform_scaled_mean(&[], &net, Variable::Flow, UniformMode::ExactEquipped, &BIN),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn hierarchical_removes_mixing_bias() {
        let net = chain(&[(1.0, 1), (1.0, 1), (2.0, 2), (2.0, 2)]);
        let obs = flows(&[("L1", 100.0), ("L3", 10.0)]);
        let p = HierarchyPartition::from_observations(&net, &obs).unwrap();
        let h = hierarchical_scaled_mean(&obs, &p, Variable::Flow, &BIN).unwrap();
        assert!((h.value - 40.0).abs() < 1e-12);
        assert_eq!(h.hierarchy_count, 2);
        let u = uniform_scaled_mean(&obs, &net, Variable::Flow, UniformMode::ExactEquipped, &BIN).unwrap();
        assert!((u.value - 47.5).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_density_uses_density_values() {
        let net = chain(&[(1.0, 1), (1.0, 1)]);
        let obs = vec![LinkObservation::new("L1", 0, 500.0, 25.0)];
        let p = HierarchyPartition::from_observations(&net, &obs).unwrap();
        let k = hierarchical_scaled_mean(&obs, &p, Variable::Density, &BIN).unwrap();
        assert_eq!(k.value, 25.0);
        assert_eq!(k.ttd_or_ttt, 50.0);
    }

    #[test]
    fn uncoverable_hierarchy_named() {
        let net = chain(&[(1.0, 1), (1.0, 2)]);
        let obs = flows(&[("L1", 1.0)]);
        let p = HierarchyPartition::from_observations(&net, &obs).unwrap();
        assert!(matches!(
            hierarchical_scaled_mean(&obs, &p, Variable::Flow, &BIN),
            Err(Error::UncoverableHierarchy(2))
        ));
    }

    #[test]
    fn fully_equipped_class_contributes_measured_only() {
        let net = chain(&[(1.0, 1), (2.0, 2), (2.0, 2)]);
        let obs = flows(&[("L1", 60.0), ("L2", 30.0)]);
        let p = HierarchyPartition::from_observations(&net, &obs).unwrap();
        assert_eq!(p.classes()[&1].non_equipped_length_km, 0.0);
        let v = hierarchical_scaled_mean(&obs, &p, Variable::Flow, &BIN).unwrap().value;
        assert!((v - (60.0 + 120.0) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn partition_and_observations_must_agree() {
        let net = chain(&[(1.0, 1), (1.0, 1)]);
        let p = HierarchyPartition::new(&net, ["L1"]).unwrap();
        let obs = flows(&[("L2", 1.0)]);
        assert!(hierarchical_scaled_mean(&obs, &p, Variable::Flow, &BIN).is_err());
    }

    #[test]
    fn covariance_by_hand() {
        let net = chain(&[(1.0, 1), (2.0, 1)]);
        let d = flow_length_covariance(&flows(&[("L1", 100.0), ("L2", 200.0)]), &net, Variable::Flow).unwrap();
        assert!((d.covariance - 25.0).abs() < 1e-12);
        assert!((d.ratio - 25.0 / 225.0).abs() < 1e-12);
        let flat = flow_length_covariance(&flows(&[("L1", 7.0), ("L2", 7.0)]), &net, Variable::Flow).unwrap();
        assert_eq!(flat.covariance, 0.0);
        assert!(flow_length_covariance(&flows(&[("L1", 7.0)]), &net, Variable::Flow).is_err());
    }
}
