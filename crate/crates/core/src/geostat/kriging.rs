//! Ordinary kriging on network distances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::variogram::VariogramModelSpec;
use crate::error::{Error, Result};
use crate::network::{DetectorSite, DistanceMode, Network};

/// Neighbourhood limits for a kriging solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KrigingParams {
    pub max_neighbors: usize,
    pub min_neighbors: usize,
}

impl Default for KrigingParams {
    fn default() -> Self {
        KrigingParams {
            max_neighbors: 16,
            min_neighbors: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrigingSolution {
    /// One weight per neighbour; sums to one.
    pub weights: Vec<f64>,
    pub lagrange_mu: f64,
    pub prediction: f64,
    /// Indices into the known-site list, nearest first.
    pub neighbors: Vec<usize>,
    pub kriging_variance: Option<f64>,
}

/// Zero-separation threshold for merging coincident neighbours.
const COINCIDENT_KM: f64 = 1e-12;

/// Solves the ordinary kriging system for one target.
///
/// `target_dist[i]` is the distance from known site `i` to the target and
/// `pair_dist(i, j)` the distance between known sites; `None` marks an
/// unreachable pair. Neighbours are the `max_neighbors` nearest known sites
/// within the model range. Coincident neighbours are merged into one
/// averaged point before the system is assembled, and the merged weight is
/// split evenly among them.
pub fn krige(
    model: &VariogramModelSpec,
    values: &[f64],
    target_dist: &[Option<f64>],
    pair_dist: impl Fn(usize, usize) -> Option<f64>,
    params: &KrigingParams,
) -> Result<KrigingSolution> {
    model.validate()?;
    if values.is_empty() {
        return Err(Error::InsufficientData("no known sites to krige from".into()));
    }
    if values.len() != target_dist.len() {
        return Err(Error::Argument(format!(
            "{} values but {} target distances",
            values.len(),
            target_dist.len()
        )));
    }
    let mut candidates: Vec<(usize, f64)> = target_dist
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.filter(|&d| d <= model.range_km).map(|d| (i, d)))
        .collect();
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    candidates.truncate(params.max_neighbors);
    let required = params.min_neighbors.max(1);
    if candidates.len() < required {
        return Err(Error::InsufficientNeighbors {
            found: candidates.len(),
            required,
            range_km: model.range_km,
        });
    }

    // groups of coincident neighbours, each represented by its first member
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (slot, &(i, _)) in candidates.iter().enumerate() {
        let home = groups.iter_mut().find(|g| {
            let rep = candidates[g[0]].0;
            pair_dist(rep, i).is_some_and(|d| d <= COINCIDENT_KM)
        });
        match home {
            Some(g) => g.push(slot),
            None => groups.push(vec![slot]),
        }
    }
    let reps: Vec<usize> = groups.iter().map(|g| candidates[g[0]].0).collect();
    let group_values: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().map(|&s| values[candidates[s].0]).sum::<f64>() / g.len() as f64)
        .collect();

    let n = reps.len();
    let mut lhs = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut rhs = DVector::<f64>::zeros(n + 1);
    for (a, &i) in reps.iter().enumerate() {
        for (b, &j) in reps.iter().enumerate() {
            lhs[(a, b)] = if a == b {
                model.eval(0.0)
            } else {
                pair_dist(i, j).map_or(model.total_sill(), |d| model.eval(d))
            };
        }
        lhs[(a, n)] = 1.0;
        lhs[(n, a)] = 1.0;
        rhs[a] = model.eval(target_dist[i].expect("neighbour is reachable"));
    }
    rhs[n] = 1.0;

    let solution = lhs
        .clone()
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| {
            let sv = lhs.singular_values();
            let max = sv.max();
            let min = sv.min();
            Error::SingularSystem {
                condition: if min > 0.0 { max / min } else { f64::INFINITY },
            }
        })?;

    let group_weights = &solution.as_slice()[..n];
    let mu = solution[n];
    let prediction = group_weights.iter().zip(&group_values).map(|(w, v)| w * v).sum();
    let variance = group_weights
        .iter()
        .zip(&rhs.as_slice()[..n])
        .map(|(w, g)| w * g)
        .sum::<f64>()
        + mu;

    let mut weights = vec![0.0; candidates.len()];
    for (g, &gw) in groups.iter().zip(group_weights) {
        for &slot in g {
            weights[slot] = gw / g.len() as f64;
        }
    }
    Ok(KrigingSolution {
        weights,
        lagrange_mu: mu,
        prediction,
        neighbors: candidates.iter().map(|c| c.0).collect(),
        kriging_variance: Some(variance.max(0.0)),
    })
}

/// Kriging prediction at `target` from detector sites with known values,
/// using undirected network distances.
pub fn solve_kriging(
    model: &VariogramModelSpec,
    net: &Network,
    known: &[(DetectorSite, f64)],
    target: &DetectorSite,
    params: &KrigingParams,
) -> Result<KrigingSolution> {
    let positions = known.iter().map(|(s, _)| net.locate(s)).collect::<Result<Vec<_>>>()?;
    let target_pos = net.locate(target)?;
    let fields: Vec<_> = positions
        .iter()
        .map(|&p| net.distance_field(p, DistanceMode::Undirected))
        .collect();
    let target_dist: Vec<Option<f64>> = fields.iter().map(|f| f.distance_to(net, target_pos)).collect();
    let values: Vec<f64> = known.iter().map(|(_, v)| *v).collect();
    krige(
        model,
        &values,
        &target_dist,
        |i, j| fields[i].distance_to(net, positions[j]),
        params,
    )
}
