//! Synthetic ground truth: generated networks with hierarchy-dependent
//! means, a daily profile and a spatially correlated residual field.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geostat::{VariogramKind, VariogramModelSpec};
use crate::network::{position_distance_matrix, DetectorSite, DistanceMode, Link, Network};
use crate::sensing::{LinkObservation, TimeBin};

/// Network shape of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetworkSpec {
    /// `rows × cols` nodes joined by one directed link per grid edge,
    /// alternating direction by row and column. Edges are ranked by their
    /// distance from the arterial rows and columns (every
    /// `arterial_spacing`-th one, counting from 0), ties broken at random, and
    /// classes are handed out in that order. A spacing of 0 ranks at random.
    Grid {
        rows: usize,
        cols: usize,
        #[serde(default)]
        arterial_spacing: usize,
        /// Links per hierarchy, class 1 first; must sum to the edge count.
        hierarchy_counts: Vec<usize>,
        /// Nominal link length per hierarchy, km.
        class_length_km: Vec<f64>,
        /// Lengths are drawn uniformly within ± this fraction of nominal.
        length_jitter: f64,
    },
    /// A two-way main road (class 1) with a two-way side street (class 2)
    /// at every node, each continuing into a one-way local link (class 3).
    Corridor {
        segments: usize,
        segment_length_km: f64,
        side_length_km: f64,
        local_length_km: f64,
    },
}

impl NetworkSpec {
    fn build(&self, rng: &mut ChaCha8Rng) -> Result<Network> {
        match self {
            NetworkSpec::Grid {
                rows,
                cols,
                arterial_spacing,
                hierarchy_counts,
                class_length_km,
                length_jitter,
            } => {
                let shape = GridShape {
                    rows: *rows,
                    cols: *cols,
                    spacing: *arterial_spacing,
                };
                build_grid(shape, hierarchy_counts, class_length_km, *length_jitter, rng)
            }
            NetworkSpec::Corridor {
                segments,
                segment_length_km,
                side_length_km,
                local_length_km,
            } => build_corridor(*segments, *segment_length_km, *side_length_km, *local_length_km),
        }
    }
}

struct GridShape {
    rows: usize,
    cols: usize,
    spacing: usize,
}

fn build_grid(
    shape: GridShape,
    counts: &[usize],
    lengths: &[f64],
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Network> {
    let GridShape { rows, cols, spacing } = shape;
    if rows < 1 || cols < 1 || rows * cols < 2 {
        return Err(Error::Argument(format!("grid {rows}x{cols} has no edges")));
    }
    if counts.len() != lengths.len() || counts.is_empty() {
        return Err(Error::Argument(
            "hierarchy_counts and class_length_km need one entry per hierarchy".into(),
        ));
    }
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::Argument(format!("length jitter {jitter} outside [0, 1)")));
    }
    if let Some(l) = lengths.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::Argument(format!("class length {l} must be > 0")));
    }
    let axis_gap = |i: usize| {
        if spacing == 0 {
            0
        } else {
            (i % spacing).min(spacing - i % spacing)
        }
    };
    let node = |r: usize, c: usize| format!("n{r}_{c}");
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                let e = if r % 2 == 0 {
                    (node(r, c), node(r, c + 1))
                } else {
                    (node(r, c + 1), node(r, c))
                };
                edges.push((e, axis_gap(r)));
            }
            if r + 1 < rows {
                let e = if c % 2 == 0 {
                    (node(r, c), node(r + 1, c))
                } else {
                    (node(r + 1, c), node(r, c))
                };
                edges.push((e, axis_gap(c)));
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total != edges.len() {
        return Err(Error::Argument(format!(
            "hierarchy counts sum to {total}, grid {rows}x{cols} has {} edges",
            edges.len()
        )));
    }
    let classes: Vec<u32> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n(i as u32 + 1, n))
        .collect();
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| edges[i].1);
    let mut class_of = vec![0; edges.len()];
    for (&edge, &class) in order.iter().zip(&classes) {
        class_of[edge] = class;
    }
    let links = edges
        .into_iter()
        .zip(class_of)
        .enumerate()
        .map(|(i, (((from, to), _), h))| {
            let nominal = lengths[h as usize - 1];
            let factor = if jitter > 0.0 {
                rng.random_range(1.0 - jitter..=1.0 + jitter)
            } else {
                1.0
            };
            Link::new(format!("L{i:04}"), from, to, nominal * factor, h)
        })
        .collect();
    Network::new(links)
}

fn build_corridor(segments: usize, main: f64, side: f64, local: f64) -> Result<Network> {
    if segments < 1 {
        return Err(Error::Argument("corridor needs at least one segment".into()));
    }
    let mut links = Vec::new();
    for i in 0..segments {
        let (a, b) = (format!("m{i}"), format!("m{}", i + 1));
        links.push(Link::new(format!("M{i:03}f"), a.clone(), b.clone(), main, 1));
        links.push(Link::new(format!("M{i:03}b"), b, a, main, 1));
    }
    for i in 0..=segments {
        let (m, s, t) = (format!("m{i}"), format!("s{i}"), format!("t{i}"));
        links.push(Link::new(format!("S{i:03}o"), m.clone(), s.clone(), side, 2));
        links.push(Link::new(format!("S{i:03}i"), s.clone(), m, side, 2));
        links.push(Link::new(format!("T{i:03}"), s, t, local, 3));
    }
    Network::new(links)
}

/// A fixed 24-bin daily shape with a morning and a stronger evening peak,
/// normalised so its largest value is 1.
pub fn default_daily_profile() -> Vec<f64> {
    let raw: Vec<f64> = (0..24)
        .map(|h| {
            let t = h as f64 + 0.5;
            let bump = |c: f64, w: f64, a: f64| a * (-(t - c).powi(2) / (2.0 * w * w)).exp();
            0.12 + bump(8.0, 1.4, 0.75) + bump(17.5, 1.8, 0.85) + bump(13.0, 3.5, 0.35)
        })
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    raw.into_iter().map(|v| v / max).collect()
}

/// Full specification of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub network: NetworkSpec,
    /// Mean flow per hierarchy at profile 1, veh/h, class 1 first.
    pub hierarchy_flow: Vec<f64>,
    /// Mean density per hierarchy at profile 1, veh/km, class 1 first.
    pub hierarchy_density: Vec<f64>,
    /// Density multiplier per bin of a day.
    pub daily_profile: Vec<f64>,
    /// Curvature of the flow response: flow multiplier is
    /// `p (1 − c p) / (1 − c)` for density multiplier `p`.
    pub congestion: f64,
    pub bin_duration_h: f64,
    pub days: usize,
    /// Semivariogram of the flow residual, (veh/h)².
    pub residual: VariogramModelSpec,
    /// Density residual per unit flow residual, veh/km per veh/h.
    pub density_residual_ratio: f64,
    /// Multiplies both residual fields; 0 gives exact hierarchy means.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticScenario {
    /// Three-hierarchy 8×10 grid (142 links split 39/75/28, class 1 on rows
    /// 0 and 4 and columns 0, 4 and 8) with longer links on the higher
    /// classes and mean flows 1000/400/150 veh/h. The residual is
    /// exponential: spherical and gaussian covariances are not positive
    /// definite on network distances of a grid.
    pub fn athens_like(seed: u64) -> Self {
        SyntheticScenario {
            network: NetworkSpec::Grid {
                rows: 8,
                cols: 10,
                arterial_spacing: 4,
                hierarchy_counts: vec![39, 75, 28],
                class_length_km: vec![0.9, 0.45, 0.25],
                length_jitter: 0.3,
            },
            hierarchy_flow: vec![1000.0, 400.0, 150.0],
            hierarchy_density: vec![40.0, 22.0, 10.0],
            daily_profile: default_daily_profile(),
            congestion: 0.3,
            bin_duration_h: 1.0,
            days: 1,
            residual: VariogramModelSpec::new(VariogramKind::Exponential, 0.0, 400.0, 2.0).expect("valid model"),
            density_residual_ratio: 0.04,
            noise_scale: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.hierarchy_flow.len();
        if n == 0 || self.hierarchy_density.len() != n {
            return Err(Error::Argument(
                "hierarchy_flow and hierarchy_density need one entry per hierarchy".into(),
            ));
        }
        for (name, means) in [("flow", &self.hierarchy_flow), ("density", &self.hierarchy_density)] {
            if means.iter().any(|m| !(*m > 0.0)) {
                return Err(Error::Argument(format!("hierarchy {name} means must be positive")));
            }
            if means.windows(2).any(|w| !(w[0] > w[1])) {
                return Err(Error::Argument(format!(
                    "hierarchy {name} means must strictly decrease from class 1"
                )));
            }
        }
        if let NetworkSpec::Grid { hierarchy_counts, .. } = &self.network {
            if hierarchy_counts.len() != n {
                return Err(Error::Argument(format!(
                    "{} hierarchy counts for {n} hierarchy means",
                    hierarchy_counts.len()
                )));
            }
        } else if n != 3 {
            return Err(Error::Argument("the corridor network has exactly 3 hierarchies".into()));
        }
        if self.daily_profile.is_empty() || self.daily_profile.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Argument(
                "daily profile must be non-empty and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.congestion) {
            return Err(Error::Argument(format!(
                "congestion {} outside [0, 1)",
                self.congestion
            )));
        }
        if !(self.bin_duration_h > 0.0) || self.days == 0 {
            return Err(Error::Argument("bin duration and day count must be positive".into()));
        }
        if !(self.noise_scale >= 0.0) || !(self.density_residual_ratio >= 0.0) {
            return Err(Error::Argument("noise scale and density ratio must be >= 0".into()));
        }
        self.residual.validate()
    }

    /// Flow and density multipliers for bin `t` of a day.
    pub fn multipliers(&self, t: usize) -> (f64, f64) {
        let p = self.daily_profile[t];
        let c = self.congestion;
        (p * (1.0 - c * p) / (1.0 - c), p)
    }
}

/// A generated dataset with every link observed in every bin.
#[derive(Debug, Clone)]
pub struct GeneratedScenario {
    pub network: Network,
    /// One midpoint detector per link.
    pub sites: Vec<DetectorSite>,
    pub bins: Vec<TimeBin>,
    /// Bin-major, link order within a bin.
    pub observations: Vec<LinkObservation>,
    /// Flow or density values drawn negative and set to zero.
    pub clamped: usize,
}

impl GeneratedScenario {
    pub fn bin_observations(&self, bin: u32) -> &[LinkObservation] {
        let n = self.network.links().len();
        let start = bin as usize * n;
        &self.observations[start..start + n]
    }
}

/// Lower triangular factor of the residual covariance over link midpoints.
pub fn residual_factor(net: &Network, model: &VariogramModelSpec) -> Result<DMatrix<f64>> {
    let positions: Vec<_> = (0..net.links().len()).map(|i| net.midpoint(i)).collect();
    let dist = position_distance_matrix(net, &positions, DistanceMode::Undirected);
    let n = positions.len();
    let cov = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            model.total_sill()
        } else {
            dist.get(i, j).map_or(0.0, |d| model.covariance(d))
        }
    });
    let scale = model.total_sill();
    for jitter in [0.0, 1e-12, 1e-10, 1e-8, 1e-6] {
        let m = &cov + DMatrix::identity(n, n) * (jitter * scale);
        if let Some(ch) = Cholesky::new(m) {
            return Ok(ch.l());
        }
    }
    Err(Error::NotPositiveDefinite)
}

/// Generates a scenario; the same spec always yields the same data.
pub fn generate_scenario(spec: &SyntheticScenario) -> Result<GeneratedScenario> {
    spec.validate()?;
    let mut net_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    net_rng.set_stream(0);
    let network = spec.network.build(&mut net_rng)?;
    let n = network.links().len();
    let factor = if spec.noise_scale > 0.0 {
        Some(residual_factor(&network, &spec.residual)?)
    } else {
        None
    };

    let mut field_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    field_rng.set_stream(1);
    let per_day = spec.daily_profile.len();
    let mut bins = Vec::with_capacity(spec.days * per_day);
    let mut observations = Vec::with_capacity(spec.days * per_day * n);
    let mut clamped = 0;
    for day in 0..spec.days {
        for t in 0..per_day {
            let index = (day * per_day + t) as u32;
            bins.push(TimeBin::regular(index, spec.bin_duration_h));
            let (fq, fk) = spec.multipliers(t);
            let z = match &factor {
                Some(l) => {
                    let eps = DVector::from_fn(n, |_, _| field_rng.sample::<f64, _>(StandardNormal));
                    l * eps * spec.noise_scale
                }
                None => DVector::zeros(n),
            };
            for (i, link) in network.links().iter().enumerate() {
                let h = link.hierarchy as usize - 1;
                let mut q = spec.hierarchy_flow[h] * fq + z[i];
                let mut k = spec.hierarchy_density[h] * fk + z[i] * spec.density_residual_ratio;
                if q < 0.0 {
                    q = 0.0;
                    clamped += 1;
                }
                if k < 0.0 {
                    k = 0.0;
                    clamped += 1;
                }
                observations.push(LinkObservation::new(link.id.clone(), index, q, k));
            }
        }
    }
    let sites = network
        .links()
        .iter()
        .map(|l| DetectorSite::midpoint(format!("D{}", l.id), l.id.clone()))
        .collect();
    Ok(GeneratedScenario {
        network,
        sites,
        bins,
        observations,
        clamped,
    })
}
