//! Semivariogram models and the binned empirical variogram.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::DistanceMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariogramKind {
    Spherical,
    Exponential,
    Gaussian,
}

impl VariogramKind {
    pub const ALL: [VariogramKind; 3] = [
        VariogramKind::Spherical,
        VariogramKind::Exponential,
        VariogramKind::Gaussian,
    ];

    /// Unit-sill structure function of `h / a`. Exponential and Gaussian use
    /// the practical-range convention: 95% of the sill is reached at `h = a`.
    pub fn shape(self, ratio: f64) -> f64 {
        match self {
            VariogramKind::Spherical => {
                if ratio <= 1.0 {
                    1.5 * ratio - 0.5 * ratio * ratio * ratio
                } else {
                    1.0
                }
            }
            VariogramKind::Exponential => -(-3.0 * ratio).exp_m1(),
            VariogramKind::Gaussian => -(-3.0 * ratio * ratio).exp_m1(),
        }
    }
}

impl fmt::Display for VariogramKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariogramKind::Spherical => "spherical",
            VariogramKind::Exponential => "exponential",
            VariogramKind::Gaussian => "gaussian",
        })
    }
}

impl FromStr for VariogramKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spherical" => Ok(VariogramKind::Spherical),
            "exponential" => Ok(VariogramKind::Exponential),
            "gaussian" => Ok(VariogramKind::Gaussian),
            other => Err(Error::Argument(format!("unknown variogram kind '{other}'"))),
        }
    }
}

/// A fitted (or user-specified) semivariogram model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramModelSpec {
    pub kind: VariogramKind,
    pub nugget: f64,
    /// Partial sill `C`; the total sill is `nugget + sill`.
    pub sill: f64,
    pub range_km: f64,
    /// Pair-count weighted residual sum of squares of the fit, 0 when the
    /// model was specified directly.
    #[serde(default)]
    pub rss: f64,
    /// Set when the fit pushed the sill onto its lower bound (flat field).
    #[serde(default)]
    pub degenerate: bool,
}

impl VariogramModelSpec {
    pub fn new(kind: VariogramKind, nugget: f64, sill: f64, range_km: f64) -> Result<Self> {
        let spec = VariogramModelSpec {
            kind,
            nugget,
            sill,
            range_km,
            rss: 0.0,
            degenerate: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn spherical(nugget: f64, sill: f64, range_km: f64) -> Result<Self> {
        Self::new(VariogramKind::Spherical, nugget, sill, range_km)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(Error::Argument(format!("nugget {} must be >= 0", self.nugget)));
        }
        if !(self.sill > 0.0 && self.sill.is_finite()) {
            return Err(Error::Argument(format!("sill {} must be > 0", self.sill)));
        }
        if !(self.range_km > 0.0 && self.range_km.is_finite()) {
            return Err(Error::Argument(format!("range {} must be > 0", self.range_km)));
        }
        Ok(())
    }

    /// Semivariance at separation `h_km`.
    pub fn gamma(&self, h_km: f64) -> Result<f64> {
        if !(h_km >= 0.0) {
            return Err(Error::Argument(format!("separation {h_km} must be >= 0")));
        }
        Ok(self.eval(h_km))
    }

    /// Semivariance without the sign check; callers guarantee `h_km >= 0`.
    pub(crate) fn eval(&self, h_km: f64) -> f64 {
        self.nugget + self.sill * self.kind.shape(h_km / self.range_km)
    }

    pub fn total_sill(&self) -> f64 {
        self.nugget + self.sill
    }

    /// Covariance implied by the model for a second-order stationary field:
    /// `nugget + sill` at zero separation, `sill - (gamma(h) - nugget)` beyond.
    pub fn covariance(&self, h_km: f64) -> f64 {
        if h_km == 0.0 {
            self.total_sill()
        } else {
            self.sill - (self.eval(h_km) - self.nugget)
        }
    }
}

/// Semivariance of `model` at `h_km`.
pub fn gamma(model: &VariogramModelSpec, h_km: f64) -> Result<f64> {
    model.gamma(h_km)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    pub h_center_km: f64,
    /// `None` for bins without pairs.
    pub gamma_hat: Option<f64>,
    pub pair_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariogram {
    pub bin_edges_km: Vec<f64>,
    pub bins: Vec<VariogramBin>,
}

impl EmpiricalVariogram {
    /// Builds a variogram from already-binned values; used for synthetic
    /// inputs and tests.
    pub fn from_bins(bin_edges_km: Vec<f64>, bins: Vec<VariogramBin>) -> Result<Self> {
        validate_edges(&bin_edges_km)?;
        if bins.len() + 1 != bin_edges_km.len() {
            return Err(Error::Argument(format!(
                "{} bins need {} edges, got {}",
                bins.len(),
                bins.len() + 1,
                bin_edges_km.len()
            )));
        }
        Ok(EmpiricalVariogram { bin_edges_km, bins })
    }

    /// Pair-count weighted combination of variograms sharing bin edges, as
    /// if all their pairs had been binned together.
    pub fn pool(parts: &[EmpiricalVariogram]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InsufficientData("nothing to pool".into()))?;
        if parts.iter().any(|p| p.bin_edges_km != first.bin_edges_km) {
            return Err(Error::Argument("pooled variograms must share bin edges".into()));
        }
        let bins = (0..first.bins.len())
            .map(|k| {
                let mut sum = 0.0;
                let mut count = 0;
                for p in parts {
                    let b = &p.bins[k];
                    if let Some(g) = b.gamma_hat {
                        sum += g * b.pair_count as f64;
                        count += b.pair_count;
                    }
                }
                VariogramBin {
                    h_center_km: first.bins[k].h_center_km,
                    gamma_hat: (count > 0).then(|| sum / count as f64),
                    pair_count: count,
                }
            })
            .collect();
        Ok(EmpiricalVariogram {
            bin_edges_km: first.bin_edges_km.clone(),
            bins,
        })
    }

    /// Bins with a semivariance estimate and at least `min_pairs` pairs.
    pub fn populated(&self, min_pairs: usize) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        self.bins.iter().filter_map(move |b| match b.gamma_hat {
            Some(g) if b.pair_count >= min_pairs.max(1) => Some((b.h_center_km, g, b.pair_count)),
            _ => None,
        })
    }

    pub fn total_pairs(&self) -> usize {
        self.bins.iter().map(|b| b.pair_count).sum()
    }
}

fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::Argument("need at least two bin edges".into()));
    }
    if !(edges[0] > 0.0) {
        return Err(Error::Argument(format!("first bin edge {} must be > 0", edges[0])));
    }
    if edges.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
        return Err(Error::Argument(
            "bin edges must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Bin index of `d`: `edges[k] <= d < edges[k + 1]`, the last bin closed.
fn bin_of(edges: &[f64], d: f64) -> Option<usize> {
    let last = *edges.last()?;
    if d < edges[0] || d > last {
        return None;
    }
    if d == last {
        return Some(edges.len() - 2);
    }
    Some(edges.partition_point(|&e| e <= d) - 1)
}

/// Binned half mean squared difference over all site pairs.
///
/// `values[i]` belongs to row `i` of `distances`. Each unordered pair is
/// visited once in `(i, j > i)` order; unreachable pairs and pairs outside
/// the edges are skipped.
pub fn empirical_variogram(
    values: &[f64],
    distances: &DistanceMatrix,
    bin_edges_km: &[f64],
) -> Result<EmpiricalVariogram> {
    validate_edges(bin_edges_km)?;
    if values.len() != distances.len() {
        return Err(Error::Argument(format!(
            "{} values for a {}-site distance matrix",
            values.len(),
            distances.len()
        )));
    }
    if values.len() < 2 {
        return Err(Error::InsufficientData(
            "empirical variogram needs at least 2 sites".into(),
        ));
    }
    let nbins = bin_edges_km.len() - 1;
    let mut sums = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    let mut reachable = 0usize;
    for i in 0..values.len() {
        for j in (i + 1)..values.len() {
            let Some(d) = distances.get(i, j) else { continue };
            reachable += 1;
            if let Some(k) = bin_of(bin_edges_km, d) {
                let diff = values[i] - values[j];
                sums[k] += diff * diff;
                counts[k] += 1;
            }
        }
    }
    if reachable == 0 {
        return Err(Error::EmptyVariogram);
    }
    let bins = (0..nbins)
        .map(|k| VariogramBin {
            h_center_km: 0.5 * (bin_edges_km[k] + bin_edges_km[k + 1]),
            gamma_hat: (counts[k] > 0).then(|| sums[k] / (2.0 * counts[k] as f64)),
            pair_count: counts[k],
        })
        .collect();
    Ok(EmpiricalVariogram {
        bin_edges_km: bin_edges_km.to_vec(),
        bins,
    })
}

/// Linear-interpolated percentile of sorted data, `p` in [0, 100].
pub(crate) fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Equal-width bin edges spanning the `lo_pct`..`hi_pct` percentiles of the
/// positive, reachable pairwise distances.
pub fn default_bin_edges(distances: &DistanceMatrix, n_bins: usize, lo_pct: f64, hi_pct: f64) -> Result<Vec<f64>> {
    if n_bins == 0 {
        return Err(Error::Argument("need at least one bin".into()));
    }
    let mut d: Vec<f64> = (0..distances.len())
        .flat_map(|i| ((i + 1)..distances.len()).filter_map(move |j| distances.get(i, j)))
        .filter(|&x| x > 0.0)
        .collect();
    if d.is_empty() {
        return Err(Error::EmptyVariogram);
    }
    d.sort_by(f64::total_cmp);
    let lo = percentile(&d, lo_pct);
    let hi = percentile(&d, hi_pct);
    if !(hi > lo) {
        return Err(Error::InsufficientData(format!(
            "pairwise distances span [{lo}, {hi}]; cannot bin"
        )));
    }
    Ok((0..=n_bins)
        .map(|k| lo + (hi - lo) * k as f64 / n_bins as f64)
        .collect())
}
