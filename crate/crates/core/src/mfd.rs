//! MFD assembly, quadratic fits with confidence bands, accuracy metrics and
//! the paired t-test.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::StudentT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfdPoint {
    pub bin_index: u32,
    /// veh/km
    pub density_k: f64,
    /// veh/h
    pub flow_q: f64,
    /// km/h, absent when density is zero.
    pub speed_v: Option<f64>,
}

/// Pairs per-bin flow and density estimates into MFD points, ordered by bin.
pub fn build_mfd(flow: &[(u32, f64)], density: &[(u32, f64)]) -> Result<Vec<MfdPoint>> {
    let q = unique_bins(flow, "flow")?;
    let k = unique_bins(density, "density")?;
    let only_q: Vec<String> = q.keys().filter(|b| !k.contains_key(b)).map(u32::to_string).collect();
    let only_k: Vec<String> = k.keys().filter(|b| !q.contains_key(b)).map(u32::to_string).collect();
    if !only_q.is_empty() || !only_k.is_empty() {
        return Err(Error::Alignment(format!(
            "bins only in flow: [{}]; bins only in density: [{}]",
            only_q.join(", "),
            only_k.join(", ")
        )));
    }
    q.into_iter()
        .map(|(bin, flow_q)| {
            let density_k = k[&bin];
            if !(flow_q >= 0.0) || !(density_k >= 0.0) {
                return Err(Error::Validation(format!(
                    "bin {bin}: flow {flow_q} and density {density_k} must be non-negative"
                )));
            }
            Ok(MfdPoint {
                bin_index: bin,
                density_k,
                flow_q,
                speed_v: (density_k > 0.0).then(|| flow_q / density_k),
            })
        })
        .collect()
}

fn unique_bins(series: &[(u32, f64)], what: &str) -> Result<BTreeMap<u32, f64>> {
    let mut out = BTreeMap::new();
    for &(bin, v) in series {
        if out.insert(bin, v).is_some() {
            return Err(Error::Alignment(format!("{what} series repeats bin {bin}")));
        }
    }
    Ok(out)
}

/// Which interval a band evaluator reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandKind {
    /// Pointwise interval on the mean response.
    #[default]
    Mean,
    /// Interval for a new observation.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    /// (c0, c1, c2) of c0 + c1·x + c2·x².
    pub coefficients: [f64; 3],
    /// Coefficient covariance, residual variance times (XᵀX)⁻¹.
    pub covariance: [[f64; 3]; 3],
    pub residual_variance: f64,
    pub point_count: usize,
    pub confidence: f64,
    /// Two-sided t critical value at `confidence`, df = n − 3.
    pub t_critical: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSample {
    pub x: f64,
    pub y_fit: f64,
    pub low: f64,
    pub high: f64,
}

impl QuadraticFit {
    pub fn eval(&self, x: f64) -> f64 {
        let [c0, c1, c2] = self.coefficients;
        c0 + x * (c1 + x * c2)
    }

    pub fn degrees_of_freedom(&self) -> usize {
        self.point_count - 3
    }

    /// Standard error of the fitted mean at `x`.
    pub fn mean_standard_error(&self, x: f64) -> f64 {
        let v = [1.0, x, x * x];
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += v[i] * self.covariance[i][j] * v[j];
            }
        }
        s.max(0.0).sqrt()
    }

    pub fn band(&self, x: f64, kind: BandKind) -> BandSample {
        let se = match kind {
            BandKind::Mean => self.mean_standard_error(x),
            BandKind::Prediction => {
                let m = self.mean_standard_error(x);
                (m * m + self.residual_variance).sqrt()
            }
        };
        let y = self.eval(x);
        let half = self.t_critical * se;
        BandSample {
            x,
            y_fit: y,
            low: y - half,
            high: y + half,
        }
    }

    /// Band evaluated at `samples` evenly spaced abscissae over `[lo, hi]`.
    pub fn band_samples(&self, lo: f64, hi: f64, samples: usize, kind: BandKind) -> Vec<BandSample> {
        match samples {
            0 => Vec::new(),
            1 => vec![self.band(lo, kind)],
            n => (0..n)
                .map(|i| self.band(lo + (hi - lo) * i as f64 / (n - 1) as f64, kind))
                .collect(),
        }
    }
}

/// Ordinary least squares on (1, x, x²) with t-based bands.
pub fn fit_quadratic_with_ci(points: &[(f64, f64)], confidence: f64) -> Result<QuadraticFit> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Argument(format!("confidence {confidence} must be in (0, 1)")));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Validation("fit points must be finite".into()));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(Error::RankDeficient(format!(
            "{} distinct x values, a quadratic needs at least 3",
            xs.len()
        )));
    }
    let n = points.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!(
            "{n} points leave no residual degrees of freedom, need at least 4"
        )));
    }

    // centre and scale x so the design stays well conditioned
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let scale_x = points
        .iter()
        .map(|p| (p.0 - mean_x).abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let design = DMatrix::from_fn(n, 3, |i, j| ((points[i].0 - mean_x) / scale_x).powi(j as i32));
    let y = DVector::from_iterator(n, points.iter().map(|p| p.1));

    let qr = design.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * &y;
    let beta_u = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("triangular factor is singular".into()))?;
    let resid = &y - &design * &beta_u;
    let rss: f64 = resid.iter().map(|e| e * e).sum();
    let df = n - 3;
    let s2 = rss / df as f64;

    let r_inv = r
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("triangular factor is singular".into()))?;
    let xtx_inv_u = &r_inv * r_inv.transpose();

    // map back from u = (x − m)/s to x: β_x = T β_u with T upper triangular
    let (m, s) = (mean_x, scale_x);
    let t = Matrix3::new(
        1.0,
        -m / s,
        m * m / (s * s),
        0.0,
        1.0 / s,
        -2.0 * m / (s * s),
        0.0,
        0.0,
        1.0 / (s * s),
    );
    let beta = t * Vector3::new(beta_u[0], beta_u[1], beta_u[2]);
    let xtx_inv_u3 = Matrix3::from_fn(|i, j| xtx_inv_u[(i, j)]);
    let cov = t * xtx_inv_u3 * t.transpose() * s2;

    let t_critical = StudentT::new(df as f64)
        .expect("df is positive")
        .quantile(0.5 + confidence / 2.0);
    Ok(QuadraticFit {
        coefficients: [beta[0], beta[1], beta[2]],
        covariance: std::array::from_fn(|i| std::array::from_fn(|j| cov[(i, j)])),
        residual_variance: s2,
        point_count: n,
        confidence,
        t_critical,
    })
}

/// How metrics combine several groups (e.g. days) of paired series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsPooling {
    /// Concatenate all groups, then compute once.
    #[default]
    Pooled,
    /// Compute per group and average each metric.
    MeanOfGroups,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    /// Percent; `None` when every actual value is zero.
    pub mape: Option<f64>,
    /// `None` when the actual series is constant.
    pub r2: Option<f64>,
    pub n: usize,
    /// Entries left out of MAPE because the actual value is zero.
    pub mape_skipped: usize,
}

pub fn compute_metrics(estimated: &[f64], actual: &[f64]) -> Result<MetricsReport> {
    if estimated.len() != actual.len() {
        return Err(Error::Alignment(format!(
            "{} estimates against {} actual values",
            estimated.len(),
            actual.len()
        )));
    }
    let n = actual.len();
    if n == 0 {
        return Err(Error::InsufficientData("metrics need at least one pair".into()));
    }
    let nf = n as f64;
    let mut sse = 0.0;
    let mut sae = 0.0;
    let mut ape = 0.0;
    let mut ape_n = 0usize;
    for (e, a) in estimated.iter().zip(actual) {
        let err = e - a;
        sse += err * err;
        sae += err.abs();
        if *a != 0.0 {
            ape += (err / a).abs();
            ape_n += 1;
        }
    }
    let mean_a = actual.iter().sum::<f64>() / nf;
    let sst: f64 = actual.iter().map(|a| (a - mean_a) * (a - mean_a)).sum();
    Ok(MetricsReport {
        rmse: (sse / nf).sqrt(),
        mae: sae / nf,
        mape: (ape_n > 0).then(|| 100.0 * ape / ape_n as f64),
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        n,
        mape_skipped: n - ape_n,
    })
}

/// Metrics over several groups of (estimated, actual) series.
pub fn compute_metrics_grouped(groups: &[(Vec<f64>, Vec<f64>)], pooling: MetricsPooling) -> Result<MetricsReport> {
    if groups.is_empty() {
        return Err(Error::InsufficientData("no groups to score".into()));
    }
    match pooling {
        MetricsPooling::Pooled => {
            let est: Vec<f64> = groups.iter().flat_map(|g| g.0.iter().copied()).collect();
            let act: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
            compute_metrics(&est, &act)
        }
        MetricsPooling::MeanOfGroups => {
            let reports = groups
                .iter()
                .map(|(e, a)| compute_metrics(e, a))
                .collect::<Result<Vec<_>>>()?;
            let g = reports.len() as f64;
            let mean_opt = |f: fn(&MetricsReport) -> Option<f64>| {
                let vals: Vec<f64> = reports.iter().filter_map(f).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            Ok(MetricsReport {
                rmse: reports.iter().map(|r| r.rmse).sum::<f64>() / g,
                mae: reports.iter().map(|r| r.mae).sum::<f64>() / g,
                mape: mean_opt(|r| r.mape),
                r2: mean_opt(|r| r.r2),
                n: reports.iter().map(|r| r.n).sum(),
                mape_skipped: reports.iter().map(|r| r.mape_skipped).sum(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub reject_at_alpha: bool,
    pub alpha: f64,
    pub mean_difference: f64,
    /// Two-tailed critical value at `alpha`.
    pub critical_value: f64,
}

/// Two-tailed paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<PairedTTestResult> {
    if a.len() != b.len() {
        return Err(Error::Alignment(format!("{} vs {} paired samples", a.len(), b.len())));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha {alpha} must be in (0, 1)")));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} pairs, need at least 2")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    if !(var > 0.0) {
        return Err(Error::DegenerateTest("differences have zero variance".into()));
    }
    let t = mean / (var.sqrt() / nf.sqrt());
    let df = n - 1;
    let dist = StudentT::new(df as f64).expect("df is positive");
    let p = dist.two_sided_p(t);
    Ok(PairedTTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        reject_at_alpha: p < alpha,
        alpha,
        mean_difference: mean,
        critical_value: dist.quantile(1.0 - alpha / 2.0),
    })
}

/// Network speed `fit(k)/k` per density; `None` where `k ≤ 0`.
pub fn speed_series_from_mfd(fit: &QuadraticFit, densities: &[f64]) -> Vec<Option<f64>> {
    densities.iter().map(|&k| (k > 0.0).then(|| fit.eval(k) / k)).collect()
}
