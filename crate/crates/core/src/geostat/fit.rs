//! Weighted least-squares fitting of semivariogram models.
//!
//! For a fixed range the model is linear in (nugget, sill), so those two are
//! solved exactly under their bounds and only the range is searched. The
//! range search scans a log-spaced grid, then refines with Brent's method
//! from the grid minimum and from the quartiles of the bin centres.

use serde::{Deserialize, Serialize};

use super::variogram::{percentile, EmpiricalVariogram, VariogramKind, VariogramModelSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Bins with fewer pairs are ignored.
    pub min_pairs: usize,
    /// Fit only nugget and sill at this range.
    pub fixed_range_km: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            min_pairs: 5,
            fixed_range_km: None,
        }
    }
}

const GRID_POINTS: usize = 161;
const MAX_BRENT_ITER: usize = 300;
/// Lower bound of the sill relative to the largest semivariance.
const SILL_FLOOR: f64 = 1e-12;

struct Data {
    h: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    sill_floor: f64,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    nugget: f64,
    sill: f64,
    rss: f64,
}

impl Data {
    fn rss(&self, nugget: f64, sill: f64, f: &[f64]) -> f64 {
        self.y
            .iter()
            .zip(f)
            .zip(&self.w)
            .map(|((y, f), w)| {
                let r = y - nugget - sill * f;
                w * r * r
            })
            .sum()
    }

    /// Bounded weighted least squares for (nugget >= 0, sill >= floor) at a
    /// fixed range. The problem is a convex QP in two variables, so the
    /// optimum is the free minimiser or lies on one of the two bound edges.
    fn solve_linear(&self, kind: VariogramKind, range: f64) -> Linear {
        let f: Vec<f64> = self.h.iter().map(|&h| kind.shape(h / range)).collect();
        let (mut sw, mut swf, mut swff, mut swy, mut swfy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ((&fi, &yi), &wi) in f.iter().zip(&self.y).zip(&self.w) {
            sw += wi;
            swf += wi * fi;
            swff += wi * fi * fi;
            swy += wi * yi;
            swfy += wi * fi * yi;
        }
        let floor = self.sill_floor;
        let mut candidates = Vec::with_capacity(4);
        let det = sw * swff - swf * swf;
        if det > 1e-12 * sw * swff {
            let sill = (sw * swfy - swf * swy) / det;
            let nugget = (swy - swf * sill) / sw;
            if nugget >= 0.0 && sill >= floor {
                candidates.push((nugget, sill));
            }
        }
        if swff > 0.0 {
            candidates.push((0.0, (swfy / swff).max(floor)));
        }
        candidates.push((((swy - floor * swf) / sw).max(0.0), floor));
        candidates.push((0.0, floor));
        candidates
            .into_iter()
            .map(|(nugget, sill)| Linear {
                nugget,
                sill,
                rss: self.rss(nugget, sill, &f),
            })
            .min_by(|a, b| a.rss.total_cmp(&b.rss))
            .expect("at least one candidate")
    }
}

/// Fits one model kind to the populated bins of `emp`.
pub fn fit_kind(emp: &EmpiricalVariogram, kind: VariogramKind, opts: &FitOptions) -> Result<VariogramModelSpec> {
    let rows: Vec<(f64, f64, usize)> = emp.populated(opts.min_pairs).collect();
    if rows.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "variogram fit needs 3 populated bins with >= {} pairs, found {}",
            opts.min_pairs,
            rows.len()
        )));
    }
    let max_gamma = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let data = Data {
        h: rows.iter().map(|r| r.0).collect(),
        y: rows.iter().map(|r| r.1).collect(),
        w: rows.iter().map(|r| r.2 as f64).collect(),
        sill_floor: SILL_FLOOR * max_gamma.max(f64::MIN_POSITIVE),
    };

    let (range, lin) = match opts.fixed_range_km {
        Some(a) => {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Argument(format!("fixed range {a} must be > 0")));
            }
            (a, data.solve_linear(kind, a))
        }
        None => search_range(&data, kind)?,
    };
    // a range below every observed lag cannot be told apart from pure nugget
    let flat = data.h.iter().all(|&h| kind.shape(h / range) >= 1.0 - 1e-12);
    let lin = if flat && lin.sill > data.sill_floor {
        let nugget = lin.nugget + lin.sill - data.sill_floor;
        let f: Vec<f64> = data.h.iter().map(|&h| kind.shape(h / range)).collect();
        Linear {
            nugget,
            sill: data.sill_floor,
            rss: data.rss(nugget, data.sill_floor, &f),
        }
    } else {
        lin
    };
    let spec = VariogramModelSpec {
        kind,
        nugget: lin.nugget,
        sill: lin.sill,
        range_km: range,
        rss: lin.rss,
        degenerate: flat || lin.sill <= data.sill_floor * (1.0 + 1e-9),
    };
    if !spec.rss.is_finite() {
        return Err(Error::Fit {
            message: format!("{kind} fit produced a non-finite residual"),
            best_rss: spec.rss,
        });
    }
    Ok(spec)
}

fn search_range(data: &Data, kind: VariogramKind) -> Result<(f64, Linear)> {
    let mut centres = data.h.clone();
    centres.sort_by(f64::total_cmp);
    let h_min = centres[0];
    let h_max = *centres.last().expect("nonempty");
    let lo = (0.1 * h_min).ln();
    let hi = (10.0 * h_max).ln();
    let objective = |log_a: f64| data.solve_linear(kind, log_a.exp()).rss;

    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&x| objective(x)).collect();

    let nearest = |x: f64| (((x - lo) / step).round() as isize).clamp(0, GRID_POINTS as isize - 1) as usize;
    let mut starts: Vec<usize> = [25.0, 50.0, 75.0]
        .iter()
        .map(|&p| nearest(percentile(&centres, p).ln()))
        .collect();
    let global = (0..GRID_POINTS)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("nonempty grid");
    starts.push(global);

    let mut best: Option<(f64, f64)> = None;
    let mut best_so_far = f64::INFINITY;
    for start in starts {
        // walk downhill on the grid, then polish inside the neighbouring cells
        let mut i = start;
        loop {
            let left = (i > 0 && values[i - 1] < values[i]).then(|| i - 1);
            let right = (i + 1 < GRID_POINTS && values[i + 1] < values[i]).then(|| i + 1);
            match (left, right) {
                (Some(l), Some(r)) => i = if values[l] <= values[r] { l } else { r },
                (Some(l), None) => i = l,
                (None, Some(r)) => i = r,
                (None, None) => break,
            }
        }
        let a = grid[i.saturating_sub(1)];
        let b = grid[(i + 1).min(GRID_POINTS - 1)];
        let (x, fx, converged) = brent_min(&objective, a, b, grid[i], values[i]);
        best_so_far = best_so_far.min(fx);
        if !converged {
            return Err(Error::Fit {
                message: format!("{kind} range search did not converge"),
                best_rss: best_so_far,
            });
        }
        if best.is_none_or(|(_, f)| fx < f) {
            best = Some((x, fx));
        }
    }
    let (log_a, _) = best.expect("at least one start");
    let range = log_a.exp();
    Ok((range, data.solve_linear(kind, range)))
}

/// Brent's bracketed minimiser on `[a, b]` starting from `x0` (with value
/// `f0`). Returns the best point, its value and whether it converged.
fn brent_min(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, x0: f64, f0: f64) -> (f64, f64, bool) {
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    const TOL: f64 = 1e-12;
    if !(b > a) {
        return (x0, f0, true);
    }
    let (mut x, mut w, mut v) = (x0, x0, x0);
    let (mut fx, mut fw, mut fv) = (f0, f0, f0);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..MAX_BRENT_ITER {
        let m = 0.5 * (a + b);
        let tol1 = TOL * x.abs() + 1e-15;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            return (x, fx, true);
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= m { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, fv) = (w, fw);
            (w, fw) = (x, fx);
            (x, fx) = (u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv) = (w, fw);
                (w, fw) = (u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    (x, fx, false)
}

/// Fits every requested kind and returns them in request order.
pub fn fit_all(
    emp: &EmpiricalVariogram,
    kinds: &[VariogramKind],
    opts: &FitOptions,
) -> Result<Vec<VariogramModelSpec>> {
    if kinds.is_empty() {
        return Err(Error::Argument("no variogram kinds requested".into()));
    }
    kinds.iter().map(|&k| fit_kind(emp, k, opts)).collect()
}

/// Fits every requested kind and keeps the lowest weighted RSS; ties go to
/// the earlier kind.
pub fn fit_variogram(
    emp: &EmpiricalVariogram,
    kinds: &[VariogramKind],
    opts: &FitOptions,
) -> Result<VariogramModelSpec> {
    let fits = fit_all(emp, kinds, opts)?;
    Ok(fits
        .into_iter()
        .reduce(|best, m| if m.rss < best.rss { m } else { best })
        .expect("nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geostat::variogram::VariogramBin;

    fn synthetic(model: &VariogramModelSpec, centres: &[f64]) -> EmpiricalVariogram {
        let mut edges = vec![centres[0] - 0.25];
        edges.extend(centres.iter().map(|c| c + 0.25));
        let bins = centres
            .iter()
            .map(|&h| VariogramBin {
                h_center_km: h,
                gamma_hat: Some(model.gamma(h).unwrap()),
                pair_count: 10,
            })
            .collect();
        EmpiricalVariogram::from_bins(edges, bins).unwrap()
    }

    fn centres() -> Vec<f64> {
        (0..10).map(|i| 0.5 + 0.5 * i as f64).collect()
    }

    #[test]
    fn recovers_noiseless_spherical() {
        let truth = VariogramModelSpec::spherical(0.5, 2.0, 3.0).unwrap();
        let emp = synthetic(&truth, &centres());
        let fit = fit_variogram(&emp, &VariogramKind::ALL, &FitOptions::default()).unwrap();
        assert_eq!(fit.kind, VariogramKind::Spherical);
        assert!((fit.nugget - 0.5).abs() < 1e-6, "{fit:?}");
        assert!((fit.sill - 2.0).abs() < 1e-6, "{fit:?}");
        assert!((fit.range_km - 3.0).abs() < 1e-6, "{fit:?}");
        assert!(!fit.degenerate);
    }

    #[test]
    fn spherical_rss_strictly_smallest() {
        let truth = VariogramModelSpec::spherical(0.5, 2.0, 3.0).unwrap();
        let emp = synthetic(&truth, &centres());
        let fits = fit_all(&emp, &VariogramKind::ALL, &FitOptions::default()).unwrap();
        assert!(fits[0].rss < fits[1].rss && fits[0].rss < fits[2].rss, "{fits:?}");
    }

    #[test]
    fn flat_field_is_degenerate() {
        let bins = centres()
            .iter()
            .map(|&h| VariogramBin {
                h_center_km: h,
                gamma_hat: Some(4.0),
                pair_count: 7,
            })
            .collect::<Vec<_>>();
        let mut edges = vec![0.25];
        edges.extend(centres().iter().map(|c| c + 0.25));
        let emp = EmpiricalVariogram::from_bins(edges, bins).unwrap();
        let fit = fit_variogram(&emp, &VariogramKind::ALL, &FitOptions::default()).unwrap();
        assert!(fit.degenerate);
        assert!((fit.nugget - 4.0).abs() < 1e-9);
        assert!(fit.sill > 0.0 && fit.sill < 1e-9);
    }

    #[test]
    fn fixed_range_mode() {
        let truth = VariogramModelSpec::new(VariogramKind::Exponential, 1.0, 3.0, 2.0).unwrap();
        let emp = synthetic(&truth, &centres());
        let opts = FitOptions {
            fixed_range_km: Some(2.0),
            ..FitOptions::default()
        };
        let fit = fit_kind(&emp, VariogramKind::Exponential, &opts).unwrap();
        assert_eq!(fit.range_km, 2.0);
        assert!((fit.nugget - 1.0).abs() < 1e-9 && (fit.sill - 3.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_bins() {
        let truth = VariogramModelSpec::spherical(0.0, 1.0, 1.0).unwrap();
        let emp = synthetic(&truth, &[0.5, 1.0]);
        assert!(matches!(
            fit_variogram(&emp, &VariogramKind::ALL, &FitOptions::default()),
            Err(Error::InsufficientData(_))
        ));
        // bins below min_pairs do not count
        let emp = synthetic(&truth, &centres());
        let opts = FitOptions {
            min_pairs: 11,
            ..FitOptions::default()
        };
        assert!(fit_variogram(&emp, &VariogramKind::ALL, &opts).is_err());
    }

    #[test]
    fn brent_finds_parabola_minimum() {
        let (x, fx, ok) = brent_min(&|x: f64| (x - 0.3).powi(2) + 1.0, -1.0, 2.0, 1.5, 2.44);
        assert!(ok);
        assert!((x - 0.3).abs() < 1e-9 && (fx - 1.0).abs() < 1e-15);
    }
}
