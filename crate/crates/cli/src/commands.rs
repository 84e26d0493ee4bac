use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use netmfd::experiment::{run_experiment, write_bundle, CellStatus, DataSource, Dataset, ExperimentConfig};
use netmfd::geostat::{
    autofit_pooled, bin_variogram, fit_all, impute_network, network_mean_from_field, AutoFit, FitOptions, ImputeParams,
    KrigingParams, ModelSource, VariogramKind, VariogramModelSpec,
};
use netmfd::mfd::{build_mfd, compute_metrics, fit_quadratic_with_ci, paired_t_test, speed_series_from_mfd, BandKind};
use netmfd::network::{load_network_path, load_sites_path, DetectorSite, DistanceMode, Network};
use netmfd::scaling::{hierarchical_scaled_mean, uniform_scaled_mean, HierarchyPartition, UniformMode};
use netmfd::sensing::{
    aggregate_to_links, group_by_bin, load_readings_path, sample_coverage, sample_coverage_counts, CoveragePlan,
    LinkObservation, TimeBin, Variable,
};
use netmfd::synth::{generate_scenario, SyntheticScenario};
use netmfd::table::{opt_cell, Table};
use netmfd::Error;
use serde_json::json;

use crate::output::{parse_pairs, read_series, BinSet, Output};
use crate::{Command, DataArgs, FitArgs, Global, KindArg, MethodArg, SiteArgs, UniformModeArg, VariableArg};

pub fn run(global: &Global, command: Command) -> Result<()> {
    let out = Output::new(global);
    match command {
        Command::Ingest { sites, readings } => ingest(&out, &sites, readings.as_deref()),
        Command::Sample {
            sites,
            fraction,
            counts,
        } => sample(global, &out, &sites, fraction, counts.as_deref()),
        Command::Scale {
            data,
            methods,
            uniform_mode,
            merge,
        } => scale(global, &out, &data, &methods, uniform_mode, merge.as_deref()),
        Command::Variogram {
            data,
            variables,
            fit,
            reuse_fit,
        } => variogram(global, &out, &data, &variables, &fit, reuse_fit),
        Command::Impute {
            data,
            fit,
            reuse_fit,
            model,
            nugget,
            sill,
            range_km,
            max_neighbors,
            min_neighbors,
            coverage_threshold,
        } => {
            let fixed = match (model, sill, range_km) {
                (Some(kind), Some(sill), Some(range)) => {
                    Some(VariogramModelSpec::new(kind_of(kind), nugget, sill, range)?)
                }
                _ => None,
            };
            let params = ImputeParams {
                kriging: KrigingParams {
                    max_neighbors,
                    min_neighbors,
                },
                distance_mode: distance_mode(&fit),
            };
            impute(global, &out, &data, &fit, reuse_fit, fixed, params, coverage_threshold)
        }
        Command::Mfd {
            input,
            method,
            confidence,
            prediction,
            samples,
        } => {
            let kind = if prediction {
                BandKind::Prediction
            } else {
                BandKind::Mean
            };
            mfd(&out, &input, method.as_deref(), confidence, kind, samples)
        }
        Command::Evaluate {
            estimated,
            actual,
            compare,
            method,
            compare_method,
            variable,
            alpha,
        } => evaluate(
            &out,
            &estimated,
            actual.as_deref(),
            compare.as_deref(),
            method.as_deref(),
            compare_method.as_deref(),
            variable_of(variable),
            alpha,
        ),
        Command::Synth { config, days } => synth(global, &out, config.as_deref(), days),
        Command::Experiment { config, workers } => experiment(global, &out, &config, workers),
    }
}

fn kind_of(k: KindArg) -> VariogramKind {
    match k {
        KindArg::Spherical => VariogramKind::Spherical,
        KindArg::Exponential => VariogramKind::Exponential,
        KindArg::Gaussian => VariogramKind::Gaussian,
    }
}

fn variable_of(v: VariableArg) -> Variable {
    match v {
        VariableArg::Flow => Variable::Flow,
        VariableArg::Density => Variable::Density,
    }
}

fn column_of(v: Variable) -> &'static str {
    match v {
        Variable::Flow => "flow_veh_per_h",
        Variable::Density => "density_veh_per_km",
    }
}

fn distance_mode(fit: &FitArgs) -> DistanceMode {
    if fit.directed {
        DistanceMode::Directed
    } else {
        DistanceMode::Undirected
    }
}

fn auto_fit(fit: &FitArgs) -> AutoFit {
    AutoFit {
        kinds: fit.kinds.iter().map(|&k| kind_of(k)).collect(),
        n_bins: fit.n_bins,
        lo_percentile: fit.lo_percentile,
        hi_percentile: fit.hi_percentile,
        fit: FitOptions {
            min_pairs: fit.min_pairs,
            fixed_range_km: fit.fixed_range_km,
        },
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| path.display().to_string())?;
    toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())).into())
}

fn require_dir<'a>(out: &'a Output, command: &str) -> Result<&'a Path> {
    out.dir()
        .ok_or_else(|| Error::Argument(format!("`{command}` writes several files and needs --output-dir")).into())
}

/// Equipped observations per bin after applying the plan and bin filter.
struct Loaded {
    net: Network,
    sites: Vec<DetectorSite>,
    bins: BTreeMap<u32, Vec<LinkObservation>>,
    duration_h: f64,
}

impl Loaded {
    fn time_bin(&self, index: u32) -> TimeBin {
        TimeBin::regular(index, self.duration_h)
    }
}

fn load(global: &Global, data: &DataArgs) -> Result<Loaded> {
    if !data.bin_duration_h.is_finite() || data.bin_duration_h <= 0.0 {
        return Err(Error::Argument(format!("bin duration {} h must be positive", data.bin_duration_h)).into());
    }
    let net = load_network_path(&data.sites.network).with_context(|| data.sites.network.display().to_string())?;
    let mut sites =
        load_sites_path(&data.sites.detectors, &net).with_context(|| data.sites.detectors.display().to_string())?;
    if let Some(path) = &data.plan {
        let text = fs::read_to_string(path)
            .map_err(Error::from)
            .with_context(|| path.display().to_string())?;
        let plan = CoveragePlan::from_json(&text).with_context(|| path.display().to_string())?;
        let known: HashSet<&str> = sites.iter().map(|s| s.detector_id.as_str()).collect();
        if let Some(missing) = plan.retained.iter().find(|d| !known.contains(d.as_str())) {
            return Err(Error::Validation(format!("plan retains unknown detector '{missing}'")).into());
        }
        sites = plan.retained_sites(&sites);
    }
    let keep: HashSet<&str> = sites.iter().map(|s| s.detector_id.as_str()).collect();
    let mut readings = load_readings_path(&data.readings).with_context(|| data.readings.display().to_string())?;
    if data.plan.is_some() {
        readings.retain(|r| keep.contains(r.detector_id.as_str()));
    }
    let mut bins = group_by_bin(&aggregate_to_links(&readings, &sites)?);
    if let Some(BinSet(wanted)) = &global.bins {
        bins.retain(|b, _| wanted.contains(b));
    }
    if bins.is_empty() {
        return Err(Error::InsufficientData("no readings in the selected bins".into()).into());
    }
    Ok(Loaded {
        net,
        sites,
        bins,
        duration_h: data.bin_duration_h,
    })
}

fn ingest(out: &Output, args: &SiteArgs, readings: Option<&Path>) -> Result<()> {
    let net = load_network_path(&args.network).with_context(|| args.network.display().to_string())?;
    let sites = load_sites_path(&args.detectors, &net).with_context(|| args.detectors.display().to_string())?;
    let mut classes = BTreeMap::new();
    for link in net.links() {
        let e = classes.entry(link.hierarchy).or_insert((0usize, 0.0f64, 0usize));
        e.0 += 1;
        e.1 += link.length_km;
    }
    for s in &sites {
        let h = net.link(&s.link_id).expect("validated site").hierarchy;
        classes.get_mut(&h).expect("network class").2 += 1;
    }
    let hierarchies: Vec<_> = classes
        .iter()
        .map(|(h, (n, len, det))| json!({ "hierarchy": h, "links": n, "length_km": len, "detectors": det }))
        .collect();
    let mut report = json!({
        "links": net.links().len(),
        "nodes": net.nodes().len(),
        "total_length_km": net.total_length_km(),
        "detectors": sites.len(),
        "hierarchies": hierarchies,
        "conventions": {
            "default_offset_fraction": netmfd::network::DEFAULT_OFFSET_FRACTION,
            "distance_mode": "undirected",
        },
    });
    if let Some(path) = readings {
        let readings = load_readings_path(path).with_context(|| path.display().to_string())?;
        let count = readings.len();
        let data = Dataset::from_parts(net, sites, readings, 1.0)?;
        report["readings"] = json!({
            "rows": count,
            "bins": data.bins.len(),
            "full_coverage_bins": data.truth.len(),
        });
    }
    out.json("ingest", &report)
}

fn sample(global: &Global, out: &Output, args: &SiteArgs, fraction: Option<f64>, counts: Option<&str>) -> Result<()> {
    let net = load_network_path(&args.network).with_context(|| args.network.display().to_string())?;
    let sites = load_sites_path(&args.detectors, &net).with_context(|| args.detectors.display().to_string())?;
    let seed = global.seed.unwrap_or(0);
    let (plan, kept) = match (fraction, counts) {
        (Some(f), _) => sample_coverage(&sites, &net, f, seed)?,
        (None, Some(c)) => sample_coverage_counts(&sites, &net, &parse_pairs(c, "--counts")?, seed)?,
        (None, None) => return Err(Error::Argument("give --fraction or --counts".into()).into()),
    };
    let mut table = Table::new("retained_detectors", &["detector_id", "link_id", "hierarchy"]);
    for s in &kept {
        let h = net.link(&s.link_id).expect("validated site").hierarchy;
        table.push([s.detector_id.clone(), s.link_id.clone(), h.to_string()]);
    }
    out.side_table(&table)?;
    out.json("plan", &serde_json::to_value(&plan)?)
}

const ESTIMATE_HEADER: [&str; 6] = [
    "bin_index",
    "method",
    "flow_veh_per_h",
    "density_veh_per_km",
    "ttd_veh_km",
    "ttt_veh_h",
];

fn scale(
    global: &Global,
    out: &Output,
    data: &DataArgs,
    methods: &[MethodArg],
    uniform_mode: UniformModeArg,
    merge: Option<&str>,
) -> Result<()> {
    let d = load(global, data)?;
    let mode = match uniform_mode {
        UniformModeArg::ExactEquipped => UniformMode::ExactEquipped,
        UniformModeArg::Strict => UniformMode::Strict,
    };
    let merge: BTreeMap<u32, u32> = merge
        .map(|m| parse_pairs(m, "--merge"))
        .transpose()?
        .unwrap_or_default();
    let mut table = Table::new("estimates", &ESTIMATE_HEADER);
    for (&index, obs) in &d.bins {
        let bin = d.time_bin(index);
        for &method in methods {
            let [q, k] = [Variable::Flow, Variable::Density].map(|v| match method {
                MethodArg::Uniform => uniform_scaled_mean(obs, &d.net, v, mode, &bin),
                MethodArg::Hierarchical => {
                    HierarchyPartition::grouped(&d.net, obs.iter().map(|o| o.link_id.as_str()), |h| {
                        merge.get(&h).copied().unwrap_or(h)
                    })
                    .and_then(|p| hierarchical_scaled_mean(obs, &p, v, &bin))
                }
            });
            let (q, k) = (
                q.with_context(|| format!("bin {index}"))?,
                k.with_context(|| format!("bin {index}"))?,
            );
            table.push([
                index.to_string(),
                q.method.to_string(),
                q.value.to_string(),
                k.value.to_string(),
                q.ttd_or_ttt.to_string(),
                k.ttd_or_ttt.to_string(),
            ]);
        }
    }
    out.main_table(&table)
}

fn model_row(table: &mut Table, bin: Option<u32>, variable: Variable, m: &VariogramModelSpec, selected: bool) {
    table.push([
        bin.map(|b| b.to_string()).unwrap_or_default(),
        variable.to_string(),
        m.kind.to_string(),
        m.nugget.to_string(),
        m.sill.to_string(),
        m.range_km.to_string(),
        m.rss.to_string(),
        selected.to_string(),
        m.degenerate.to_string(),
    ]);
}

const MODEL_HEADER: [&str; 9] = [
    "bin_index",
    "variable",
    "kind",
    "nugget",
    "sill",
    "range_km",
    "rss",
    "selected",
    "degenerate",
];

fn variogram(
    global: &Global,
    out: &Output,
    data: &DataArgs,
    variables: &[VariableArg],
    fit: &FitArgs,
    reuse_fit: bool,
) -> Result<()> {
    let d = load(global, data)?;
    let auto = auto_fit(fit);
    let mode = distance_mode(fit);
    let mut models = Table::new("variogram_models", &MODEL_HEADER);
    let mut empirical = Table::new(
        "variogram_empirical",
        &["bin_index", "variable", "h_center_km", "gamma_hat", "pair_count"],
    );
    for &v in variables {
        let v = variable_of(v);
        if reuse_fit {
            let bins: Vec<&[LinkObservation]> = d.bins.values().map(Vec::as_slice).collect();
            let fits = auto
                .kinds
                .iter()
                .map(|&k| {
                    let one = AutoFit {
                        kinds: vec![k],
                        ..auto.clone()
                    };
                    autofit_pooled(&bins, &d.net, &d.sites, v, &one, mode)
                })
                .collect::<netmfd::Result<Vec<_>>>()?;
            push_fits(&mut models, None, v, &fits);
            continue;
        }
        for (&index, obs) in &d.bins {
            let emp = bin_variogram(obs, &d.net, &d.sites, v, &auto, mode).with_context(|| format!("bin {index}"))?;
            for b in &emp.bins {
                empirical.push([
                    index.to_string(),
                    v.to_string(),
                    b.h_center_km.to_string(),
                    opt_cell(b.gamma_hat),
                    b.pair_count.to_string(),
                ]);
            }
            let fits = fit_all(&emp, &auto.kinds, &auto.fit).with_context(|| format!("bin {index}"))?;
            push_fits(&mut models, Some(index), v, &fits);
        }
    }
    out.side_table(&empirical)?;
    out.main_table(&models)
}

fn push_fits(table: &mut Table, bin: Option<u32>, v: Variable, fits: &[VariogramModelSpec]) {
    let best = fits
        .iter()
        .enumerate()
        .reduce(|a, b| if b.1.rss < a.1.rss { b } else { a })
        .map(|(i, _)| i);
    for (i, m) in fits.iter().enumerate() {
        model_row(table, bin, v, m, Some(i) == best);
    }
}

#[allow(clippy::too_many_arguments)]
fn impute(
    global: &Global,
    out: &Output,
    data: &DataArgs,
    fit: &FitArgs,
    reuse_fit: bool,
    fixed: Option<VariogramModelSpec>,
    params: ImputeParams,
    threshold: f64,
) -> Result<()> {
    let d = load(global, data)?;
    let auto = auto_fit(fit);
    let source = |v: Variable| -> Result<ModelSource> {
        Ok(match fixed {
            Some(m) => ModelSource::Fixed(m),
            None if reuse_fit => {
                let bins: Vec<&[LinkObservation]> = d.bins.values().map(Vec::as_slice).collect();
                ModelSource::Fixed(autofit_pooled(&bins, &d.net, &d.sites, v, &auto, params.distance_mode)?)
            }
            None => ModelSource::AutoFit(auto.clone()),
        })
    };
    let sources = [source(Variable::Flow)?, source(Variable::Density)?];

    let mut fields = Table::new(
        "fields",
        &[
            "link_id",
            "bin_index",
            "variable",
            "value",
            "provenance",
            "kriging_variance",
        ],
    );
    let mut models = Table::new("variogram_models", &MODEL_HEADER);
    let mut per_bin = Vec::new();
    let mut failure = None;
    for (&index, obs) in &d.bins {
        let mut pair = Vec::with_capacity(2);
        for (v, src) in [Variable::Flow, Variable::Density].into_iter().zip(&sources) {
            let field =
                impute_network(src, obs, &d.net, &d.sites, v, &params).with_context(|| format!("bin {index}"))?;
            for l in &field.links {
                fields.push([
                    l.link_id.clone(),
                    index.to_string(),
                    v.to_string(),
                    opt_cell(l.value),
                    l.provenance.to_string(),
                    opt_cell(l.kriging_variance),
                ]);
            }
            if let Some(m) = &field.model {
                model_row(&mut models, Some(index), v, m, true);
            }
            match network_mean_from_field(&field, &d.net, threshold) {
                Ok(m) => pair.push(m),
                Err(e) => {
                    failure.get_or_insert_with(|| anyhow::Error::from(e).context(format!("bin {index}, {v}")));
                }
            }
        }
        if let [q, k] = pair[..] {
            per_bin.push((index, q, k));
        }
    }
    out.main_table(&fields)?;
    out.side_table(&models)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let mut estimates = Table::new(
        "estimates",
        &[
            &ESTIMATE_HEADER[..],
            &["flow_covered_fraction", "density_covered_fraction"],
        ]
        .concat(),
    );
    let total = d.net.total_length_km();
    for (index, q, k) in per_bin {
        estimates.push([
            index.to_string(),
            "variogram".to_string(),
            q.value.to_string(),
            k.value.to_string(),
            (q.value * total * d.duration_h).to_string(),
            (k.value * total * d.duration_h).to_string(),
            q.covered_fraction.to_string(),
            k.covered_fraction.to_string(),
        ]);
    }
    out.side_table(&estimates)
}

fn mfd(
    out: &Output,
    input: &Path,
    method: Option<&str>,
    confidence: f64,
    kind: BandKind,
    samples: usize,
) -> Result<()> {
    let q = read_series(input, column_of(Variable::Flow), method)?;
    let k = read_series(input, column_of(Variable::Density), method)?;
    let points = build_mfd(&q, &k)?;
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.density_k, p.flow_q)).collect();
    let fit = fit_quadratic_with_ci(&xy, confidence)?;
    let densities: Vec<f64> = points.iter().map(|p| p.density_k).collect();
    let fitted_speed = speed_series_from_mfd(&fit, &densities);
    let mut pts = Table::new(
        "mfd_points",
        &[
            "bin_index",
            "density_veh_per_km",
            "flow_veh_per_h",
            "speed_km_per_h",
            "fitted_speed_km_per_h",
        ],
    );
    for (p, v) in points.iter().zip(&fitted_speed) {
        pts.push([
            p.bin_index.to_string(),
            p.density_k.to_string(),
            p.flow_q.to_string(),
            opt_cell(p.speed_v),
            opt_cell(*v),
        ]);
    }
    let lo = densities.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = densities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut band = Table::new("mfd_band", &["x", "y_fit", "ci_low", "ci_high"]);
    for s in fit.band_samples(lo, hi, samples, kind) {
        band.push([s.x, s.y_fit, s.low, s.high]);
    }
    out.side_table(&pts)?;
    if let Some(dir) = out.dir() {
        let mut text = serde_json::to_string_pretty(&fit)?;
        text.push('\n');
        fs::write(dir.join("mfd_fit.json"), text)?;
    }
    out.main_table(&band)
}

fn align(a: &[(u32, f64)], b: &[(u32, f64)], what: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let am: BTreeMap<u32, f64> = a.iter().copied().collect();
    let bm: BTreeMap<u32, f64> = b.iter().copied().collect();
    if am.len() != a.len() || bm.len() != b.len() {
        return Err(Error::Alignment(format!("{what}: a bin appears twice")).into());
    }
    let only_a: Vec<u32> = am.keys().filter(|k| !bm.contains_key(k)).copied().collect();
    let only_b: Vec<u32> = bm.keys().filter(|k| !am.contains_key(k)).copied().collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(Error::Alignment(format!(
            "{what}: bins only in first {only_a:?}; bins only in second {only_b:?}"
        ))
        .into());
    }
    Ok((am.into_values().collect(), bm.into_values().collect()))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    out: &Output,
    estimated: &Path,
    actual: Option<&Path>,
    compare: Option<&Path>,
    method: Option<&str>,
    compare_method: Option<&str>,
    variable: Variable,
    alpha: f64,
) -> Result<()> {
    if actual.is_none() && compare.is_none() {
        return Err(Error::Argument("give --actual, --compare or both".into()).into());
    }
    let col = column_of(variable);
    let est = read_series(estimated, col, method)?;
    let cmp = compare.map(|p| read_series(p, col, compare_method)).transpose()?;
    let mut report = json!({ "variable": variable.to_string() });
    let mut table = Table::new("metrics", &["series", "n", "rmse", "mae", "mape", "r2", "mape_skipped"]);
    if let Some(path) = actual {
        let act = read_series(path, col, None)?;
        let mut metrics = serde_json::Map::new();
        for (name, series) in [("estimated", Some(&est)), ("compare", cmp.as_ref())] {
            let Some(series) = series else { continue };
            let (e, a) = align(series, &act, name)?;
            let m = compute_metrics(&e, &a)?;
            table.push([
                name.to_string(),
                m.n.to_string(),
                m.rmse.to_string(),
                m.mae.to_string(),
                opt_cell(m.mape),
                opt_cell(m.r2),
                m.mape_skipped.to_string(),
            ]);
            metrics.insert(name.to_string(), serde_json::to_value(&m)?);
        }
        report["metrics"] = metrics.into();
    }
    if let Some(cmp) = &cmp {
        let (a, b) = align(&est, cmp, "t-test")?;
        report["t_test"] = serde_json::to_value(paired_t_test(&a, &b, alpha)?)?;
    }
    out.side_table(&table)?;
    out.json("evaluation", &report)
}

fn synth(global: &Global, out: &Output, config: Option<&Path>, days: Option<usize>) -> Result<()> {
    let dir = require_dir(out, "synth")?;
    let mut scenario: SyntheticScenario = match config {
        Some(p) => read_toml(p)?,
        None => SyntheticScenario::athens_like(0),
    };
    if let Some(seed) = global.seed {
        scenario.seed = seed;
    }
    if let Some(d) = days {
        scenario.days = d;
    }
    let g = generate_scenario(&scenario)?;
    let wanted = |b: u32| global.bins.as_ref().is_none_or(|BinSet(s)| s.contains(&b));

    let mut network = Table::new(
        "network",
        &["link_id", "from_node", "to_node", "length_km", "hierarchy"],
    );
    for l in g.network.links() {
        network.push([
            l.id.clone(),
            l.from_node.clone(),
            l.to_node.clone(),
            l.length_km.to_string(),
            l.hierarchy.to_string(),
        ]);
    }
    let mut detectors = Table::new("detectors", &["detector_id", "link_id", "offset_fraction"]);
    let mut detector_of = BTreeMap::new();
    for s in &g.sites {
        detectors.push([s.detector_id.clone(), s.link_id.clone(), s.offset_fraction.to_string()]);
        detector_of.insert(s.link_id.as_str(), s.detector_id.as_str());
    }
    let mut readings = Table::new(
        "readings",
        &["detector_id", "bin_index", "flow_veh_per_h", "density_veh_per_km"],
    );
    for o in g.observations.iter().filter(|o| wanted(o.bin_index)) {
        readings.push([
            detector_of[o.link_id.as_str()].to_string(),
            o.bin_index.to_string(),
            o.flow_veh_per_h.to_string(),
            o.density_veh_per_km.to_string(),
        ]);
    }
    let mut truth = Table::new(
        "truth",
        &[
            "bin_index",
            "flow_veh_per_h",
            "density_veh_per_km",
            "ttd_veh_km",
            "ttt_veh_h",
        ],
    );
    for bin in g.bins.iter().filter(|b| wanted(b.index)) {
        let m = netmfd::sensing::edie_network_truth(g.bin_observations(bin.index), &g.network)?;
        truth.push([
            bin.index.to_string(),
            m.flow_veh_per_h.to_string(),
            m.density_veh_per_km.to_string(),
            m.ttd(&g.network, bin.duration_h).to_string(),
            m.ttt(&g.network, bin.duration_h).to_string(),
        ]);
    }
    if truth.rows.is_empty() {
        return Err(Error::Argument("none of the requested bins was generated".into()).into());
    }
    for t in [&network, &detectors, &readings, &truth] {
        t.write_to_dir(dir, out.format())?;
    }
    eprintln!(
        "wrote {} links, {} bins to {} ({} negative draws clamped)",
        g.network.links().len(),
        truth.rows.len(),
        dir.display(),
        g.clamped
    );
    out.json("scenario", &json!({ "scenario": scenario, "clamped": g.clamped }))
}

fn experiment(global: &Global, out: &Output, path: &Path, workers: Option<usize>) -> Result<()> {
    let mut config: ExperimentConfig = read_toml(path)?;
    if let DataSource::Files {
        network,
        detectors,
        readings,
        ..
    } = &mut config.data
    {
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [network, detectors, readings] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    if let Some(seed) = global.seed {
        config.master_seed = seed;
    }
    if let Some(BinSet(b)) = &global.bins {
        config.bins = Some(b.iter().copied().collect());
    }
    if workers.is_some() {
        config.workers = workers;
    }
    let dir: PathBuf = match (out.dir(), &config.output_dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) if d.is_relative() => path.parent().unwrap_or(Path::new(".")).join(d),
        (None, Some(d)) => d.clone(),
        (None, None) => {
            return Err(Error::Argument("`experiment` needs --output-dir or output_dir in the config".into()).into())
        }
    };
    let bundle = run_experiment(&config)?;
    let manifest = write_bundle(&bundle, &dir, out.format())?;
    for s in &bundle.summary {
        eprintln!(
            "coverage {:>5} {:<12} ok {:>3}  not-estimable {:>3}  failed {:>3}  median flow rmse {}",
            s.coverage,
            s.estimator.to_string(),
            s.ok,
            s.not_estimable,
            s.failed,
            opt_cell(s.flow_rmse_median)
        );
    }
    let failed = manifest.cells.iter().filter(|c| c.status == CellStatus::Failed).count();
    eprintln!(
        "wrote {} cells and {} tables to {}",
        manifest.cells.len(),
        manifest.tables.len(),
        dir.display()
    );
    if failed > 0 {
        eprintln!("{failed} cells failed; see their messages in manifest.json");
    }
    Ok(())
}
