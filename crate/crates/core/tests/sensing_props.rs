mod common;

use std::collections::BTreeMap;

use common::{midpoint_sites, random_network, rng};
use netmfd::network::{Link, Network};
use netmfd::sensing::{aggregate_to_links, edie_network_truth, sample_coverage, DetectorReading, LinkObservation};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn class_counts(net: &Network, kept: &[netmfd::network::DetectorSite]) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for s in kept {
        *out.entry(net.link(&s.link_id).unwrap().hierarchy).or_insert(0) += 1;
    }
    out
}

#[test]
fn splitting_a_link_keeps_edie_means() {
    let mut r = rng(21);
    for _ in 0..20 {
        let net = random_network(&mut r, 12, 6, 3);
        let obs: Vec<LinkObservation> = net
            .links()
            .iter()
            .map(|l| LinkObservation::new(l.id.clone(), 0, r.random_range(0.0..2000.0), r.random_range(0.0..80.0)))
            .collect();
        let before = edie_network_truth(&obs, &net).unwrap();

        let target = r.random_range(0..net.links().len());
        let cut = r.random_range(0.1..0.9);
        let mut links = Vec::new();
        let mut split_obs = Vec::new();
        for (i, (l, o)) in net.links().iter().zip(&obs).enumerate() {
            if i == target {
                let mid = format!("{}_mid", l.id);
                links.push(Link::new(
                    format!("{}a", l.id),
                    l.from_node.clone(),
                    mid.clone(),
                    cut * l.length_km,
                    l.hierarchy,
                ));
                links.push(Link::new(
                    format!("{}b", l.id),
                    mid,
                    l.to_node.clone(),
                    (1.0 - cut) * l.length_km,
                    l.hierarchy,
                ));
                for suffix in ["a", "b"] {
                    split_obs.push(LinkObservation::new(
                        format!("{}{suffix}", l.id),
                        0,
                        o.flow_veh_per_h,
                        o.density_veh_per_km,
                    ));
                }
            } else {
                links.push(l.clone());
                split_obs.push(o.clone());
            }
        }
        let split = Network::new(links).unwrap();
        let after = edie_network_truth(&split_obs, &split).unwrap();
        assert!((before.flow_veh_per_h - after.flow_veh_per_h).abs() <= 1e-9 * before.flow_veh_per_h.abs().max(1.0));
        assert!(
            (before.density_veh_per_km - after.density_veh_per_km).abs()
                <= 1e-9 * before.density_veh_per_km.abs().max(1.0)
        );
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let mut r = rng(22);
    let net = random_network(&mut r, 40, 20, 3);
    let sites = midpoint_sites(&net);
    let a = sample_coverage(&sites, &net, 0.3, 5).unwrap();
    let b = sample_coverage(&sites, &net, 0.3, 5).unwrap();
    assert_eq!(a, b);
    let c = sample_coverage(&sites, &net, 0.3, 6).unwrap();
    assert_eq!(a.0.per_hierarchy_counts, c.0.per_hierarchy_counts);
}

#[test]
fn aggregation_ignores_reading_order() {
    let mut r = rng(23);
    let net = random_network(&mut r, 15, 5, 2);
    let mut sites = midpoint_sites(&net);
    let extra: Vec<_> = sites
        .iter()
        .take(5)
        .map(|s| netmfd::network::DetectorSite::new(format!("{}x", s.detector_id), s.link_id.clone(), 0.2))
        .collect();
    sites.extend(extra);
    let mut readings: Vec<DetectorReading> = Vec::new();
    for bin in 0..4 {
        for s in &sites {
            readings.push(DetectorReading {
                detector_id: s.detector_id.clone(),
                bin_index: bin,
                flow_veh_per_h: r.random_range(0.0..1500.0),
                density_veh_per_km: r.random_range(0.0..60.0),
                speed_km_per_h: None,
            });
        }
    }
    let base = aggregate_to_links(&readings, &sites).unwrap();
    assert_eq!(base.len(), 4 * net.links().len());
    for _ in 0..5 {
        readings.shuffle(&mut r);
        let shuffled = aggregate_to_links(&readings, &sites).unwrap();
        for (a, b) in base.iter().zip(&shuffled) {
            assert_eq!((&a.link_id, a.bin_index), (&b.link_id, b.bin_index));
            assert!((a.flow_veh_per_h - b.flow_veh_per_h).abs() <= 1e-9);
            assert!((a.density_veh_per_km - b.density_veh_per_km).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn class_counts_grow_with_fraction(seed in any::<u64>(), f1 in 0.01f64..1.0, f2 in 0.01f64..1.0) {
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let mut r = rng(seed);
        let net = random_network(&mut r, 30, 15, 3);
        let sites = midpoint_sites(&net);
        let (plan_lo, kept_lo) = sample_coverage(&sites, &net, lo, seed).unwrap();
        let (plan_hi, kept_hi) = sample_coverage(&sites, &net, hi, seed).unwrap();
        prop_assert_eq!(kept_lo.len(), plan_lo.total());
        prop_assert_eq!(&class_counts(&net, &kept_lo), &plan_lo.per_hierarchy_counts);
        for (class, &n) in &plan_lo.per_hierarchy_counts {
            prop_assert!(n >= 1);
            prop_assert!(n <= plan_hi.per_hierarchy_counts[class]);
        }
        prop_assert_eq!(&class_counts(&net, &kept_hi), &plan_hi.per_hierarchy_counts);
    }
}
