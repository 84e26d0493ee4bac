mod common;

use common::{random_network, random_sites, rng};
use netmfd::network::{site_distance_matrix, site_distance_matrix_with, DetectorSite, DistanceMode, Network};
use proptest::prelude::*;

/// All-pairs shortest paths over a graph where every site splits its link.
/// Returns site-to-site distances.
fn floyd_warshall(net: &Network, sites: &[DetectorSite], mode: DistanceMode) -> Vec<Vec<f64>> {
    let n_nodes = net.nodes().len();
    let n = n_nodes + sites.len();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    let add = |d: &mut Vec<Vec<f64>>, a: usize, b: usize, w: f64| {
        d[a][b] = d[a][b].min(w);
        if mode == DistanceMode::Undirected {
            d[b][a] = d[b][a].min(w);
        }
    };
    for link in net.links() {
        let u = net.node_position(&link.from_node).unwrap();
        let v = net.node_position(&link.to_node).unwrap();
        let mut points: Vec<(f64, usize)> = sites
            .iter()
            .enumerate()
            .filter(|(_, s)| s.link_id == link.id)
            .map(|(k, s)| (s.offset_fraction, n_nodes + k))
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut prev = (0.0, u);
        for &(offset, node) in points.iter().chain([(1.0, v)].iter()) {
            add(&mut d, prev.1, node, (offset - prev.0) * link.length_km);
            prev = (offset, node);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    (0..sites.len())
        .map(|i| (0..sites.len()).map(|j| d[n_nodes + i][n_nodes + j]).collect())
        .collect()
}

#[test]
#[allow(clippy::needless_range_loop)]
fn dijkstra_matches_floyd_warshall() {
    let mut r = rng(11);
    for trial in 0..25 {
        let net = random_network(&mut r, 6 + trial % 10, trial % 8, 3);
        let sites = random_sites(&mut r, &net, 12);
        for mode in [DistanceMode::Undirected, DistanceMode::Directed] {
            let oracle = floyd_warshall(&net, &sites, mode);
            let m = site_distance_matrix_with(&net, &sites, mode).unwrap();
            for i in 0..sites.len() {
                for j in 0..sites.len() {
                    match m.get(i, j) {
                        Some(got) => assert!(
                            (got - oracle[i][j]).abs() <= 1e-9,
                            "trial {trial} {mode:?} ({i},{j}): {got} vs {}",
                            oracle[i][j]
                        ),
                        None => assert!(oracle[i][j].is_infinite(), "trial {trial} {mode:?} ({i},{j})"),
                    }
                }
            }
        }
    }
}

#[test]
fn matrix_agrees_with_pairwise_calls() {
    let mut r = rng(12);
    let net = random_network(&mut r, 20, 10, 3);
    let sites = random_sites(&mut r, &net, 15);
    let m = site_distance_matrix(&net, &sites).unwrap();
    for i in 0..sites.len() {
        for j in 0..sites.len() {
            assert_eq!(m.get(i, j), Some(net.site_distance(&sites[i], &sites[j]).unwrap()));
        }
    }
}

#[test]
fn link_order_does_not_change_distances() {
    let mut r = rng(13);
    let net = random_network(&mut r, 15, 8, 2);
    let sites = random_sites(&mut r, &net, 10);
    let mut links = net.links().to_vec();
    links.reverse();
    let flipped = Network::new(links).unwrap();
    assert!((net.total_length_km() - flipped.total_length_km()).abs() < 1e-12);
    let a = site_distance_matrix(&net, &sites).unwrap();
    let b = site_distance_matrix(&flipped, &sites).unwrap();
    for i in 0..sites.len() {
        for j in 0..sites.len() {
            assert!((a.get(i, j).unwrap() - b.get(i, j).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn unreachable_sites_in_directed_mode() {
    let net = Network::new(vec![
        netmfd::network::Link::new("a", "x", "y", 1.0, 1),
        netmfd::network::Link::new("b", "y", "z", 2.0, 1),
    ])
    .unwrap();
    let sites = [DetectorSite::midpoint("s1", "a"), DetectorSite::midpoint("s2", "b")];
    let m = site_distance_matrix_with(&net, &sites, DistanceMode::Directed).unwrap();
    assert_eq!(m.get(0, 1), Some(1.5));
    assert_eq!(m.get(1, 0), None);
    let u = site_distance_matrix(&net, &sites).unwrap();
    assert_eq!(u.get(1, 0), Some(1.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn undirected_distance_is_a_pseudo_metric(seed in any::<u64>(), nodes in 3usize..20, extra in 0usize..10) {
        let mut r = rng(seed);
        let net = random_network(&mut r, nodes, extra, 3);
        let sites = random_sites(&mut r, &net, 8);
        let m = site_distance_matrix(&net, &sites).unwrap();
        for i in 0..sites.len() {
            prop_assert_eq!(m.get(i, i), Some(0.0));
            for j in 0..sites.len() {
                let dij = m.get(i, j).unwrap();
                prop_assert!(dij >= 0.0);
                prop_assert!((dij - m.get(j, i).unwrap()).abs() <= 1e-12);
                for k in 0..sites.len() {
                    prop_assert!(dij <= m.get(i, k).unwrap() + m.get(k, j).unwrap() + 1e-9);
                }
            }
        }
    }
}
