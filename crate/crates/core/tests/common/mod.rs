#![allow(dead_code)]

use netmfd::network::{DetectorSite, Link, Network};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random connected network: a random spanning tree plus `extra` chords,
/// random link directions, lengths in [0.1, 2] km and classes 1..=`classes`
/// with every class present.
pub fn random_network(rng: &mut ChaCha8Rng, nodes: usize, extra: usize, classes: u32) -> Network {
    let mut links = Vec::new();
    let push = |rng: &mut ChaCha8Rng, a: usize, b: usize, links: &mut Vec<Link>| {
        let (from, to) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        let i = links.len();
        let class = if (i as u32) < classes {
            i as u32 + 1
        } else {
            rng.random_range(1..=classes)
        };
        links.push(Link::new(
            format!("L{i}"),
            format!("n{from}"),
            format!("n{to}"),
            rng.random_range(0.1..2.0),
            class,
        ));
    };
    for v in 1..nodes {
        let u = rng.random_range(0..v);
        push(rng, u, v, &mut links);
    }
    for _ in 0..extra {
        let a = rng.random_range(0..nodes);
        let b = rng.random_range(0..nodes);
        if a != b {
            push(rng, a, b, &mut links);
        }
    }
    links.shuffle(rng);
    Network::new(links).unwrap()
}

/// `n` sites on random links at random offsets.
pub fn random_sites(rng: &mut ChaCha8Rng, net: &Network, n: usize) -> Vec<DetectorSite> {
    (0..n)
        .map(|i| {
            let link = &net.links()[rng.random_range(0..net.links().len())];
            DetectorSite::new(format!("d{i}"), link.id.clone(), rng.random_range(0.0..=1.0))
        })
        .collect()
}

/// One midpoint detector per link.
pub fn midpoint_sites(net: &Network) -> Vec<DetectorSite> {
    net.links()
        .iter()
        .map(|l| DetectorSite::midpoint(format!("D{}", l.id), l.id.clone()))
        .collect()
}

/// Dense solve of `a x = b` by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Spherical semivariogram written out independently of the library.
pub fn spherical(nugget: f64, sill: f64, range: f64, h: f64) -> f64 {
    if h >= range {
        nugget + sill
    } else {
        let r = h / range;
        nugget + sill * (1.5 * r - 0.5 * r * r * r)
    }
}

/// Planar points and their Euclidean distance function.
pub fn plane_points(rng: &mut ChaCha8Rng, n: usize, side: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| (rng.random_range(0.0..side), rng.random_range(0.0..side)))
        .collect()
}

pub fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}
