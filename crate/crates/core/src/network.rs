//! Road graph, link hierarchies, detector placement and network distances.
//!
//! Distances between detector sites are measured along the road network: a
//! site sits at a fraction of its link's length from the link's `from_node`,
//! and the distance between two sites is the shortest route through the
//! graph, entering and leaving each link through either endpoint.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{RawTable, TableFormat};

/// Offset used when a detector table leaves `offset_fraction` blank.
pub const DEFAULT_OFFSET_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: String,
    pub from_node: String,
    pub to_node: String,
    pub length_km: f64,
    pub hierarchy: u32,
}

impl Link {
    pub fn new(
        id: impl Into<String>,
        from_node: impl Into<String>,
        to_node: impl Into<String>,
        length_km: f64,
        hierarchy: u32,
    ) -> Self {
        Link {
            id: id.into(),
            from_node: from_node.into(),
            to_node: to_node.into(),
            length_km,
            hierarchy,
        }
    }
}

/// Whether link traversal respects the `from_node -> to_node` direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    #[default]
    Undirected,
    Directed,
}

#[derive(Debug, Clone, Copy)]
struct Arc {
    to: usize,
    length_km: f64,
}

/// A validated, immutable road network.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<String>,
    node_index: HashMap<String, usize>,
    links: Vec<Link>,
    link_index: HashMap<String, usize>,
    endpoints: Vec<(usize, usize)>,
    forward: Vec<Vec<Arc>>,
    backward: Vec<Vec<Arc>>,
    hierarchy_set: BTreeSet<u32>,
    total_length_km: f64,
}

impl Network {
    /// Builds a network whose node set is the set of link endpoints.
    pub fn new(links: Vec<Link>) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut seen = HashSet::new();
        for link in &links {
            for node in [&link.from_node, &link.to_node] {
                if !node.is_empty() && seen.insert(node.clone()) {
                    nodes.push(node.clone());
                }
            }
        }
        Self::with_nodes(nodes, links)
    }

    /// Builds a network against an explicit node set; every link endpoint
    /// must be declared.
    pub fn with_nodes(nodes: Vec<String>, links: Vec<Link>) -> Result<Self> {
        let mut node_index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(n.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate node '{n}'")));
            }
        }
        let mut link_index = HashMap::with_capacity(links.len());
        let mut endpoints = Vec::with_capacity(links.len());
        let mut forward = vec![Vec::new(); nodes.len()];
        let mut backward = vec![Vec::new(); nodes.len()];
        let mut hierarchy_set = BTreeSet::new();
        for (i, link) in links.iter().enumerate() {
            if link.id.is_empty() {
                return Err(Error::Validation(format!("link #{i} has an empty id")));
            }
            if link_index.insert(link.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate link id '{}'", link.id)));
            }
            if !(link.length_km > 0.0 && link.length_km.is_finite()) {
                return Err(Error::Validation(format!(
                    "link '{}' has nonpositive length {}",
                    link.id, link.length_km
                )));
            }
            if link.hierarchy == 0 {
                return Err(Error::Validation(format!(
                    "link '{}' has hierarchy 0; classes start at 1",
                    link.id
                )));
            }
            let resolve = |n: &str| {
                node_index
                    .get(n)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("link '{}' references unknown node '{n}'", link.id)))
            };
            let (u, v) = (resolve(&link.from_node)?, resolve(&link.to_node)?);
            endpoints.push((u, v));
            forward[u].push(Arc {
                to: v,
                length_km: link.length_km,
            });
            backward[v].push(Arc {
                to: u,
                length_km: link.length_km,
            });
            hierarchy_set.insert(link.hierarchy);
        }
        let total_length_km = neumaier_sum(links.iter().map(|l| l.length_km));
        Ok(Network {
            nodes,
            node_index,
            links,
            link_index,
            endpoints,
            forward,
            backward,
            hierarchy_set,
            total_length_km,
        })
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn link(&self, id: &str) -> Option<&Link> {
        self.link_index.get(id).map(|&i| &self.links[i])
    }

    pub fn link_position(&self, id: &str) -> Option<usize> {
        self.link_index.get(id).copied()
    }

    pub fn hierarchy_set(&self) -> &BTreeSet<u32> {
        &self.hierarchy_set
    }

    pub fn total_length_km(&self) -> f64 {
        self.total_length_km
    }

    pub fn node_position(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    /// Resolves a detector site to a link position, validating the offset.
    pub fn locate(&self, site: &DetectorSite) -> Result<SitePosition> {
        let link = self.link_position(&site.link_id).ok_or_else(|| {
            Error::Validation(format!(
                "detector '{}' references unknown link '{}'",
                site.detector_id, site.link_id
            ))
        })?;
        if !(0.0..=1.0).contains(&site.offset_fraction) {
            return Err(Error::Validation(format!(
                "detector '{}' has offset_fraction {} outside [0, 1]",
                site.detector_id, site.offset_fraction
            )));
        }
        Ok(SitePosition {
            link,
            offset: site.offset_fraction,
        })
    }

    /// Midpoint position of the link at `index`.
    pub fn midpoint(&self, index: usize) -> SitePosition {
        SitePosition {
            link: index,
            offset: 0.5,
        }
    }

    /// Single-source shortest distances from a point on a link to every node.
    pub fn distance_field(&self, from: SitePosition, mode: DistanceMode) -> DistanceField {
        let (u, v) = self.endpoints[from.link];
        let len = self.links[from.link].length_km;
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        let mut seed = |node: usize, d: f64, heap: &mut BinaryHeap<State>| {
            if d < dist[node] {
                dist[node] = d;
                heap.push(State { dist: d, node });
            }
        };
        seed(v, (1.0 - from.offset) * len, &mut heap);
        if mode == DistanceMode::Undirected {
            seed(u, from.offset * len, &mut heap);
        }
        while let Some(State { dist: d, node }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            let arcs = self.forward[node].iter().chain(match mode {
                DistanceMode::Undirected => self.backward[node].iter(),
                DistanceMode::Directed => [].iter(),
            });
            for arc in arcs {
                let nd = d + arc.length_km;
                if nd < dist[arc.to] {
                    dist[arc.to] = nd;
                    heap.push(State { dist: nd, node: arc.to });
                }
            }
        }
        DistanceField {
            source: from,
            mode,
            node_dist: dist,
        }
    }

    /// Shortest network distance between two resolved positions, `None` when
    /// no route exists.
    pub fn position_distance(&self, a: SitePosition, b: SitePosition, mode: DistanceMode) -> Option<f64> {
        self.distance_field(a, mode).distance_to(self, b)
    }

    /// Shortest undirected network distance between two detector sites.
    pub fn site_distance(&self, a: &DetectorSite, b: &DetectorSite) -> Result<f64> {
        self.site_distance_with(a, b, DistanceMode::Undirected)
    }

    pub fn site_distance_with(&self, a: &DetectorSite, b: &DetectorSite, mode: DistanceMode) -> Result<f64> {
        let (pa, pb) = (self.locate(a)?, self.locate(b)?);
        self.position_distance(pa, pb, mode).ok_or_else(|| Error::Unreachable {
            from: a.detector_id.clone(),
            to: b.detector_id.clone(),
        })
    }
}

/// Shortest undirected distance between two sites along the network.
pub fn detector_path_distance(net: &Network, a: &DetectorSite, b: &DetectorSite) -> Result<f64> {
    net.site_distance(a, b)
}

/// A point on a link: link index plus fraction of length from `from_node`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SitePosition {
    pub link: usize,
    pub offset: f64,
}

/// Node distances from one source position.
#[derive(Debug, Clone)]
pub struct DistanceField {
    source: SitePosition,
    mode: DistanceMode,
    node_dist: Vec<f64>,
}

impl DistanceField {
    pub fn source(&self) -> SitePosition {
        self.source
    }

    pub fn node_distance(&self, node: usize) -> Option<f64> {
        Some(self.node_dist[node]).filter(|d| d.is_finite())
    }

    /// Distance from the source to a target position, or `None` if unreachable.
    pub fn distance_to(&self, net: &Network, target: SitePosition) -> Option<f64> {
        let (u, v) = net.endpoints[target.link];
        let len = net.links[target.link].length_km;
        let mut best = self.node_dist[u] + target.offset * len;
        if self.mode == DistanceMode::Undirected {
            best = best.min(self.node_dist[v] + (1.0 - target.offset) * len);
        }
        if target.link == self.source.link {
            let along = target.offset - self.source.offset;
            match self.mode {
                DistanceMode::Undirected => best = best.min(along.abs() * len),
                DistanceMode::Directed if along >= 0.0 => best = best.min(along * len),
                DistanceMode::Directed => {}
            }
        }
        Some(best).filter(|d| d.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct State {
    dist: f64,
    node: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Square matrix of site-to-site distances; unreachable pairs hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> Option<f64>) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j).unwrap_or(f64::INFINITY));
            }
        }
        DistanceMatrix { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        Some(self.data[i * self.n + j]).filter(|d| d.is_finite())
    }

    pub fn unreachable_pairs(&self) -> usize {
        let mut count = 0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.get(i, j).is_none() {
                    count += 1;
                }
            }
        }
        count
    }
}

/// Pairwise undirected network distances between sites.
pub fn site_distance_matrix(net: &Network, sites: &[DetectorSite]) -> Result<DistanceMatrix> {
    site_distance_matrix_with(net, sites, DistanceMode::Undirected)
}

pub fn site_distance_matrix_with(net: &Network, sites: &[DetectorSite], mode: DistanceMode) -> Result<DistanceMatrix> {
    let positions = sites.iter().map(|s| net.locate(s)).collect::<Result<Vec<_>>>()?;
    Ok(position_distance_matrix(net, &positions, mode))
}

/// Pairwise distances between resolved positions, one Dijkstra per row.
pub fn position_distance_matrix(net: &Network, positions: &[SitePosition], mode: DistanceMode) -> DistanceMatrix {
    let rows: Vec<Vec<f64>> = positions
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let field = net.distance_field(p, mode);
            positions
                .iter()
                .enumerate()
                .map(|(j, &q)| {
                    if i == j {
                        0.0
                    } else {
                        field.distance_to(net, q).unwrap_or(f64::INFINITY)
                    }
                })
                .collect()
        })
        .collect();
    DistanceMatrix {
        n: positions.len(),
        data: rows.into_iter().flatten().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSite {
    pub detector_id: String,
    pub link_id: String,
    pub offset_fraction: f64,
}

impl DetectorSite {
    pub fn new(detector_id: impl Into<String>, link_id: impl Into<String>, offset: f64) -> Self {
        DetectorSite {
            detector_id: detector_id.into(),
            link_id: link_id.into(),
            offset_fraction: offset,
        }
    }

    /// A site at the midpoint of a link.
    pub fn midpoint(detector_id: impl Into<String>, link_id: impl Into<String>) -> Self {
        Self::new(detector_id, link_id, DEFAULT_OFFSET_FRACTION)
    }
}

/// Parses a link table (`link_id, from_node, to_node, length_km, hierarchy`).
pub fn load_network<R: Read>(reader: R, format: TableFormat) -> Result<Network> {
    let table = RawTable::read(reader, format)?;
    let cols = [
        table.column("link_id")?,
        table.column("from_node")?,
        table.column("to_node")?,
        table.column("length_km")?,
        table.column("hierarchy")?,
    ];
    let links = table
        .rows()
        .map(|row| {
            Ok(Link {
                id: row.str(cols[0])?.to_string(),
                from_node: row.str(cols[1])?.to_string(),
                to_node: row.str(cols[2])?.to_string(),
                length_km: row.parse(cols[3])?,
                hierarchy: row.parse(cols[4])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(links)
}

pub fn load_network_path(path: &Path) -> Result<Network> {
    load_network(std::fs::File::open(path)?, TableFormat::from_path(path))
}

/// Parses a detector table (`detector_id, link_id, offset_fraction`), the
/// last column being optional, and validates every site against `net`.
pub fn load_sites<R: Read>(reader: R, format: TableFormat, net: &Network) -> Result<Vec<DetectorSite>> {
    let table = RawTable::read(reader, format)?;
    let id_col = table.column("detector_id")?;
    let link_col = table.column("link_id")?;
    let offset_col = table.optional_column("offset_fraction");
    let mut seen = HashSet::new();
    let mut sites = Vec::with_capacity(table.len());
    for row in table.rows() {
        let site = DetectorSite {
            detector_id: row.str(id_col)?.to_string(),
            link_id: row.str(link_col)?.to_string(),
            offset_fraction: row.parse_opt(offset_col)?.unwrap_or(DEFAULT_OFFSET_FRACTION),
        };
        if !seen.insert(site.detector_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate detector id '{}' at line {}",
                site.detector_id, row.line
            )));
        }
        net.locate(&site)?;
        sites.push(site);
    }
    Ok(sites)
}

pub fn load_sites_path(path: &Path, net: &Network) -> Result<Vec<DetectorSite>> {
    load_sites(std::fs::File::open(path)?, TableFormat::from_path(path), net)
}

pub(crate) fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if f64::abs(sum) >= f64::abs(v) {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
