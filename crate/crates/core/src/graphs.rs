//! Geographical and sequential POI graphs.
//!
//! The geographical graph is global, undirected and built once; the
//! sequential graph is built per context on the fly.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use disenpoi_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("distance threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("malformed geo graph file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A coordinate pair in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn in_bounds(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }

    fn unit_vector(&self) -> [f64; 3] {
        let (lat, lon) = (self.lat.to_radians(), self.lon.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    }
}

/// Great-circle distance in kilometers.
pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let s_lat = (dlat / 2.0).sin();
    let s_lon = (dlon / 2.0).sin();
    let h = (s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon).clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Undirected POI graph with an edge between every pair of distinct
/// locations no farther apart than `delta_d` kilometers. Stored as CSR with
/// neighbors sorted by index.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoGraph {
    delta_d: f64,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    distances: Vec<f64>,
    colocated_pairs: usize,
}

impl GeoGraph {
    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn delta_d(&self) -> f64 {
        self.delta_d
    }

    /// Pairs of distinct POIs sharing coordinates; they get no edge.
    pub fn colocated_pairs(&self) -> usize {
        self.colocated_pairs
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    /// Neighbor indices and distances of `node`.
    pub fn neighbors(&self, node: usize) -> (&[usize], &[f64]) {
        let span = self.offsets[node]..self.offsets[node + 1];
        (&self.neighbors[span.clone()], &self.distances[span])
    }

    /// Builds from explicit per-node adjacency lists (sorted internally).
    pub fn from_adjacency(delta_d: f64, mut adjacency: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(adjacency.len() + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        let mut distances = Vec::new();
        for list in &mut adjacency {
            list.sort_by_key(|&(j, _)| j);
            for &(j, d) in list.iter() {
                neighbors.push(j);
                distances.push(d);
            }
            offsets.push(neighbors.len());
        }
        Self {
            delta_d,
            offsets,
            neighbors,
            distances,
            colocated_pairs: 0,
        }
    }

    /// BFS expansion of `seeds` by `hops` levels.
    ///
    /// Nodes are ordered by hop distance, so the nodes within `k` hops form
    /// the prefix `nodes[..level_sizes[k]]`. Seeds keep first-occurrence
    /// order; later levels follow their discovery order.
    pub fn k_hop(&self, seeds: &[usize], hops: usize) -> KHop {
        let mut seen = vec![false; self.num_nodes()];
        let mut nodes = Vec::new();
        for &s in seeds {
            if !seen[s] {
                seen[s] = true;
                nodes.push(s);
            }
        }
        let mut level_sizes = vec![nodes.len()];
        let mut frontier = 0;
        for _ in 0..hops {
            let end = nodes.len();
            for idx in frontier..end {
                let (nbrs, _) = self.neighbors(nodes[idx]);
                for &j in nbrs {
                    if !seen[j] {
                        seen[j] = true;
                        nodes.push(j);
                    }
                }
            }
            frontier = end;
            level_sizes.push(nodes.len());
        }
        KHop { nodes, level_sizes }
    }

    /// Serializes as little-endian: `num_nodes: u64`, `delta_d: f64`,
    /// then `offsets: [u64; n + 1]`, `neighbors: [u64; nnz]`,
    /// `distances: [f64; nnz]`.
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(&(self.num_nodes() as u64).to_le_bytes())?;
        w.write_all(&self.delta_d.to_le_bytes())?;
        for &o in &self.offsets {
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        for &j in &self.neighbors {
            w.write_all(&(j as u64).to_le_bytes())?;
        }
        for &d in &self.distances {
            w.write_all(&d.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, GraphError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut words = buf.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("8 bytes"));
        if buf.len() % 8 != 0 || buf.len() < 24 {
            return Err(GraphError::Malformed(format!("length {}", buf.len())));
        }
        let mut next = || words.next().ok_or_else(|| GraphError::Malformed("truncated".into()));
        let n = u64::from_le_bytes(next()?) as usize;
        let delta_d = f64::from_le_bytes(next()?);
        let offsets = (0..=n)
            .map(|_| next().map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let nnz = *offsets.last().expect("n + 1 offsets");
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(GraphError::Malformed("offsets not monotone".into()));
        }
        let neighbors = (0..nnz)
            .map(|_| next().map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let distances = (0..nnz)
            .map(|_| next().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>, _>>()?;
        if next().is_ok() {
            return Err(GraphError::Malformed("trailing bytes".into()));
        }
        if neighbors.iter().any(|&j| j >= n) {
            return Err(GraphError::Malformed("neighbor index out of range".into()));
        }
        Ok(Self {
            delta_d,
            offsets,
            neighbors,
            distances,
            colocated_pairs: 0,
        })
    }
}

/// Result of [`GeoGraph::k_hop`].
#[derive(Clone, Debug, PartialEq)]
pub struct KHop {
    pub nodes: Vec<usize>,
    /// `level_sizes[k]` = number of nodes within `k` hops of the seeds.
    pub level_sizes: Vec<usize>,
}

/// Builds the geographical graph with a 3-D grid over unit-sphere
/// positions. Cell edge = chord length of `delta_d`, so every candidate
/// pair lies in adjacent cells; haversine decides the final edge set.
pub fn build_geo_graph(coords: &[LatLon], delta_d: f64) -> Result<GeoGraph, GraphError> {
    if !(delta_d > 0.0) || !delta_d.is_finite() {
        return Err(GraphError::InvalidThreshold(delta_d));
    }
    let angle = (delta_d / EARTH_RADIUS_KM).min(std::f64::consts::PI);
    let cell = (2.0 * (angle / 2.0).sin()).max(1e-12) * (1.0 + 1e-9);
    let points: Vec<[f64; 3]> = coords.iter().map(LatLon::unit_vector).collect();
    let key = |p: &[f64; 3]| -> [i64; 3] { p.map(|x| (x / cell).floor() as i64) };

    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }

    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); coords.len()];
    let mut colocated = 0;
    for (i, p) in points.iter().enumerate() {
        let [cx, cy, cz] = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&[cx + dx, cy + dy, cz + dz]) else {
                        continue;
                    };
                    for &j in bucket {
                        if j <= i {
                            continue;
                        }
                        let d = haversine_km(coords[i], coords[j]);
                        if d == 0.0 {
                            colocated += 1;
                        } else if d <= delta_d {
                            adjacency[i].push((j, d));
                            adjacency[j].push((i, d));
                        }
                    }
                }
            }
        }
    }
    if colocated > 0 {
        log::warn!("{colocated} co-located POI pairs left unconnected in the geo graph");
    }
    let mut graph = GeoGraph::from_adjacency(delta_d, adjacency);
    graph.colocated_pairs = colocated;
    Ok(graph)
}

/// Directed graph of one check-in context.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqGraph {
    /// Distinct POIs in first-occurrence order.
    pub nodes: Vec<usize>,
    /// `alias[p]` = position in `nodes` of the `p`-th context element.
    pub alias: Vec<usize>,
    /// Row `i` spreads over the successors of node `i`, normalized by out-degree.
    pub out_matrix: Tensor,
    /// Row `i` spreads over the predecessors of node `i`, normalized by in-degree.
    pub in_matrix: Tensor,
}

impl SeqGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Builds the session graph of a non-empty context. Repeated transitions
/// count once.
pub fn build_seq_graph(context: &[usize]) -> SeqGraph {
    let mut position: HashMap<usize, usize> = HashMap::new();
    let mut nodes = Vec::new();
    let alias: Vec<usize> = context
        .iter()
        .map(|&v| {
            *position.entry(v).or_insert_with(|| {
                nodes.push(v);
                nodes.len() - 1
            })
        })
        .collect();
    let n = nodes.len();
    let mut edges = vec![false; n * n];
    for w in alias.windows(2) {
        edges[w[0] * n + w[1]] = true;
    }
    let mut out_matrix = Tensor::zeros(n, n);
    let mut in_matrix = Tensor::zeros(n, n);
    for i in 0..n {
        let out_deg = (0..n).filter(|&j| edges[i * n + j]).count();
        let in_deg = (0..n).filter(|&j| edges[j * n + i]).count();
        for j in 0..n {
            if edges[i * n + j] {
                out_matrix.set(i, j, 1.0 / out_deg as f64);
            }
            if edges[j * n + i] {
                in_matrix.set(i, j, 1.0 / in_deg as f64);
            }
        }
    }
    SeqGraph {
        nodes,
        alias,
        out_matrix,
        in_matrix,
    }
}
