//! Directed sensor graph built from pairwise distances.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::SupportMask;

/// One row of a distance file: an edge candidate from one sensor to another.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRecord {
    pub from: String,
    pub to: String,
    pub distance: f64,
}

/// Directed graph over the sensors. The adjacency is binary and may be
/// asymmetric; it supplies edge support only — edge weights come from the
/// attention layer.
#[derive(Debug, Clone)]
pub struct SensorGraph {
    n: usize,
    adjacency: Vec<bool>,
    vertex_ids: Vec<String>,
    distances: Option<Vec<f64>>,
}

impl SensorGraph {
    /// Graph with no edges over the given vertices.
    pub fn edgeless(vertex_ids: Vec<String>) -> Self {
        let n = vertex_ids.len();
        SensorGraph {
            n,
            adjacency: vec![false; n * n],
            vertex_ids,
            distances: None,
        }
    }

    /// Graph from an explicit adjacency matrix, mainly for tests and the
    /// synthetic generator.
    pub fn from_adjacency(vertex_ids: Vec<String>, adjacency: Vec<bool>) -> Self {
        let n = vertex_ids.len();
        assert_eq!(adjacency.len(), n * n);
        SensorGraph {
            n,
            adjacency,
            vertex_ids,
            distances: None,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency[from * self.n + to]
    }

    pub fn vertex_ids(&self) -> &[String] {
        &self.vertex_ids
    }

    pub fn distance(&self, from: usize, to: usize) -> Option<f64> {
        self.distances
            .as_ref()
            .map(|d| d[from * self.n + to])
            .filter(|d| d.is_finite())
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count()
    }

    /// Stable external-id → dense-index mapping.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.vertex_ids.iter().position(|v| v == id)
    }
}

/// Per-vertex ordered neighbor lists, each including the vertex itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    lists: Vec<Vec<usize>>,
}

impl NeighborSets {
    pub fn n(&self) -> usize {
        self.lists.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    /// Dense boolean mask usable by the masked softmax.
    pub fn support_mask(&self) -> Arc<SupportMask> {
        let n = self.lists.len();
        let mut mask = vec![false; n * n];
        for (i, list) in self.lists.iter().enumerate() {
            for &j in list {
                mask[i * n + j] = true;
            }
        }
        Arc::new(SupportMask::new(n, mask))
    }
}

/// Build the graph from distance records using a strict `d < threshold` rule.
/// Vertices are indexed densely in first-appearance order of the record ids.
pub fn build_graph(records: &[DistanceRecord], threshold: f64) -> SensorGraph {
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in records {
        for id in [rec.from.as_str(), rec.to.as_str()] {
            if !index.contains_key(id) {
                index.insert(id.to_string(), ids.len());
                ids.push(id.to_string());
            }
        }
    }
    let n = ids.len();
    let mut adjacency = vec![false; n * n];
    let mut distances = vec![f64::INFINITY; n * n];
    for rec in records {
        let i = index[rec.from.as_str()];
        let j = index[rec.to.as_str()];
        distances[i * n + j] = rec.distance;
        if rec.distance < threshold {
            adjacency[i * n + j] = true;
        }
    }
    SensorGraph {
        n,
        adjacency,
        vertex_ids: ids,
        distances: Some(distances),
    }
}

/// Build the graph over a fixed vertex universe (the series file's sensors).
/// Records naming a sensor outside the universe are an ingestion error;
/// sensors with no record become isolated vertices.
pub fn build_graph_with_vertices(
    vertex_ids: &[String],
    records: &[DistanceRecord],
    threshold: f64,
) -> Result<SensorGraph> {
    let n = vertex_ids.len();
    let index: HashMap<&str, usize> = vertex_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut adjacency = vec![false; n * n];
    let mut distances = vec![f64::INFINITY; n * n];
    for (line, rec) in records.iter().enumerate() {
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| Error::Ingestion {
                path: "<distance records>".to_string(),
                line: line + 2, // header occupies line 1
                msg: format!("unknown sensor id {id:?}"),
            })
        };
        let i = lookup(&rec.from)?;
        let j = lookup(&rec.to)?;
        distances[i * n + j] = rec.distance;
        if rec.distance < threshold {
            adjacency[i * n + j] = true;
        }
    }
    Ok(SensorGraph {
        n,
        adjacency,
        vertex_ids: vertex_ids.to_vec(),
        distances: Some(distances),
    })
}

/// Outgoing neighbor sets NB(i) = {j | E[i,j] = 1} ∪ {i}, each list in
/// ascending vertex order.
pub fn out_neighbor_sets(g: &SensorGraph) -> NeighborSets {
    let lists = (0..g.n())
        .map(|i| (0..g.n()).filter(|&j| j == i || g.has_edge(i, j)).collect())
        .collect();
    NeighborSets { lists }
}

/// The graph with every edge reversed. Its outgoing neighbor sets are the
/// original graph's incoming neighbors (plus self), which drive the
/// in-direction attention matrix.
pub fn transpose_graph(g: &SensorGraph) -> SensorGraph {
    let n = g.n();
    let mut adjacency = vec![false; n * n];
    let mut distances = g.distances.as_ref().map(|_| vec![f64::INFINITY; n * n]);
    for i in 0..n {
        for j in 0..n {
            adjacency[j * n + i] = g.adjacency[i * n + j];
            if let (Some(dst), Some(src)) = (distances.as_mut(), g.distances.as_ref()) {
                dst[j * n + i] = src[i * n + j];
            }
        }
    }
    SensorGraph {
        n,
        adjacency,
        vertex_ids: g.vertex_ids.clone(),
        distances,
    }
}

/// Parse a `from,to,dist` distance file.
pub fn load_distance_records(path: &Path) -> Result<Vec<DistanceRecord>> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "from,to,dist" => {}
        Some((_, header)) => {
            return Err(Error::Ingestion {
                path: display,
                line: 1,
                msg: format!("expected header 'from,to,dist', got {header:?}"),
            })
        }
        None => {
            return Err(Error::Ingestion {
                path: display,
                line: 1,
                msg: "empty distance file".to_string(),
            })
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Ingestion {
                path: display,
                line: i + 1,
                msg: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let distance: f64 = parts[2].trim().parse().map_err(|_| Error::Ingestion {
            path: display.clone(),
            line: i + 1,
            msg: format!("bad distance {:?}", parts[2]),
        })?;
        if distance < 0.0 {
            return Err(Error::Ingestion {
                path: display,
                line: i + 1,
                msg: format!("negative distance {distance}"),
            });
        }
        records.push(DistanceRecord {
            from: parts[0].trim().to_string(),
            to: parts[1].trim().to_string(),
            distance,
        });
    }
    Ok(records)
}

/// Write distance records in the `from,to,dist` file format.
pub fn write_distance_file(path: &Path, records: &[DistanceRecord]) -> Result<()> {
    let mut out = String::from("from,to,dist\n");
    for rec in records {
        out.push_str(&format!("{},{},{}\n", rec.from, rec.to, rec.distance));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(from: &str, to: &str, d: f64) -> DistanceRecord {
        DistanceRecord {
            from: from.to_string(),
            to: to.to_string(),
            distance: d,
        }
    }

    #[test]
    fn asymmetric_edge_below_threshold() {
        let g = build_graph(&[rec("a", "b", 100.0)], 150.0);
        let (a, b) = (g.index_of("a").unwrap(), g.index_of("b").unwrap());
        assert!(g.has_edge(a, b));
        assert!(!g.has_edge(b, a));
    }

    #[test]
    fn zero_threshold_gives_no_edges() {
        let g = build_graph(&[rec("a", "b", 0.0), rec("b", "c", 1.0)], 0.0);
        assert_eq!(g.edge_count(), 0);
        let nb = out_neighbor_sets(&g);
        for i in 0..g.n() {
            assert_eq!(nb.neighbors(i), &[i]);
        }
    }

    #[test]
    fn threshold_is_strict() {
        let g = build_graph(&[rec("a", "b", 2.0)], 2.0);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn chain_has_exactly_two_edges() {
        let g = build_graph(&[rec("a", "b", 1.0), rec("b", "c", 1.0)], 2.0);
        assert_eq!(g.edge_count(), 2);
        let nb = out_neighbor_sets(&g);
        let idx = |s: &str| g.index_of(s).unwrap();
        assert_eq!(nb.neighbors(idx("a")), &[idx("a"), idx("b")]);
        assert_eq!(nb.neighbors(idx("b")), &[idx("b"), idx("c")]);
        assert_eq!(nb.neighbors(idx("c")), &[idx("c")]);
    }

    #[test]
    fn first_appearance_indexing_is_stable() {
        let g = build_graph(&[rec("x", "a", 1.0), rec("a", "q", 1.0)], 10.0);
        assert_eq!(g.vertex_ids(), &["x", "a", "q"]);
    }

    #[test]
    fn neighbor_sets_on_full_adjacency() {
        let mut adjacency = vec![true; 9];
        for i in 0..3 {
            adjacency[i * 3 + i] = false;
        }
        let g = SensorGraph::from_adjacency(vec!["a".into(), "b".into(), "c".into()], adjacency);
        let nb = out_neighbor_sets(&g);
        for i in 0..3 {
            assert_eq!(nb.neighbors(i), &[0, 1, 2]);
        }
    }

    #[test]
    fn transpose_flips_single_edge() {
        let g = build_graph(&[rec("a", "b", 1.0)], 2.0);
        let t = transpose_graph(&g);
        let (a, b) = (g.index_of("a").unwrap(), g.index_of("b").unwrap());
        assert!(t.has_edge(b, a));
        assert!(!t.has_edge(a, b));
    }

    #[test]
    fn symmetric_graph_equals_its_transpose() {
        let g = build_graph(&[rec("a", "b", 1.0), rec("b", "a", 1.0)], 2.0);
        let t = transpose_graph(&g);
        assert_eq!(g.adjacency, t.adjacency);
    }

    #[test]
    fn unknown_id_in_fixed_universe_is_ingestion_error() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let err = build_graph_with_vertices(&ids, &[rec("a", "zz", 1.0)], 10.0).unwrap_err();
        assert!(err.to_string().contains("zz"), "{err}");
    }

    #[test]
    fn missing_vertices_become_isolated() {
        let ids = vec!["a".to_string(), "b".to_string(), "lonely".to_string()];
        let g = build_graph_with_vertices(&ids, &[rec("a", "b", 1.0)], 10.0).unwrap();
        let nb = out_neighbor_sets(&g);
        assert_eq!(nb.neighbors(2), &[2]);
    }

    #[test]
    fn support_mask_includes_self_loops() {
        let g = build_graph(&[rec("a", "b", 1.0)], 2.0);
        let mask = out_neighbor_sets(&g).support_mask();
        assert!(mask.contains(0, 0));
        assert!(mask.contains(0, 1));
        assert!(!mask.contains(1, 0));
        assert!(mask.contains(1, 1));
    }
}
