//! Projection of 3D seam segments onto mesh edges: endpoints snap to their
//! nearest vertices and the shortest edge path between them is marked.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::mesh::{edge_key, EdgeGraph, IndexedMesh, Vec3};
use crate::token::SeamSet;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProjectError {
    #[error("mesh has no vertices")]
    EmptyMesh,
    #[error("vertex {target} is unreachable from vertex {from}")]
    Unreachable { from: usize, target: usize },
    #[error("vertex {vertex} out of range ({count} nodes)")]
    BadVertex { vertex: usize, count: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Undirected mesh edges marked as seams, with the segment indices that
/// produced each one.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeamEdgeSet {
    edges: BTreeMap<(usize, usize), Vec<usize>>,
}

impl SeamEdgeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut set = Self::new();
        for (a, b) in pairs {
            set.insert(a, b);
        }
        set
    }

    pub fn insert(&mut self, a: usize, b: usize) -> bool {
        let mut fresh = false;
        self.edges.entry(edge_key(a, b)).or_insert_with(|| {
            fresh = true;
            Vec::new()
        });
        fresh
    }

    pub fn insert_from(&mut self, a: usize, b: usize, segment: usize) {
        let list = self.edges.entry(edge_key(a, b)).or_default();
        if !list.contains(&segment) {
            list.push(segment);
        }
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.edges.contains_key(&edge_key(a, b))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edges in ascending `(lo, hi)` order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.keys().copied()
    }

    pub fn provenance(&self, a: usize, b: usize) -> Option<&[usize]> {
        self.edges.get(&edge_key(a, b)).map(Vec::as_slice)
    }

    /// One `vi vj` line per edge with `vi < vj`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (a, b) in self.edges() {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self, ProjectError> {
        let mut set = Self::new();
        for (i, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let ids: Vec<usize> = body
                .split_whitespace()
                .map(|t| t.parse().ok())
                .collect::<Option<_>>()
                .filter(|v: &Vec<usize>| v.len() == 2 && v[0] != v[1])
                .ok_or_else(|| ProjectError::Parse {
                    line: i + 1,
                    message: format!("expected two distinct vertex indices, found '{body}'"),
                })?;
            set.insert(ids[0], ids[1]);
        }
        Ok(set)
    }
}

/// Closest vertex by Euclidean distance; ties go to the lowest index.
pub fn nearest_vertex(mesh: &IndexedMesh, p: &Vec3) -> Result<usize, ProjectError> {
    let mut best: Option<(f64, usize)> = None;
    for (i, v) in mesh.vertices().iter().enumerate() {
        let d = (v - p).norm_squared();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i).ok_or(ProjectError::EmptyMesh)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphPath {
    pub vertices: Vec<usize>,
    pub length: f64,
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from `source`, stopping once `target` is settled. Among equal
/// length routes the lower-index predecessor is kept.
pub fn shortest_path(graph: &EdgeGraph, source: usize, target: usize) -> Result<GraphPath, ProjectError> {
    let count = graph.node_count();
    for vertex in [source, target] {
        if vertex >= count {
            return Err(ProjectError::BadVertex { vertex, count });
        }
    }
    if source == target {
        return Ok(GraphPath {
            vertices: vec![source],
            length: 0.0,
        });
    }
    let mut dist = vec![f64::INFINITY; count];
    let mut pred = vec![usize::MAX; count];
    let mut settled = vec![false; count];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Frontier {
        dist: 0.0,
        node: source,
    });
    while let Some(Frontier { dist: d, node }) = heap.pop() {
        if settled[node] {
            continue;
        }
        settled[node] = true;
        if node == target {
            break;
        }
        for &(next, w) in graph.neighbors(node) {
            if settled[next] {
                continue;
            }
            let candidate = d + w;
            if candidate < dist[next] || (candidate == dist[next] && node < pred[next]) {
                if candidate < dist[next] {
                    heap.push(Frontier {
                        dist: candidate,
                        node: next,
                    });
                }
                dist[next] = candidate;
                pred[next] = node;
            }
        }
    }
    if !settled[target] {
        return Err(ProjectError::Unreachable { from: source, target });
    }
    let mut vertices = vec![target];
    let mut at = target;
    while at != source {
        at = pred[at];
        vertices.push(at);
    }
    vertices.reverse();
    Ok(GraphPath {
        vertices,
        length: dist[target],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedSegment {
    pub segment: usize,
    pub reason: ProjectError,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Projection {
    pub edges: SeamEdgeSet,
    /// Segments whose endpoints lie in different connected components.
    pub skipped: Vec<SkippedSegment>,
}

/// Marks, for every segment, the shortest edge path between the vertices
/// nearest to its endpoints. Segments collapsing onto one vertex add nothing;
/// unreachable segments are skipped and reported.
pub fn project_seams(mesh: &IndexedMesh, seams: &SeamSet) -> Result<Projection, ProjectError> {
    if mesh.vertex_count() == 0 {
        return Err(ProjectError::EmptyMesh);
    }
    let graph = mesh.build_edge_graph();
    let mut out = Projection::default();
    for (i, seg) in seams.segments.iter().enumerate() {
        let a = nearest_vertex(mesh, &seg.a)?;
        let b = nearest_vertex(mesh, &seg.b)?;
        match shortest_path(&graph, a, b) {
            Ok(path) => {
                for w in path.vertices.windows(2) {
                    out.edges.insert_from(w[0], w[1], i);
                }
            }
            Err(reason @ ProjectError::Unreachable { .. }) => {
                log::warn!("skipping seam segment {i}: {reason}");
                out.skipped.push(SkippedSegment { segment: i, reason });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;
    use crate::token::Segment;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nearest_vertex_exact_and_ties() {
        let mesh = shapes::grid(4, 4);
        assert_eq!(nearest_vertex(&mesh, &mesh.vertices()[7]).unwrap(), 7);
        // Equidistant from vertices 1 and 2.
        let p = (mesh.vertices()[1] + mesh.vertices()[2]) * 0.5;
        assert_eq!(nearest_vertex(&mesh, &p).unwrap(), 1);
        let empty = IndexedMesh::new(vec![], vec![], None).unwrap();
        assert_eq!(nearest_vertex(&empty, &p), Err(ProjectError::EmptyMesh));
    }

    #[test]
    fn nearest_vertex_matches_linear_scan() {
        let mesh = shapes::uv_sphere(10, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = Vec3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            );
            let mut best = 0;
            for i in 1..mesh.vertex_count() {
                if (mesh.vertices()[i] - p).norm() < (mesh.vertices()[best] - p).norm() {
                    best = i;
                }
            }
            assert_eq!(nearest_vertex(&mesh, &p).unwrap(), best);
        }
    }

    #[test]
    fn trivial_paths() {
        let g = EdgeGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]);
        assert_eq!(shortest_path(&g, 0, 1).unwrap().vertices, vec![0, 1]);
        let same = shortest_path(&g, 2, 2).unwrap();
        assert_eq!(same.vertices, vec![2]);
        assert_eq!(same.length, 0.0);
        assert!(matches!(shortest_path(&g, 0, 9), Err(ProjectError::BadVertex { .. })));
    }

    #[test]
    fn equal_routes_prefer_lower_predecessor() {
        // 0 -> {1, 2} -> 3 with equal weights.
        let g = EdgeGraph::from_edges(4, &[(0, 2, 1.0), (0, 1, 1.0), (2, 3, 1.0), (1, 3, 1.0)]);
        assert_eq!(shortest_path(&g, 0, 3).unwrap().vertices, vec![0, 1, 3]);
        assert_eq!(shortest_path(&g, 3, 0).unwrap().vertices, vec![3, 1, 0]);
    }

    #[test]
    fn unreachable_components() {
        let g = EdgeGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]);
        assert_eq!(
            shortest_path(&g, 0, 3),
            Err(ProjectError::Unreachable { from: 0, target: 3 })
        );
    }

    fn floyd_warshall(n: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for &(a, b, w) in edges {
            d[a][b] = d[a][b].min(w);
            d[b][a] = d[b][a].min(w);
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    #[test]
    fn paths_match_floyd_warshall() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let n = rng.random_range(2..=50);
            // Integer weights keep sums exact regardless of association order.
            let mut edges: Vec<(usize, usize, f64)> = (1..n)
                .map(|v| (rng.random_range(0..v), v, rng.random_range(1..20) as f64))
                .collect();
            for _ in 0..n {
                let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
                if a != b {
                    edges.push((a, b, rng.random_range(1..20) as f64));
                }
            }
            let g = EdgeGraph::from_edges(n, &edges);
            let d = floyd_warshall(n, &edges);
            for a in 0..n {
                for b in 0..n {
                    let path = shortest_path(&g, a, b).unwrap();
                    assert_eq!(path.length, d[a][b]);
                    let walked: f64 = path
                        .vertices
                        .windows(2)
                        .map(|w| {
                            g.neighbors(w[0])
                                .iter()
                                .filter(|(n, _)| *n == w[1])
                                .map(|(_, w)| *w)
                                .fold(f64::INFINITY, f64::min)
                        })
                        .sum();
                    assert_eq!(walked, path.length);
                }
            }
        }
    }

    #[test]
    fn segment_along_edge_marks_that_edge() {
        let mesh = shapes::grid(4, 4);
        let seams = SeamSet::new(vec![Segment::new(mesh.vertices()[6], mesh.vertices()[7])]);
        let proj = project_seams(&mesh, &seams).unwrap();
        assert_eq!(proj.edges.edges().collect::<Vec<_>>(), vec![(6, 7)]);
        assert_eq!(proj.edges.provenance(7, 6), Some(&[0][..]));
    }

    #[test]
    fn collapsed_segment_contributes_nothing() {
        let mesh = shapes::grid(4, 4);
        let v = mesh.vertices()[12];
        let seams = SeamSet::new(vec![Segment::new(v, v + Vec3::new(0.01, 0.01, 0.0))]);
        assert!(project_seams(&mesh, &seams).unwrap().edges.is_empty());
    }

    #[test]
    fn cross_component_segment_is_skipped() {
        let a = shapes::grid(2, 2);
        let offset = a.vertex_count();
        let mut vertices = a.vertices().to_vec();
        vertices.extend(a.vertices().iter().map(|p| p + Vec3::new(3.0, 0.0, 0.0)));
        let mut tris = a.triangles().to_vec();
        tris.extend(a.triangles().iter().map(|t| t.map(|i| i + offset)));
        let mesh = IndexedMesh::new(vertices, tris, None).unwrap();
        let seams = SeamSet::new(vec![
            Segment::new(mesh.vertices()[0], mesh.vertices()[offset]),
            Segment::new(mesh.vertices()[0], mesh.vertices()[1]),
        ]);
        let proj = project_seams(&mesh, &seams).unwrap();
        assert_eq!(proj.skipped.len(), 1);
        assert_eq!(proj.skipped[0].segment, 0);
        assert_eq!(proj.edges.len(), 1);
    }

    #[test]
    fn perturbed_grid_polyline_recovers_ground_truth() {
        // Artist seam on a 10 x 10 grid: a staircase polyline of axis-aligned
        // edges. Each segment covers one straight run; endpoints are jittered by
        // less than a quarter edge length.
        let n = 10;
        let mesh = shapes::grid(n, n);
        let h = 1.0 / n as f64;
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let corners = [(1, 1), (6, 1), (6, 4), (8, 4), (8, 9)];
        let mut truth = SeamEdgeSet::new();
        for w in corners.windows(2) {
            let ((i0, j0), (i1, j1)) = (w[0], w[1]);
            if j0 == j1 {
                for i in i0.min(i1)..i0.max(i1) {
                    truth.insert(idx(i, j0), idx(i + 1, j0));
                }
            } else {
                for j in j0.min(j1)..j0.max(j1) {
                    truth.insert(idx(i0, j), idx(i0, j + 1));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let mut jitter = || {
                let r = rng.random_range(0.0..0.2 * h);
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Vec3::new(r * a.cos(), r * a.sin(), rng.random_range(-0.1 * h..0.1 * h))
            };
            let segments = corners
                .windows(2)
                .map(|w| {
                    Segment::new(
                        mesh.vertices()[idx(w[0].0, w[0].1)] + jitter(),
                        mesh.vertices()[idx(w[1].0, w[1].1)] + jitter(),
                    )
                })
                .collect();
            let proj = project_seams(&mesh, &SeamSet::new(segments)).unwrap();
            assert_eq!(
                proj.edges.edges().collect::<Vec<_>>(),
                truth.edges().collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn projection_is_monotone_and_on_mesh() {
        let mesh = shapes::cube(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut segments = Vec::new();
        let mut previous = SeamEdgeSet::new();
        for _ in 0..15 {
            let mut pt = || Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            segments.push(Segment::new(pt(), pt()));
            let proj = project_seams(&mesh, &SeamSet::new(segments.clone())).unwrap();
            for (a, b) in previous.edges() {
                assert!(proj.edges.contains(a, b));
            }
            for (a, b) in proj.edges.edges() {
                assert!(mesh.has_edge(a, b));
            }
            previous = proj.edges;
        }
    }

    #[test]
    fn edge_file_round_trip() {
        let set = SeamEdgeSet::from_pairs([(5, 2), (0, 1), (2, 5)]);
        assert_eq!(set.to_text(), "0 1\n2 5\n");
        assert_eq!(SeamEdgeSet::parse_text(&set.to_text()).unwrap(), set);
        assert!(SeamEdgeSet::parse_text("1 1\n").is_err());
        assert!(SeamEdgeSet::parse_text("1 x\n").is_err());
    }
}
