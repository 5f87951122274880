//! Indexed triangle meshes: OBJ ingestion, canonical-cube normalization,
//! UV-derived seam extraction and the vertex/edge graph.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;

use nalgebra::Vector3;
use thiserror::Error;

use crate::project::SeamEdgeSet;

pub type Vec3 = Vector3<f64>;

/// Two corner UVs closer than this (per component) are considered identical.
pub const UV_SEAM_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: index {index} out of range ({count} available)")]
    IndexOutOfRange {
        line: usize,
        index: i64,
        count: usize,
    },
    #[error("triangle {triangle} references vertex {index}, mesh has {count} vertices")]
    BadTriangle {
        triangle: usize,
        index: usize,
        count: usize,
    },
    #[error("triangle {triangle} repeats a vertex index")]
    DegenerateTriangle { triangle: usize },
    #[error("expected {expected} uv corners, found {found}")]
    UvCountMismatch { expected: usize, found: usize },
    #[error("mesh has no uv coordinates")]
    MissingUv,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An undirected mesh edge with its incident triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    /// Endpoints, `vertices[0] < vertices[1]`.
    pub vertices: [usize; 2],
    pub length: f64,
    pub faces: Vec<usize>,
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.faces.len() == 1
    }

    pub fn is_non_manifold(&self) -> bool {
        self.faces.len() > 2
    }
}

#[inline]
pub fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Triangle mesh with optional per-corner UVs. Immutable once built.
#[derive(Debug, Clone)]
pub struct IndexedMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    uv_corners: Option<Vec<[f64; 2]>>,
    edges: Vec<Edge>,
    edge_lookup: HashMap<(usize, usize), usize>,
}

impl PartialEq for IndexedMesh {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices
            && self.triangles == other.triangles
            && self.uv_corners == other.uv_corners
    }
}

impl IndexedMesh {
    pub fn new(
        vertices: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
        uv_corners: Option<Vec<[f64; 2]>>,
    ) -> Result<Self, MeshError> {
        let count = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &index in tri {
                if index >= count {
                    return Err(MeshError::BadTriangle {
                        triangle: t,
                        index,
                        count,
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::DegenerateTriangle { triangle: t });
            }
        }
        if let Some(uv) = &uv_corners {
            if uv.len() != 3 * triangles.len() {
                return Err(MeshError::UvCountMismatch {
                    expected: 3 * triangles.len(),
                    found: uv.len(),
                });
            }
        }

        let mut edges: Vec<Edge> = Vec::new();
        let mut edge_lookup = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for k in 0..3 {
                let key = edge_key(tri[k], tri[(k + 1) % 3]);
                let id = *edge_lookup.entry(key).or_insert_with(|| {
                    edges.push(Edge {
                        vertices: [key.0, key.1],
                        length: (vertices[key.0] - vertices[key.1]).norm(),
                        faces: Vec::with_capacity(2),
                    });
                    edges.len() - 1
                });
                edges[id].faces.push(t);
            }
        }

        Ok(Self {
            vertices,
            triangles,
            uv_corners,
            edges,
            edge_lookup,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn uv_corners(&self) -> Option<&[[f64; 2]]> {
        self.uv_corners.as_deref()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Index into [`edges`](Self::edges) for the undirected edge `a`-`b`.
    pub fn edge_id(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_lookup.get(&edge_key(a, b)).copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edge_id(a, b).is_some()
    }

    /// Edges with more than two incident triangles.
    pub fn non_manifold_edges(&self) -> Vec<usize> {
        (0..self.edges.len())
            .filter(|&e| self.edges[e].is_non_manifold())
            .collect()
    }

    pub fn triangle_points(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Axis-aligned bounding box, `None` for a mesh without vertices.
    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    /// Same mesh with every vertex mapped through `f`.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> IndexedMesh {
        let vertices = self.vertices.iter().map(f).collect();
        IndexedMesh::new(vertices, self.triangles.clone(), self.uv_corners.clone())
            .expect("topology is unchanged")
    }

    /// Same geometry with the UV corners replaced.
    pub fn with_uv_corners(&self, uv: Option<Vec<[f64; 2]>>) -> Result<IndexedMesh, MeshError> {
        IndexedMesh::new(self.vertices.clone(), self.triangles.clone(), uv)
    }

    /// Maps the bounding box into `[-0.5, 0.5]^3`, scaling isotropically so the
    /// longest axis spans the full cube.
    pub fn normalize(&self) -> Result<(IndexedMesh, NormalizationTransform), MeshError> {
        let (lo, hi) = self
            .bounding_box()
            .ok_or_else(|| MeshError::Degenerate("mesh has no vertices".into()))?;
        let extent = (hi - lo).max();
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(MeshError::Degenerate(
                "bounding box has zero extent".into(),
            ));
        }
        let transform = NormalizationTransform {
            center: (lo + hi) * 0.5,
            scale: 1.0 / extent,
        };
        Ok((self.map_vertices(|p| transform.apply(p)), transform))
    }

    /// Interior edges whose incident triangles disagree on the UV of a shared
    /// vertex. Every pair of incident triangles is compared, so non-manifold
    /// edges are handled pairwise.
    pub fn extract_uv_seams(&self) -> Result<SeamEdgeSet, MeshError> {
        let uv = self.uv_corners.as_ref().ok_or(MeshError::MissingUv)?;
        let corner_uv = |t: usize, v: usize| -> [f64; 2] {
            let k = self.triangles[t]
                .iter()
                .position(|&x| x == v)
                .expect("edge vertex belongs to incident triangle");
            uv[3 * t + k]
        };
        let mut seams = SeamEdgeSet::new();
        for edge in &self.edges {
            let mut is_seam = false;
            'pairs: for (i, &fa) in edge.faces.iter().enumerate() {
                for &fb in &edge.faces[i + 1..] {
                    for &v in &edge.vertices {
                        let (a, b) = (corner_uv(fa, v), corner_uv(fb, v));
                        if (a[0] - b[0]).abs() > UV_SEAM_TOLERANCE
                            || (a[1] - b[1]).abs() > UV_SEAM_TOLERANCE
                        {
                            is_seam = true;
                            break 'pairs;
                        }
                    }
                }
            }
            if is_seam {
                seams.insert(edge.vertices[0], edge.vertices[1]);
            }
        }
        Ok(seams)
    }

    pub fn build_edge_graph(&self) -> EdgeGraph {
        let mut adjacency = vec![Vec::new(); self.vertices.len()];
        for edge in &self.edges {
            let [a, b] = edge.vertices;
            adjacency[a].push((b, edge.length));
            adjacency[b].push((a, edge.length));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(n, _)| n);
        }
        EdgeGraph { adjacency }
    }

    pub fn from_obj_str(text: &str) -> Result<IndexedMesh, MeshError> {
        load_obj(text.as_bytes())
    }

    /// Serializes as OBJ (`v`, `vt`, `f`) with 9 significant digits.
    pub fn to_obj_string(&self) -> String {
        let mut out = String::new();
        for p in &self.vertices {
            let _ = writeln!(
                out,
                "v {} {} {}",
                format_sig9(p.x),
                format_sig9(p.y),
                format_sig9(p.z)
            );
        }
        match &self.uv_corners {
            Some(uv) => {
                for c in uv {
                    let _ = writeln!(out, "vt {} {}", format_sig9(c[0]), format_sig9(c[1]));
                }
                for (t, tri) in self.triangles.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "f {}/{} {}/{} {}/{}",
                        tri[0] + 1,
                        3 * t + 1,
                        tri[1] + 1,
                        3 * t + 2,
                        tri[2] + 1,
                        3 * t + 3
                    );
                }
            }
            None => {
                for tri in &self.triangles {
                    let _ = writeln!(out, "f {} {} {}", tri[0] + 1, tri[1] + 1, tri[2] + 1);
                }
            }
        }
        out
    }
}

/// Recorded similarity transform `p -> (p - center) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub center: Vec3,
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self {
            center: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.center) * self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p / self.scale + self.center
    }
}

/// Undirected weighted graph over mesh vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGraph {
    /// Neighbor lists sorted by neighbor index.
    pub adjacency: Vec<Vec<(usize, f64)>>,
}

impl EdgeGraph {
    pub fn from_edges(nodes: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut adjacency = vec![Vec::new(); nodes];
        for &(a, b, w) in edges {
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(n, _)| n);
        }
        Self { adjacency }
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn arc_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adjacency[v]
    }
}

/// Formats like C's `%.9g`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim_zeros(mantissa.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Parses the supported OBJ subset. Polygons are fan-triangulated from their
/// first vertex. UV corners are kept only when every face references `vt`.
pub fn load_obj(reader: impl BufRead) -> Result<IndexedMesh, MeshError> {
    let mut positions: Vec<Vec3> = Vec::new();
    let mut texcoords: Vec<[f64; 2]> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let mut corner_uvs: Vec<[f64; 2]> = Vec::new();
    let mut all_faces_have_uv = true;
    let mut triangle_lines: Vec<usize> = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let keyword = fields.next().unwrap_or("");
        let parse_err = |message: String| MeshError::Parse {
            line: line_no,
            message,
        };
        match keyword {
            "v" => {
                let coords = parse_floats(fields, line_no)?;
                if coords.len() < 3 {
                    return Err(parse_err("vertex needs 3 coordinates".into()));
                }
                positions.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            "vt" => {
                let coords = parse_floats(fields, line_no)?;
                if coords.is_empty() {
                    return Err(parse_err("texture coordinate needs a value".into()));
                }
                texcoords.push([coords[0], coords.get(1).copied().unwrap_or(0.0)]);
            }
            "f" => {
                let mut refs = Vec::new();
                for token in fields {
                    let mut parts = token.split('/');
                    let v = parts.next().unwrap_or("");
                    let vt = parts.next().filter(|s| !s.is_empty());
                    let v = resolve_index(v, positions.len(), line_no)?;
                    let vt = vt
                        .map(|s| resolve_index(s, texcoords.len(), line_no))
                        .transpose()?;
                    refs.push((v, vt));
                }
                if refs.len() < 3 {
                    return Err(parse_err(format!(
                        "face needs at least 3 vertices, found {}",
                        refs.len()
                    )));
                }
                let face_has_uv = refs.iter().all(|r| r.1.is_some());
                all_faces_have_uv &= face_has_uv;
                for k in 1..refs.len() - 1 {
                    let corners = [refs[0], refs[k], refs[k + 1]];
                    let tri = [corners[0].0, corners[1].0, corners[2].0];
                    if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                        return Err(parse_err("face repeats a vertex index".into()));
                    }
                    triangles.push(tri);
                    triangle_lines.push(line_no);
                    if face_has_uv {
                        for c in corners {
                            corner_uvs.push(texcoords[c.1.expect("checked")]);
                        }
                    }
                }
            }
            // Normals, groups, objects, smoothing and material records carry
            // nothing this crate consumes.
            _ => {}
        }
    }

    let uv = (all_faces_have_uv && !triangles.is_empty()).then_some(corner_uvs);
    IndexedMesh::new(positions, triangles, uv)
}

fn parse_floats<'a>(
    fields: impl Iterator<Item = &'a str>,
    line: usize,
) -> Result<Vec<f64>, MeshError> {
    fields
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| MeshError::Parse {
                    line,
                    message: format!("invalid number '{f}'"),
                })
        })
        .collect()
}

/// Resolves a 1-based (or negative, relative) OBJ index.
fn resolve_index(token: &str, count: usize, line: usize) -> Result<usize, MeshError> {
    let index: i64 = token.parse().map_err(|_| MeshError::Parse {
        line,
        message: format!("invalid index '{token}'"),
    })?;
    let resolved = match index {
        0 => None,
        i if i > 0 => Some(i - 1),
        i => Some(count as i64 + i),
    };
    match resolved {
        Some(r) if r >= 0 && (r as usize) < count => Ok(r as usize),
        _ => Err(MeshError::IndexOutOfRange { line, index, count }),
    }
}
