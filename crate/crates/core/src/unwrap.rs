//! Cutting a mesh along seam edges and least-squares conformal unwrapping of
//! each resulting island.
//!
//! Cutting duplicates a vertex once per corner fan ("wedge") delimited by seam
//! or boundary edges. Islands are the connected components of the face
//! adjacency graph restricted to non-seam edges. Each island is flattened by
//! minimizing the Cauchy-Riemann residual of the piecewise-linear map, with two
//! pinned vertices at `(0, 0)` and `(1, 0)`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, Matrix2, Vector2};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{IndexedMesh, Vec3};
use crate::project::SeamEdgeSet;
use crate::union_find::UnionFind;

/// Relative bound on the normal-equation residual of an island solve.
pub const SOLVER_TOLERANCE: f64 = 1e-8;

/// Triangles whose 3D area is below this fraction of the total are excluded
/// from metrics.
pub const DEGENERATE_AREA_FRACTION: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum UnwrapError {
    #[error("seam edge ({0}, {1}) is not a mesh edge")]
    UnknownSeamEdge(usize, usize),
    #[error("island {island} is degenerate: {reason}")]
    DegenerateIsland { island: usize, reason: String },
    #[error("island {island}: solver residual {residual:e} exceeds tolerance")]
    Residual { island: usize, residual: f64 },
    #[error("island {0} does not exist")]
    NoSuchIsland(usize),
}

/// Mesh with vertices duplicated along seams.
#[derive(Debug, Clone, PartialEq)]
pub struct CutMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// Original mesh vertex for each cut vertex.
    pub original: Vec<usize>,
    /// Island id per triangle, numbered by first appearance.
    pub island: Vec<usize>,
    pub island_count: usize,
}

impl CutMesh {
    pub fn island_triangles(&self, island: usize) -> Vec<usize> {
        (0..self.triangles.len())
            .filter(|&t| self.island[t] == island)
            .collect()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|v| self.vertices[v]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }
}

pub fn cut_mesh(mesh: &IndexedMesh, seams: &SeamEdgeSet) -> Result<CutMesh, UnwrapError> {
    for (a, b) in seams.edges() {
        if !mesh.has_edge(a, b) {
            return Err(UnwrapError::UnknownSeamEdge(a, b));
        }
    }
    let triangles = mesh.triangles();
    let corner = |t: usize, v: usize| -> usize {
        3 * t + triangles[t].iter().position(|&x| x == v).expect("vertex of triangle")
    };

    let mut corners = UnionFind::new(3 * triangles.len());
    let mut faces = UnionFind::new(triangles.len());
    for edge in mesh.edges() {
        let [a, b] = edge.vertices;
        if seams.contains(a, b) {
            continue;
        }
        let first = edge.faces[0];
        for &other in &edge.faces[1..] {
            faces.union(first, other);
            corners.union(corner(first, a), corner(other, a));
            corners.union(corner(first, b), corner(other, b));
        }
    }

    let (corner_labels, cut_count) = corners.labels();
    let mut original = vec![0; cut_count];
    let mut vertices = vec![Vec3::zeros(); cut_count];
    let cut_triangles: Vec<[usize; 3]> = (0..triangles.len())
        .map(|t| {
            let mut tri = [0; 3];
            for k in 0..3 {
                let id = corner_labels[3 * t + k];
                original[id] = triangles[t][k];
                vertices[id] = mesh.vertices()[triangles[t][k]];
                tri[k] = id;
            }
            tri
        })
        .collect();
    let (island, island_count) = faces.labels();
    Ok(CutMesh {
        vertices,
        triangles: cut_triangles,
        original,
        island,
        island_count,
    })
}

/// Coordinates of the triangle in an orthonormal frame of its own plane, with
/// the first corner at the origin and the first edge along +x. `None` for a
/// zero-area triangle.
fn local_frame(p: &[Vec3; 3]) -> Option<[Vector2<f64>; 3]> {
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let len = e1.norm();
    let normal = e1.cross(&e2);
    if len == 0.0 || normal.norm() == 0.0 || !normal.norm().is_finite() {
        return None;
    }
    let x = e1 / len;
    let y = normal.normalize().cross(&x);
    Some([
        Vector2::zeros(),
        Vector2::new(len, 0.0),
        Vector2::new(e2.dot(&x), e2.dot(&y)),
    ])
}

/// Singular values `(s1, s2)`, `s1 >= s2 >= 0`, of a 2x2 matrix in closed form.
pub fn singular_values_2x2(m: &Matrix2<f64>) -> (f64, f64) {
    let e = (m[(0, 0)] + m[(1, 1)]) * 0.5;
    let f = (m[(0, 0)] - m[(1, 1)]) * 0.5;
    let g = (m[(1, 0)] + m[(0, 1)]) * 0.5;
    let h = (m[(1, 0)] - m[(0, 1)]) * 0.5;
    let q = e.hypot(h);
    let r = f.hypot(g);
    (q + r, (q - r).abs())
}

/// Jacobian of the affine map from the triangle's local 3D frame to UV.
/// `None` when the 3D triangle has zero area.
pub fn deformation_gradient(p3d: &[Vec3; 3], p2d: &[[f64; 2]; 3]) -> Option<Matrix2<f64>> {
    let q = local_frame(p3d)?;
    let frame = Matrix2::from_columns(&[q[1] - q[0], q[2] - q[0]]);
    let uv = |k: usize| Vector2::new(p2d[k][0], p2d[k][1]);
    let image = Matrix2::from_columns(&[uv(1) - uv(0), uv(2) - uv(0)]);
    Some(image * frame.try_inverse()?)
}

/// Singular values of the deformation gradient, sorted descending. `None`
/// signals a zero-area 3D triangle, which metrics skip.
pub fn triangle_jacobian(p3d: &[Vec3; 3], p2d: &[[f64; 2]; 3]) -> Option<(f64, f64)> {
    deformation_gradient(p3d, p2d).map(|j| singular_values_2x2(&j))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IslandReport {
    pub triangles: usize,
    pub vertices: usize,
    /// Cut-vertex indices pinned to `(0, 0)` and `(1, 0)`.
    pub pins: [usize; 2],
    /// Third pin used for islands that are not topological disks.
    pub extra_pin: Option<usize>,
    pub non_disk: bool,
    /// Relative residual of the normal equations.
    pub residual: f64,
}

/// BFS hop distances over the island's cut-vertex graph.
fn bfs(adjacency: &[Vec<usize>], start: usize) -> (Vec<usize>, Vec<usize>) {
    let mut dist = vec![usize::MAX; adjacency.len()];
    let mut order = Vec::with_capacity(adjacency.len());
    let mut queue = VecDeque::from([start]);
    dist[start] = 0;
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &n in &adjacency[v] {
            if dist[n] == usize::MAX {
                dist[n] = dist[v] + 1;
                queue.push_back(n);
            }
        }
    }
    (dist, order)
}

fn farthest(dist: &[usize]) -> usize {
    let mut best = 0;
    for (i, &d) in dist.iter().enumerate() {
        if d != usize::MAX && d > dist[best] {
            best = i;
        }
    }
    best
}

/// Least-squares conformal parameterization of one island. Returns the UV of
/// every cut vertex in the island (other entries are left as `None`).
pub fn parameterize_island(
    cut: &CutMesh,
    island: usize,
) -> Result<(Vec<Option<[f64; 2]>>, IslandReport), UnwrapError> {
    if island >= cut.island_count {
        return Err(UnwrapError::NoSuchIsland(island));
    }
    let degenerate = |reason: &str| UnwrapError::DegenerateIsland {
        island,
        reason: reason.to_string(),
    };
    let tris = cut.island_triangles(island);

    // Local numbering of the island's cut vertices.
    let mut local = vec![usize::MAX; cut.vertices.len()];
    let mut globals = Vec::new();
    for &t in &tris {
        for &v in &cut.triangles[t] {
            if local[v] == usize::MAX {
                local[v] = globals.len();
                globals.push(v);
            }
        }
    }
    let n = globals.len();
    let mut adjacency = vec![Vec::new(); n];
    let mut edge_faces: std::collections::HashMap<(usize, usize), usize> = Default::default();
    for &t in &tris {
        let lt = cut.triangles[t].map(|v| local[v]);
        for k in 0..3 {
            let (a, b) = (lt[k], lt[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            let count = edge_faces.entry(key).or_insert(0);
            if *count == 0 {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
            *count += 1;
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }

    // Double-sweep pin choice.
    let (d0, _) = bfs(&adjacency, 0);
    let pin_a = farthest(&d0);
    let (da, _) = bfs(&adjacency, pin_a);
    // Copies of one vertex on both sides of a slit share a 3D position, so
    // the second pin skips them.
    let pa = cut.vertices[globals[pin_a]];
    let mut pin_b = pin_a;
    for (i, &d) in da.iter().enumerate() {
        if d != usize::MAX && (pin_b == pin_a || d > da[pin_b]) && cut.vertices[globals[i]] != pa {
            pin_b = i;
        }
    }
    if pin_a == pin_b {
        return Err(degenerate("island has a single distinct vertex position"));
    }
    let (db, order) = bfs(&adjacency, pin_b);

    let boundary_edges = edge_faces.values().filter(|&&c| c == 1).count();
    let euler = n as i64 - edge_faces.len() as i64 + tris.len() as i64;
    let non_disk = euler != 1 || boundary_edges == 0;
    if non_disk {
        log::warn!("island {island} is not a topological disk (euler {euler}); adding a pin");
    }

    let pb = cut.vertices[globals[pin_b]];
    let span = (pb - pa).norm();
    if !(span > 0.0) {
        return Err(degenerate("pinned vertices coincide in 3D"));
    }
    let mut pinned: Vec<(usize, [f64; 2])> = vec![(pin_a, [0.0, 0.0]), (pin_b, [1.0, 0.0])];
    let mut extra_pin = None;
    if non_disk {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            if i == pin_a || i == pin_b || da[i] == usize::MAX {
                continue;
            }
            let score = da[i].min(db[i]);
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, i));
            }
        }
        if let Some((_, c)) = best {
            // Place the third pin so the pinned triangle keeps its 3D shape.
            let axis = (pb - pa) / span;
            let offset = cut.vertices[globals[c]] - pa;
            let along = offset.dot(&axis);
            let across = (offset - axis * along).norm();
            if across > 0.0 {
                pinned.push((c, [along / span, across / span]));
                extra_pin = Some(globals[c]);
            }
        }
    }

    // Unknown numbering follows the BFS order from the second pin, which keeps
    // the normal matrix banded.
    let mut slot = vec![usize::MAX; n];
    let mut pin_value = vec![None; n];
    for &(v, uv) in &pinned {
        pin_value[v] = Some(uv);
    }
    let mut free = 0;
    for &v in &order {
        if pin_value[v].is_none() {
            slot[v] = free;
            free += 1;
        }
    }
    if order.len() != n {
        return Err(degenerate("island vertex graph is disconnected"));
    }
    let unknowns = 2 * free;

    let total_area: f64 = tris.iter().map(|&t| cut.triangle_area(t)).sum();
    if !(total_area > 0.0) {
        return Err(degenerate("island has zero area"));
    }

    let mut normal = CooMatrix::new(unknowns, unknowns);
    let mut rhs = DMatrix::<f64>::zeros(unknowns, 1);
    // Least-squares rows are accumulated straight into the normal equations.
    let mut row_entries: Vec<(usize, f64)> = Vec::with_capacity(6);
    for &t in &tris {
        let p = cut.triangles[t].map(|v| cut.vertices[v]);
        let Some(q) = local_frame(&p) else { continue };
        let area = 0.5 * ((q[1].x - q[0].x) * (q[2].y - q[0].y) - (q[2].x - q[0].x) * (q[1].y - q[0].y));
        if area <= DEGENERATE_AREA_FRACTION * total_area {
            continue;
        }
        let w = area.sqrt();
        // Gradient of the barycentric basis function of corner j.
        let grad = |j: usize| -> Vector2<f64> {
            let e = q[(j + 2) % 3] - q[(j + 1) % 3];
            Vector2::new(-e.y, e.x) / (2.0 * area)
        };
        let lt = cut.triangles[t].map(|v| local[v]);
        // Row 1: u_x - v_y; row 2: u_y + v_x.
        for row in 0..2 {
            row_entries.clear();
            let mut constant = 0.0;
            for j in 0..3 {
                let g = grad(j);
                let (cu, cv) = if row == 0 { (g.x, -g.y) } else { (g.y, g.x) };
                let v = lt[j];
                match pin_value[v] {
                    Some(uv) => constant += w * (cu * uv[0] + cv * uv[1]),
                    None => {
                        row_entries.push((2 * slot[v], w * cu));
                        row_entries.push((2 * slot[v] + 1, w * cv));
                    }
                }
            }
            for &(i, a) in &row_entries {
                rhs[i] -= a * constant;
                for &(j, b) in &row_entries {
                    normal.push(i, j, a * b);
                }
            }
        }
    }

    let mut uv = vec![None; cut.vertices.len()];
    let mut residual = 0.0;
    if unknowns > 0 {
        let normal = CscMatrix::from(&normal);
        let cholesky = CscCholesky::factor(&normal)
            .map_err(|_| degenerate("normal equations are singular"))?;
        let mut solution = cholesky.solve(&rhs);
        residual = relative_residual(&normal, &solution, &rhs);
        // One step of iterative refinement when the direct solve drifted.
        if residual > SOLVER_TOLERANCE * 1e-3 {
            let r = &rhs - spmv(&normal, &solution);
            solution += cholesky.solve(&r);
            residual = relative_residual(&normal, &solution, &rhs);
        }
        if !(residual <= SOLVER_TOLERANCE) {
            return Err(UnwrapError::Residual { island, residual });
        }
        for v in 0..n {
            if let Some(s) = (slot[v] != usize::MAX).then_some(slot[v]) {
                uv[globals[v]] = Some([solution[2 * s], solution[2 * s + 1]]);
            }
        }
    }
    for &(v, value) in &pinned {
        uv[globals[v]] = Some(value);
    }

    Ok((
        uv,
        IslandReport {
            triangles: tris.len(),
            vertices: n,
            pins: [globals[pin_a], globals[pin_b]],
            extra_pin,
            non_disk,
            residual,
        },
    ))
}

fn spmv(m: &CscMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(m.nrows(), 1);
    for (i, j, v) in m.triplet_iter() {
        y[i] += v * x[j];
    }
    y
}

fn relative_residual(m: &CscMatrix<f64>, x: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let r = (b - spmv(m, x)).norm();
    let scale = b.norm();
    if scale > 0.0 {
        r / scale
    } else {
        r
    }
}

/// Cut mesh with per-vertex UVs and per-triangle deformation data.
#[derive(Debug, Clone)]
pub struct UvAtlas {
    pub cut: CutMesh,
    pub uv: Vec<[f64; 2]>,
    /// `(s1, s2)` per triangle; `None` for triangles excluded as degenerate.
    pub sigma: Vec<Option<(f64, f64)>>,
    /// 3D area per triangle.
    pub area: Vec<f64>,
    pub islands: Vec<IslandReport>,
}

impl UvAtlas {
    /// Builds the per-triangle deformation data for given UVs of a cut mesh.
    pub fn from_parts(cut: CutMesh, uv: Vec<[f64; 2]>, islands: Vec<IslandReport>) -> Self {
        let area: Vec<f64> = (0..cut.triangles.len()).map(|t| cut.triangle_area(t)).collect();
        let total: f64 = area.iter().sum();
        let sigma = (0..cut.triangles.len())
            .map(|t| {
                if area[t] < DEGENERATE_AREA_FRACTION * total {
                    return None;
                }
                let p3 = cut.triangles[t].map(|v| cut.vertices[v]);
                let p2 = cut.triangles[t].map(|v| uv[v]);
                triangle_jacobian(&p3, &p2)
            })
            .collect();
        Self {
            cut,
            uv,
            sigma,
            area,
            islands,
        }
    }

    pub fn island_count(&self) -> usize {
        self.cut.island_count
    }

    pub fn excluded_triangles(&self) -> usize {
        self.sigma.iter().filter(|s| s.is_none()).count()
    }

    pub fn triangle_uv(&self, t: usize) -> [[f64; 2]; 3] {
        self.cut.triangles[t].map(|v| self.uv[v])
    }

    /// UVs with every island rescaled to its 3D area and packed on shelves
    /// into the unit square. Only for export; metrics use the raw solve.
    pub fn layout_uvs(&self) -> Vec<[f64; 2]> {
        let islands = self.island_count();
        let mut lo = vec![[f64::INFINITY; 2]; islands];
        let mut hi = vec![[f64::NEG_INFINITY; 2]; islands];
        let mut area3 = vec![0.0; islands];
        let mut area2 = vec![0.0; islands];
        for (t, tri) in self.cut.triangles.iter().enumerate() {
            let i = self.cut.island[t];
            area3[i] += self.area[t];
            let [a, b, c] = tri.map(|v| self.uv[v]);
            area2[i] += 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs();
            for p in [a, b, c] {
                for k in 0..2 {
                    lo[i][k] = lo[i][k].min(p[k]);
                    hi[i][k] = hi[i][k].max(p[k]);
                }
            }
        }
        let scale: Vec<f64> = (0..islands)
            .map(|i| if area2[i] > 0.0 { (area3[i] / area2[i]).sqrt() } else { 1.0 })
            .collect();
        let size: Vec<[f64; 2]> = (0..islands)
            .map(|i| [(hi[i][0] - lo[i][0]) * scale[i], (hi[i][1] - lo[i][1]) * scale[i]])
            .collect();
        let total: f64 = size.iter().map(|s| s[0] * s[1]).sum::<f64>().max(f64::MIN_POSITIVE);
        let row_width = total.sqrt() * 1.5;
        let gap = row_width * 0.01;
        let mut origin = vec![[0.0; 2]; islands];
        let (mut x, mut y, mut row_height, mut max_x) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for i in 0..islands {
            if x > 0.0 && x + size[i][0] > row_width {
                x = 0.0;
                y += row_height + gap;
                row_height = 0.0;
            }
            origin[i] = [x, y];
            x += size[i][0] + gap;
            max_x = max_x.max(x);
            row_height = row_height.max(size[i][1]);
        }
        let extent = max_x.max(y + row_height).max(f64::MIN_POSITIVE);
        let mut island_of_vertex = vec![0; self.uv.len()];
        for (t, tri) in self.cut.triangles.iter().enumerate() {
            for &v in tri {
                island_of_vertex[v] = self.cut.island[t];
            }
        }
        self.uv
            .iter()
            .enumerate()
            .map(|(v, p)| {
                let i = island_of_vertex[v];
                [
                    (origin[i][0] + (p[0] - lo[i][0]) * scale[i]) / extent,
                    (origin[i][1] + (p[1] - lo[i][1]) * scale[i]) / extent,
                ]
            })
            .collect()
    }

    /// OBJ with the original positions, one `vt` per cut vertex (laid out)
    /// and `f v/vt` faces.
    pub fn to_obj_string(&self, mesh: &IndexedMesh) -> String {
        use crate::mesh::format_sig9;
        use std::fmt::Write as _;
        let mut out = String::new();
        for p in mesh.vertices() {
            let _ = writeln!(out, "v {} {} {}", format_sig9(p.x), format_sig9(p.y), format_sig9(p.z));
        }
        for p in self.layout_uvs() {
            let _ = writeln!(out, "vt {} {}", format_sig9(p[0]), format_sig9(p[1]));
        }
        for tri in &self.cut.triangles {
            let _ = write!(out, "f");
            for &v in tri {
                let _ = write!(out, " {}/{}", self.cut.original[v] + 1, v + 1);
            }
            out.push('\n');
        }
        out
    }
}

/// Cuts along `seams` and flattens every island.
pub fn unwrap(mesh: &IndexedMesh, seams: &SeamEdgeSet) -> Result<UvAtlas, UnwrapError> {
    let cut = cut_mesh(mesh, seams)?;
    let solved: Vec<_> = (0..cut.island_count)
        .into_par_iter()
        .map(|i| parameterize_island(&cut, i))
        .collect::<Result<_, _>>()?;
    let mut uv = vec![[0.0; 2]; cut.vertices.len()];
    let mut islands = Vec::with_capacity(solved.len());
    for (coords, report) in solved {
        for (v, c) in coords.into_iter().enumerate() {
            if let Some(c) = c {
                uv[v] = c;
            }
        }
        islands.push(report);
    }
    Ok(UvAtlas::from_parts(cut, uv, islands))
}
