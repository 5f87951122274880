//! Procedural test shapes: grids, cubes, cylinders, L-shaped extrusions and
//! spheres. All are consistently oriented (outward normals for closed shapes).

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::mesh::{IndexedMesh, Vec3};

/// Planar `nx` x `ny` grid of unit cells' worth of `[0, 1]^2` in the z = 0 plane.
/// Vertex `(i, j)` has index `j * (nx + 1) + i`.
pub fn grid(nx: usize, ny: usize) -> IndexedMesh {
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push(Vec3::new(i as f64 / nx as f64, j as f64 / ny as f64, 0.0));
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    IndexedMesh::new(vertices, triangles, None).expect("valid grid")
}

pub fn tetrahedron() -> IndexedMesh {
    let vertices = vec![
        Vec3::new(1.0, 1.0, 1.0),
        Vec3::new(1.0, -1.0, -1.0),
        Vec3::new(-1.0, 1.0, -1.0),
        Vec3::new(-1.0, -1.0, 1.0),
    ];
    let triangles = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    IndexedMesh::new(vertices, triangles, None).expect("valid tetrahedron")
}

/// Faces of the unit cube as (origin, u axis, v axis) in integer lattice units,
/// oriented so `u x v` points outward.
const CUBE_FACES: [([i64; 3], [i64; 3], [i64; 3]); 6] = [
    ([1, 0, 0], [0, 1, 0], [0, 0, 1]),
    ([0, 0, 0], [0, 0, 1], [0, 1, 0]),
    ([0, 1, 0], [0, 0, 1], [1, 0, 0]),
    ([0, 0, 0], [1, 0, 0], [0, 0, 1]),
    ([0, 0, 1], [1, 0, 0], [0, 1, 0]),
    ([0, 0, 0], [0, 1, 0], [1, 0, 0]),
];

fn cube_impl(n: usize, textured: bool) -> IndexedMesh {
    let n = n.max(1);
    let mut lookup: HashMap<[i64; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut uv = Vec::new();
    let ni = n as i64;
    for (f, (origin, du, dv)) in CUBE_FACES.iter().enumerate() {
        let mut vertex = |i: i64, j: i64| -> usize {
            let key = [0, 1, 2].map(|a| origin[a] * ni + du[a] * i + dv[a] * j);
            *lookup.entry(key).or_insert_with(|| {
                vertices.push(Vec3::new(
                    key[0] as f64 / n as f64 - 0.5,
                    key[1] as f64 / n as f64 - 0.5,
                    key[2] as f64 / n as f64 - 0.5,
                ));
                vertices.len() - 1
            })
        };
        let cell = [(f % 3) as f64, (f / 3) as f64];
        let face_uv = |i: i64, j: i64| {
            [
                (cell[0] + 0.05 + 0.9 * i as f64 / n as f64) / 3.0,
                (cell[1] + 0.05 + 0.9 * j as f64 / n as f64) / 2.0,
            ]
        };
        for j in 0..ni {
            for i in 0..ni {
                let quad = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
                let ids = quad.map(|(a, b)| vertex(a, b));
                for tri in [[0, 1, 2], [0, 2, 3]] {
                    triangles.push(tri.map(|k| ids[k]));
                    if textured {
                        for k in tri {
                            uv.push(face_uv(quad[k].0, quad[k].1));
                        }
                    }
                }
            }
        }
    }
    IndexedMesh::new(vertices, triangles, textured.then_some(uv)).expect("valid cube")
}

/// Closed cube `[-0.5, 0.5]^3`, each face an `n` x `n` grid.
pub fn cube(n: usize) -> IndexedMesh {
    cube_impl(n, false)
}

/// [`cube`] with one UV island per face.
pub fn textured_cube(n: usize) -> IndexedMesh {
    cube_impl(n, true)
}

/// Cylinder around the y axis with `radial` segments and `rings` height
/// segments. Vertex `(i, j)` (angle `i`, ring `j`) has index `j * radial + i`;
/// caps, when requested, add one center vertex per end.
pub fn cylinder(radial: usize, rings: usize, radius: f64, height: f64, capped: bool) -> IndexedMesh {
    let mut vertices = Vec::new();
    for j in 0..=rings {
        let y = height * (j as f64 / rings as f64 - 0.5);
        for i in 0..radial {
            let a = 2.0 * PI * i as f64 / radial as f64;
            vertices.push(Vec3::new(radius * a.cos(), y, -radius * a.sin()));
        }
    }
    let idx = |i: usize, j: usize| j * radial + (i % radial);
    let mut triangles = Vec::new();
    for j in 0..rings {
        for i in 0..radial {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    if capped {
        let bottom = vertices.len();
        vertices.push(Vec3::new(0.0, -height / 2.0, 0.0));
        let top = vertices.len();
        vertices.push(Vec3::new(0.0, height / 2.0, 0.0));
        for i in 0..radial {
            triangles.push([bottom, idx(i + 1, 0), idx(i, 0)]);
            triangles.push([top, idx(i, rings), idx(i + 1, rings)]);
        }
    }
    IndexedMesh::new(vertices, triangles, None).expect("valid cylinder")
}

/// Closed L-shaped prism: the L outline in the xz plane extruded along y.
/// `arm` is the arm width relative to the unit outer size.
pub fn l_extrusion(arm: f64, height: f64, rings: usize) -> IndexedMesh {
    let outline = [
        (0.0, 0.0),
        (1.0, 0.0),
        (1.0, arm),
        (arm, arm),
        (arm, 1.0),
        (0.0, 1.0),
    ];
    let cap_tris = [[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5]];
    let m = outline.len();
    let mut vertices = Vec::new();
    for j in 0..=rings {
        let y = height * j as f64 / rings as f64;
        for &(x, z) in &outline {
            vertices.push(Vec3::new(x, y, -z));
        }
    }
    let idx = |i: usize, j: usize| j * m + (i % m);
    let mut triangles = Vec::new();
    for j in 0..rings {
        for i in 0..m {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    for t in cap_tris {
        triangles.push([idx(t[0], 0), idx(t[2], 0), idx(t[1], 0)]);
        triangles.push([idx(t[0], rings), idx(t[1], rings), idx(t[2], rings)]);
    }
    IndexedMesh::new(vertices, triangles, None).expect("valid extrusion")
}

/// Latitude/longitude sphere of radius 0.5 with single pole vertices.
pub fn uv_sphere(stacks: usize, slices: usize) -> IndexedMesh {
    let mut vertices = vec![Vec3::new(0.0, 0.5, 0.0)];
    for s in 1..stacks {
        let phi = PI * s as f64 / stacks as f64;
        for k in 0..slices {
            let theta = 2.0 * PI * k as f64 / slices as f64;
            vertices.push(0.5 * Vec3::new(phi.sin() * theta.cos(), phi.cos(), -phi.sin() * theta.sin()));
        }
    }
    let south = vertices.len();
    vertices.push(Vec3::new(0.0, -0.5, 0.0));
    let ring = |s: usize, k: usize| 1 + (s - 1) * slices + (k % slices);
    let mut triangles = Vec::new();
    for k in 0..slices {
        triangles.push([0, ring(1, k), ring(1, k + 1)]);
        triangles.push([south, ring(stacks - 1, k + 1), ring(stacks - 1, k)]);
    }
    for s in 1..stacks - 1 {
        for k in 0..slices {
            triangles.push([ring(s, k), ring(s + 1, k), ring(s + 1, k + 1)]);
            triangles.push([ring(s, k), ring(s + 1, k + 1), ring(s, k + 1)]);
        }
    }
    IndexedMesh::new(vertices, triangles, None).expect("valid sphere")
}
