//! Conditioning point clouds: a topology cloud drawn from mesh vertices and
//! edges, a geometry cloud drawn uniformly over the surface, and farthest-point
//! anchor selection.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mesh::{IndexedMesh, Vec3};

/// Point count per branch used at full scale.
pub const DEFAULT_POINTS: usize = 30_720;

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("anchor count {k} outside 1..={available}")]
    AnchorCount { k: usize, available: usize },
}

/// Where a topology sample came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TopoSource {
    Vertex(usize),
    /// Mesh edge index and the parameter along it, in `(0, 1)`.
    Edge(usize, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologySample {
    pub points: Vec<Vec3>,
    pub sources: Vec<TopoSource>,
    /// Set when fewer points than vertices were requested and the vertices were
    /// subsampled by farthest-point selection.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSample {
    pub points: Vec<Vec3>,
    /// Triangle index and barycentric coordinates per point.
    pub sources: Vec<(usize, [f64; 3])>,
}

/// All mesh vertices first, then points on edges chosen proportionally to edge
/// length and uniformly along the open edge interior.
pub fn sample_topology(mesh: &IndexedMesh, n: usize, seed: u64) -> Result<TopologySample, SampleError> {
    let vertices = mesh.vertices();
    if n < vertices.len() {
        log::warn!(
            "topology sample of {n} points is smaller than the {} mesh vertices; subsampling vertices",
            vertices.len()
        );
        let picked = if n == 0 {
            Vec::new()
        } else {
            fps_anchors(vertices, n)?
        };
        return Ok(TopologySample {
            points: picked.iter().map(|&i| vertices[i]).collect(),
            sources: picked.into_iter().map(TopoSource::Vertex).collect(),
            truncated: true,
        });
    }

    let mut points = vertices.to_vec();
    let mut sources: Vec<TopoSource> = (0..vertices.len()).map(TopoSource::Vertex).collect();
    let extra = n - vertices.len();
    if extra > 0 {
        let lengths: Vec<f64> = mesh.edges().iter().map(|e| e.length).collect();
        let chooser = WeightedIndex::new(&lengths).map_err(|_| {
            SampleError::Degenerate("mesh has no edge of positive length".into())
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..extra {
            let e = chooser.sample(&mut rng);
            let t = open_unit(&mut rng);
            let [a, b] = mesh.edges()[e].vertices;
            points.push(vertices[a] * (1.0 - t) + vertices[b] * t);
            sources.push(TopoSource::Edge(e, t));
        }
    }
    Ok(TopologySample {
        points,
        sources,
        truncated: false,
    })
}

fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let t: f64 = rng.random();
        if t > 0.0 {
            return t;
        }
    }
}

/// Area-weighted triangle choice with uniform barycentric sampling.
pub fn sample_surface(mesh: &IndexedMesh, n: usize, seed: u64) -> Result<SurfaceSample, SampleError> {
    let areas: Vec<f64> = (0..mesh.triangle_count()).map(|t| mesh.triangle_area(t)).collect();
    let chooser = WeightedIndex::new(&areas)
        .map_err(|_| SampleError::Degenerate("mesh has zero surface area".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut points = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    for _ in 0..n {
        let t = chooser.sample(&mut rng);
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        let bary = [1.0 - r1, r1 * (1.0 - r2), r1 * r2];
        let [a, b, c] = mesh.triangle_points(t);
        points.push(a * bary[0] + b * bary[1] + c * bary[2]);
        sources.push((t, bary));
    }
    Ok(SurfaceSample { points, sources })
}

/// Greedy maximin selection starting at index 0; ties go to the lowest index.
pub fn fps_anchors(points: &[Vec3], k: usize) -> Result<Vec<usize>, SampleError> {
    if k == 0 || k > points.len() {
        return Err(SampleError::AnchorCount {
            k,
            available: points.len(),
        });
    }
    let mut chosen = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut current = 0;
    for _ in 0..k {
        chosen.push(current);
        let origin = points[current];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            let d = (p - origin).norm_squared();
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best.0 {
                best = (nearest[i], i);
            }
        }
        current = best.1;
    }
    Ok(chosen)
}

/// Both conditioning clouds for one mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningClouds {
    pub topo_points: Vec<Vec3>,
    pub geom_points: Vec<Vec3>,
    pub seed: u64,
    pub topo_truncated: bool,
}

impl ConditioningClouds {
    pub fn sample(mesh: &IndexedMesh, n_topo: usize, n_geom: usize, seed: u64) -> Result<Self, SampleError> {
        let topo = sample_topology(mesh, n_topo, seed)?;
        let geom = sample_surface(mesh, n_geom, seed)?;
        Ok(Self {
            topo_points: topo.points,
            geom_points: geom.points,
            seed,
            topo_truncated: topo.truncated,
        })
    }
}

/// XYZ text: one `x y z` line per point.
pub fn to_xyz(points: &[Vec3]) -> String {
    let mut out = String::with_capacity(points.len() * 40);
    for p in points {
        let _ = writeln!(out, "{:?} {:?} {:?}", p.x, p.y, p.z);
    }
    out
}
