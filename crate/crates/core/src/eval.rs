//! Seam quality metrics: area-weighted conformal distortion, island count and
//! pipeline runtime.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{IndexedMesh, MeshError};
use crate::project::{project_seams, ProjectError, SeamEdgeSet, SkippedSegment};
use crate::token::SeamSet;
use crate::unwrap::{unwrap, UnwrapError, UvAtlas};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeamMetrics {
    pub distortion: f64,
    pub fragments: usize,
    pub runtime_s: f64,
    pub excluded_triangles: usize,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("normalize: {0}")]
    Normalize(MeshError),
    #[error("project: {0}")]
    Project(ProjectError),
    #[error("unwrap: {0}")]
    Unwrap(UnwrapError),
    #[error("metrics: every triangle is degenerate, distortion is undefined")]
    UndefinedMetric,
}

impl EvalError {
    pub fn stage(&self) -> &'static str {
        match self {
            EvalError::Normalize(_) => "normalize",
            EvalError::Project(_) => "project",
            EvalError::Unwrap(_) => "unwrap",
            EvalError::UndefinedMetric => "metrics",
        }
    }
}

/// Per-triangle term `|s1^2 - s2^2|`.
pub fn conformal_term(sigma: (f64, f64)) -> f64 {
    (sigma.0 * sigma.0 - sigma.1 * sigma.1).abs()
}

/// Area-weighted mean of the conformal term over `(area, sigma)` pairs, with
/// `None` marking excluded triangles. Summed in input order.
pub fn weighted_distortion<I>(terms: I) -> Result<f64, EvalError>
where
    I: IntoIterator<Item = (f64, Option<(f64, f64)>)>,
{
    let (mut weighted, mut total) = (0.0, 0.0);
    for (area, sigma) in terms {
        if let Some(s) = sigma {
            weighted += area * conformal_term(s);
            total += area;
        }
    }
    if total > 0.0 {
        Ok(weighted / total)
    } else {
        Err(EvalError::UndefinedMetric)
    }
}

pub fn distortion(atlas: &UvAtlas) -> Result<f64, EvalError> {
    weighted_distortion(atlas.area.iter().copied().zip(atlas.sigma.iter().copied()))
}

pub fn fragmentation(atlas: &UvAtlas) -> usize {
    atlas.island_count()
}

/// Output of a full evaluation, keeping the intermediate products.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: SeamMetrics,
    pub atlas: UvAtlas,
    pub edges: SeamEdgeSet,
    pub skipped: Vec<SkippedSegment>,
}

/// Normalizes the mesh, projects `seams` (canonical-cube coordinates) onto it,
/// cuts, unwraps and measures. `runtime_s` covers projection through
/// parameterization.
pub fn evaluate(mesh: &IndexedMesh, seams: &SeamSet) -> Result<Evaluation, EvalError> {
    let (normalized, _) = mesh.normalize().map_err(EvalError::Normalize)?;
    let start = Instant::now();
    let projection = project_seams(&normalized, seams).map_err(EvalError::Project)?;
    let atlas = unwrap(&normalized, &projection.edges).map_err(EvalError::Unwrap)?;
    let runtime_s = start.elapsed().as_secs_f64();
    finish(atlas, projection.edges, projection.skipped, runtime_s)
}

/// Same as [`evaluate`] for seams already given as mesh edges.
pub fn evaluate_edges(mesh: &IndexedMesh, edges: &SeamEdgeSet) -> Result<Evaluation, EvalError> {
    let (normalized, _) = mesh.normalize().map_err(EvalError::Normalize)?;
    let start = Instant::now();
    let atlas = unwrap(&normalized, edges).map_err(EvalError::Unwrap)?;
    let runtime_s = start.elapsed().as_secs_f64();
    finish(atlas, edges.clone(), Vec::new(), runtime_s)
}

fn finish(
    atlas: UvAtlas,
    edges: SeamEdgeSet,
    skipped: Vec<SkippedSegment>,
    runtime_s: f64,
) -> Result<Evaluation, EvalError> {
    let metrics = SeamMetrics {
        distortion: distortion(&atlas)?,
        fragments: fragmentation(&atlas),
        runtime_s,
        excluded_triangles: atlas.excluded_triangles(),
    };
    Ok(Evaluation {
        metrics,
        atlas,
        edges,
        skipped,
    })
}

/// Mean of per-mesh values, for dataset-level reporting.
pub fn dataset_mean(metrics: &[SeamMetrics]) -> Option<(f64, f64)> {
    if metrics.is_empty() {
        return None;
    }
    let n = metrics.len() as f64;
    Some((
        metrics.iter().map(|m| m.distortion).sum::<f64>() / n,
        metrics.iter().map(|m| m.fragments as f64).sum::<f64>() / n,
    ))
}

const SVG_SIZE: f64 = 1024.0;
const RAMP_LOW: [f64; 3] = [255.0, 250.0, 220.0];
const RAMP_HIGH: [f64; 3] = [255.0, 215.0, 0.0];

/// Atlas drawing: each triangle filled on a light-to-bright-yellow ramp by its
/// conformal term, clipped at the 95th percentile. Excluded triangles are grey.
pub fn atlas_svg(atlas: &UvAtlas) -> String {
    let uv = atlas.layout_uvs();
    let terms: Vec<Option<f64>> = atlas.sigma.iter().map(|s| s.map(conformal_term)).collect();
    let mut sorted: Vec<f64> = terms.iter().flatten().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let clip = if sorted.is_empty() {
        0.0
    } else {
        sorted[((sorted.len() - 1) as f64 * 0.95).round() as usize]
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#202020"/>"##);
    for (t, tri) in atlas.cut.triangles.iter().enumerate() {
        let fill = match terms[t] {
            None => "#808080".to_string(),
            Some(v) => {
                let x = if clip > 0.0 { (v / clip).min(1.0) } else { 0.0 };
                let c: Vec<u8> = (0..3)
                    .map(|k| (RAMP_LOW[k] + (RAMP_HIGH[k] - RAMP_LOW[k]) * x).round() as u8)
                    .collect();
                format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
            }
        };
        let points: Vec<String> = tri
            .iter()
            .map(|&v| format!("{:.3},{:.3}", uv[v][0] * SVG_SIZE, (1.0 - uv[v][1]) * SVG_SIZE))
            .collect();
        let _ = writeln!(
            out,
            r#"<polygon points="{}" fill="{fill}" stroke="{fill}" stroke-width="0.3"/>"#,
            points.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}
