//! Candidate generation, scoring and preference-pair assembly around the toy
//! model, plus a small synthetic corpus with reference seams.

use rayon::prelude::*;
use thiserror::Error;

use seamkit::eval::{evaluate, EvalError, SeamMetrics};
use seamkit::mesh::IndexedMesh;
use seamkit::prefs::{build_pairs, PairIndex, PairingMode};
use seamkit::project::SeamEdgeSet;
use seamkit::sampler::{ConditioningClouds, SampleError};
use seamkit::shapes;
use seamkit::token::{decode, tokenize, SeamSet, Segment, TokenError, TokenSequence};

use crate::dpo::DpoPair;
use crate::model::{encode_condition, Condition, ModelError};
use crate::params::ParamStore;
use crate::sample::{sample, SampleConfig, Sampled};
use crate::train::Example;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("mesh normalization failed: {0}")]
    Normalize(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Token(#[from] TokenError),
}

/// Dihedral limit for reference seams: box and prism corners are sharp, the
/// facets of a coarse cylinder side are not.
pub const SHARP_ANGLE_DEG: f64 = 80.0;

/// Sharp edges of a mesh: interior edges whose face normals differ by at
/// least `min_angle_deg`, plus every boundary edge.
pub fn sharp_edges(mesh: &IndexedMesh, min_angle_deg: f64) -> SeamEdgeSet {
    let normal = |t: usize| {
        let [a, b, c] = mesh.triangle_points(t);
        (b - a).cross(&(c - a)).normalize()
    };
    let cos_limit = min_angle_deg.to_radians().cos();
    SeamEdgeSet::from_pairs(mesh.edges().iter().filter_map(|e| {
        let sharp = match e.faces.as_slice() {
            [f, g] => normal(*f).dot(&normal(*g)) <= cos_limit,
            _ => true,
        };
        sharp.then_some((e.vertices[0], e.vertices[1]))
    }))
}

/// One segment per seam edge, canonicalized.
pub fn edges_to_seams(mesh: &IndexedMesh, edges: &SeamEdgeSet) -> Result<SeamSet, TokenError> {
    let v = mesh.vertices();
    SeamSet::new(edges.edges().map(|(a, b)| Segment::new(v[a], v[b])).collect()).canonicalize()
}

/// A normalized mesh with reference seams.
#[derive(Debug, Clone)]
pub struct CorpusMesh {
    pub name: String,
    pub mesh: IndexedMesh,
    pub seams: SeamSet,
}

impl CorpusMesh {
    /// Normalizes `mesh` and takes its sharp edges as the reference seams.
    pub fn from_sharp_edges(name: impl Into<String>, mesh: &IndexedMesh) -> Result<Self, PipelineError> {
        let (mesh, _) = mesh.normalize().map_err(|e| PipelineError::Normalize(e.to_string()))?;
        let seams = edges_to_seams(&mesh, &sharp_edges(&mesh, SHARP_ANGLE_DEG))?;
        Ok(Self {
            name: name.into(),
            mesh,
            seams,
        })
    }
}

/// Cubes, capped cylinders and L-shaped extrusions at a few proportions.
pub fn synthetic_corpus() -> Vec<CorpusMesh> {
    let meshes = [
        ("cube", shapes::cube(1)),
        ("box", shapes::cube(1).map_vertices(|p| seamkit::Vec3::new(p.x, 0.5 * p.y, 0.8 * p.z))),
        ("cylinder6", shapes::cylinder(6, 1, 0.4, 1.0, true)),
        ("cylinder5", shapes::cylinder(5, 1, 0.5, 0.6, true)),
        ("l_thin", shapes::l_extrusion(0.35, 0.4, 1)),
        ("l_wide", shapes::l_extrusion(0.55, 0.8, 1)),
    ];
    meshes
        .iter()
        .map(|(name, m)| CorpusMesh::from_sharp_edges(*name, m).expect("synthetic meshes are valid"))
        .collect()
}

/// Conditioning clouds of `n_points` each, prepared for a model with `l`
/// tokens per branch.
pub fn condition_for(mesh: &IndexedMesh, n_points: usize, l: usize, seed: u64) -> Result<Condition, PipelineError> {
    let clouds = ConditioningClouds::sample(mesh, n_points, n_points, seed)?;
    Ok(Condition::prepare(&clouds, l)?)
}

/// Next-token training examples for the corpus.
pub fn corpus_examples(corpus: &[CorpusMesh], n_points: usize, l: usize, seed: u64) -> Result<Vec<Example>, PipelineError> {
    corpus
        .iter()
        .map(|c| {
            Ok(Example {
                condition: condition_for(&c.mesh, n_points, l, seed)?,
                tokens: tokenize(&c.seams)?,
            })
        })
        .collect()
}

/// One sampled seam set and its score.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub seed: u64,
    pub sampled: Sampled,
    /// Decoded, canonical seams.
    pub seams: SeamSet,
    /// Canonical token sequence of `seams`, the form used for training.
    pub tokens: TokenSequence,
    pub metrics: Result<SeamMetrics, String>,
}

/// Samples `count` candidates with seeds `base_seed..base_seed + count` and
/// evaluates each on `mesh`. Candidates whose evaluation fails keep the error
/// and are left out of pairing.
pub fn generate_candidates(
    params: &ParamStore,
    mesh: &IndexedMesh,
    condition: &Condition,
    count: usize,
    base_seed: u64,
    config: &SampleConfig,
) -> Result<Vec<Candidate>, PipelineError> {
    let cond = encode_condition(params, condition);
    (0..count as u64)
        .into_par_iter()
        .map(|k| {
            let seed = base_seed + k;
            let sampled = sample(params, &cond, &SampleConfig { seed, ..*config })?;
            let seams = decode(&sampled.tokens)?;
            let tokens = tokenize(&seams)?;
            let metrics = evaluate(mesh, &seams)
                .map(|e| e.metrics)
                .map_err(|e: EvalError| format!("{} stage: {e}", e.stage()));
            Ok(Candidate {
                seed,
                sampled,
                seams,
                tokens,
                metrics,
            })
        })
        .collect()
}

/// Preference pairs among successfully evaluated candidates, as indices into
/// `candidates`.
pub fn candidate_pairs(candidates: &[Candidate], mode: PairingMode) -> Vec<PairIndex> {
    let scored: Vec<(usize, SeamMetrics)> = candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.metrics.as_ref().ok().map(|m| (i, *m)))
        .collect();
    let metrics: Vec<SeamMetrics> = scored.iter().map(|s| s.1).collect();
    build_pairs(&metrics, mode)
        .into_iter()
        .map(|p| PairIndex {
            positive: scored[p.positive].0,
            negative: scored[p.negative].0,
        })
        .collect()
}

pub fn dpo_pairs(condition: &Condition, candidates: &[Candidate], pairs: &[PairIndex]) -> Vec<DpoPair> {
    pairs
        .iter()
        .map(|p| DpoPair {
            condition: condition.clone(),
            positive: candidates[p.positive].tokens.clone(),
            negative: candidates[p.negative].tokens.clone(),
        })
        .collect()
}
