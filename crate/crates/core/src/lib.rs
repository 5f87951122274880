//! Mesh seam pipeline: OBJ meshes, seam tokenization, conditioning point
//! clouds, seam projection, cutting with conformal unwrapping, seam metrics
//! and preference-pair construction.

pub mod eval;
pub mod mesh;
pub mod prefs;
pub mod project;
pub mod sampler;
pub mod shapes;
pub mod token;
pub mod union_find;
pub mod unwrap;

pub use eval::{evaluate, evaluate_edges, SeamMetrics};
pub use mesh::{load_obj, IndexedMesh, Vec3};
pub use project::{project_seams, SeamEdgeSet};
pub use token::{decode, encode, tokenize, SeamSet, TokenSequence};
pub use unwrap::{cut_mesh, unwrap, UvAtlas};
