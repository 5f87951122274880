//! Preference pairs from scored candidate seam sets by strict dominance.

use serde::{Deserialize, Serialize};

use crate::eval::SeamMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    /// Strictly lower distortion and strictly fewer fragments.
    #[default]
    Joint,
    DistortionOnly,
    DensityOnly,
}

impl PairingMode {
    /// Whether `a` is preferred over `b`.
    pub fn prefers(self, a: &SeamMetrics, b: &SeamMetrics) -> bool {
        let distortion = a.distortion < b.distortion;
        let density = a.fragments < b.fragments;
        match self {
            PairingMode::Joint => distortion && density,
            PairingMode::DistortionOnly => distortion,
            PairingMode::DensityOnly => density,
        }
    }
}

impl std::str::FromStr for PairingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(PairingMode::Joint),
            "distortion-only" => Ok(PairingMode::DistortionOnly),
            "density-only" => Ok(PairingMode::DensityOnly),
            other => Err(format!(
                "unknown pairing mode {other:?} (expected joint, distortion-only or density-only)"
            )),
        }
    }
}

/// Candidate indices `(positive, negative)` of a preference pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairIndex {
    pub positive: usize,
    pub negative: usize,
}

/// All ordered pairs `(i, j)` with `i` preferred over `j`, in row-major order.
pub fn build_pairs(metrics: &[SeamMetrics], mode: PairingMode) -> Vec<PairIndex> {
    let mut pairs = Vec::new();
    for (i, a) in metrics.iter().enumerate() {
        for (j, b) in metrics.iter().enumerate() {
            if i != j && mode.prefers(a, b) {
                pairs.push(PairIndex {
                    positive: i,
                    negative: j,
                });
            }
        }
    }
    if pairs.is_empty() {
        log::info!("no preference pairs among {} candidates ({mode:?})", metrics.len());
    }
    pairs
}

/// One line of a preference dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub mesh: String,
    /// Seed and per-branch size of the conditioning clouds.
    pub seed: u64,
    pub points: usize,
    pub positive: usize,
    pub negative: usize,
    pub positive_metrics: SeamMetrics,
    pub negative_metrics: SeamMetrics,
    /// Seam text payloads.
    pub positive_seams: String,
    pub negative_seams: String,
}
