use serde::{Deserialize, Serialize};

use seamkit::token::VOCAB_SIZE;

pub const COORD_FACTOR: usize = 3;
pub const ENDPOINT_FACTOR: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Condition tokens per encoder branch.
    pub l: usize,
    /// Token width.
    pub d: usize,
    /// Decoder transformer layers; every fourth one cross-attends.
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ffn_mult: usize,
    pub coord_factor: usize,
    pub endpoint_factor: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Sampling cap in segments.
    pub max_segments: usize,
    /// Keeps the geometry encoder fixed during training.
    pub freeze_geometry: bool,
}

impl ModelConfig {
    /// Default small configuration.
    pub fn desk() -> Self {
        Self {
            l: 32,
            d: 64,
            layers: 8,
            heads: 2,
            ffn_mult: 4,
            coord_factor: COORD_FACTOR,
            endpoint_factor: ENDPOINT_FACTOR,
            vocab: VOCAB_SIZE,
            seed: 0,
            max_segments: 512,
            freeze_geometry: false,
        }
    }

    /// Full-size dimensions. Representable, not trained here.
    pub fn full_scale() -> Self {
        Self {
            l: 3072,
            d: 1024,
            layers: 24,
            heads: 16,
            ..Self::desk()
        }
    }

    /// Very small configuration for gradient checks.
    pub fn tiny() -> Self {
        Self {
            l: 4,
            d: 8,
            layers: 4,
            heads: 2,
            ffn_mult: 2,
            max_segments: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if self.coord_factor != COORD_FACTOR || self.endpoint_factor != ENDPOINT_FACTOR {
            problems.push(format!(
                "resampling factors must be {COORD_FACTOR} and {ENDPOINT_FACTOR}"
            ));
        }
        if self.vocab != VOCAB_SIZE {
            problems.push(format!("vocabulary must be {VOCAB_SIZE}"));
        }
        if self.l == 0 || self.d == 0 || self.layers == 0 || self.heads == 0 || self.ffn_mult == 0 {
            problems.push("l, d, layers, heads and ffn_mult must be positive".into());
        } else if self.d % self.heads != 0 {
            problems.push(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.max_segments == 0 {
            problems.push("max_segments must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }

    pub fn max_tokens(&self) -> usize {
        6 * self.max_segments + 2
    }

    /// Layer counts per stack in execution order: fine (down), endpoint
    /// (down), segment, endpoint (up), fine (up). The segment level gets a
    /// third of the layers; the rest is shared evenly by the two outer levels,
    /// each split before and after its inner level.
    pub fn stack_sizes(&self) -> [usize; 5] {
        let coarse = self.layers / 3;
        let rest = self.layers - coarse;
        let fine = rest.div_ceil(2);
        let mid = rest / 2;
        [fine.div_ceil(2), mid.div_ceil(2), coarse, mid / 2, fine / 2]
    }

    /// Whether global decoder layer `g` cross-attends to the condition
    /// (three self-attention layers, then one cross-attention layer).
    pub fn is_cross_layer(g: usize) -> bool {
        g % 4 == 3
    }
}

/// Sequence lengths at the three decoder levels.
pub fn level_lengths(n: usize) -> [usize; 3] {
    let n1 = n.div_ceil(COORD_FACTOR);
    [n, n1, n1.div_ceil(ENDPOINT_FACTOR)]
}
