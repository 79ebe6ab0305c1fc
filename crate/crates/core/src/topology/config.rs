use serde::{Deserialize, Serialize};

use crate::error::{HrstError, Result};

/// Architecture hyperparameters of one HRSTNet variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of stages / parallel streams at the head: 2, 3 or 4.
    pub variant: usize,
    pub embed_dim: usize,
    pub patch: usize,
    pub window: usize,
    /// Head counts for streams at D/4, D/8, D/16, D/32 (only the first `variant` are used).
    pub heads: Vec<usize>,
    /// Swin layers per block; the block is a W-MSA / SW-MSA pair.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: 4,
            embed_dim: 96,
            patch: 4,
            window: 4,
            heads: vec![3, 6, 12, 24],
            depth: 2,
            mlp_ratio: 4,
            in_channels: 4,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checks and overfit tests.
    pub fn tiny() -> Self {
        Self {
            variant: 2,
            embed_dim: 8,
            patch: 4,
            window: 2,
            heads: vec![2, 4, 8, 16],
            depth: 2,
            mlp_ratio: 4,
            in_channels: 1,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HrstError::Config(m));
        if !(2..=4).contains(&self.variant) {
            return fail(format!("variant must be 2, 3 or 4, got {}", self.variant));
        }
        if self.depth != 2 {
            return fail(format!(
                "depth must be 2 (one W-MSA and one SW-MSA layer), got {}",
                self.depth
            ));
        }
        if self.heads.len() < self.variant {
            return fail(format!(
                "{} head counts given for {} streams",
                self.heads.len(),
                self.variant
            ));
        }
        if self.window == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return fail("window, mlp_ratio and in_channels must be >= 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if !self.patch.is_power_of_two() {
            return fail(format!(
                "patch size must be a power of two, got {}",
                self.patch
            ));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.patch) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of the patch size {} \
                 (the head halves channels once per upsampling step)",
                self.embed_dim, self.patch
            ));
        }
        for r in 0..self.variant {
            let c = self.stream_channels(r);
            let h = self.heads[r];
            if h == 0 || !c.is_multiple_of(h) {
                return fail(format!(
                    "stream {r}: {c} channels are not divisible by {h} heads"
                ));
            }
        }
        Ok(())
    }

    pub fn stream_channels(&self, r: usize) -> usize {
        self.embed_dim << r
    }

    pub fn stream_heads(&self, r: usize) -> usize {
        self.heads[r]
    }

    pub fn shift(&self) -> [usize; 3] {
        [self.window / 2; 3]
    }

    /// Every input extent must be a multiple of this (patch size times one factor two per merge).
    pub fn min_multiple(&self) -> usize {
        self.patch << (self.variant - 1)
    }

    /// Multiple at which every stream tiles into whole windows without padding.
    pub fn window_exact_multiple(&self) -> usize {
        self.min_multiple() * self.window
    }

    pub fn check_input_dims(&self, dims: [usize; 3]) -> Result<()> {
        let m = self.min_multiple();
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(HrstError::Config(format!(
                "input extents {dims:?} must be positive multiples of {m} \
                 (patch {} x 2^{} merges)",
                self.patch,
                self.variant - 1
            )));
        }
        Ok(())
    }

    /// Number of patch-expanding steps the head uses to return to full resolution.
    pub fn head_expansions(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }
}
