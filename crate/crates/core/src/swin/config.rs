use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults are the Swin-T variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwinConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub relative_position_bias: bool,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

/// Window geometry of one stage after clamping to the token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGeometry {
    pub resolution: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

impl SwinConfig {
    pub const IN_CHANNELS: usize = 3;

    pub fn tiny() -> Self {
        Self {
            image_size: 224,
            patch_size: 4,
            embed_dim: 96,
            depths: vec![2, 2, 6, 2],
            heads: vec![3, 6, 12, 24],
            window: 7,
            mlp_ratio: 4,
            num_classes: 2,
            relative_position_bias: true,
        }
    }

    /// Reduced configuration for gradient checks and quick experiments:
    /// 16×16 input, window 2, two single-block stages.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            depths: vec![1, 1],
            heads: vec![2, 4],
            window: 2,
            mlp_ratio: 4,
            num_classes: 2,
            relative_position_bias: true,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn patch_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.embed_dim << (self.num_stages() - 1)
    }

    /// Windows never exceed the token grid; a stage whose grid fits in a
    /// single window gets no shift.
    pub fn stage(&self, s: usize) -> StageGeometry {
        let resolution = self.patch_grid() >> s;
        let (window, shift) = if resolution <= self.window {
            (resolution, 0)
        } else {
            (self.window, self.window / 2)
        };
        StageGeometry {
            resolution,
            dim: self.embed_dim << s,
            heads: self.heads[s],
            window,
            shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Spec(format!("invalid Swin config: {msg}")));
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return fail(format!(
                "depths {:?} and heads {:?} must be non-empty and equally long",
                self.depths, self.heads
            ));
        }
        if self.depths.contains(&0) || self.heads.contains(&0) {
            return fail("depths and heads must be positive".into());
        }
        if self.patch_size == 0 || self.window == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return fail("patch_size, window, embed_dim and mlp_ratio must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes {} < 2", self.num_classes));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        for s in 0..self.num_stages() {
            let grid = self.patch_grid() >> s;
            if s + 1 < self.num_stages() && (!(self.patch_grid() >> s).is_multiple_of(2) || grid < 2) {
                return fail(format!("stage {s} grid {grid} cannot be merged (odd or too small)"));
            }
            let g = self.stage(s);
            if !g.dim.is_multiple_of(g.heads) {
                return fail(format!("stage {s} dim {} not divisible by {} heads", g.dim, g.heads));
            }
            if !g.resolution.is_multiple_of(g.window) {
                return fail(format!(
                    "stage {s} grid {} not divisible by window {} (padding is not supported)",
                    g.resolution, g.window
                ));
            }
        }
        Ok(())
    }
}
