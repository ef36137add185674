use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the tiny Vision Transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_dim: usize,
    pub n_classes: usize,
}

impl Default for ViTConfig {
    /// 16×16 grayscale, 4×4 patches, embed 32, 2 heads, 2 layers, 4 classes.
    fn default() -> Self {
        Self {
            image_side: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            n_heads: 2,
            n_layers: 2,
            mlp_dim: 64,
            n_classes: 4,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_side", self.image_side),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("mlp_dim", self.mlp_dim),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Patches per side of the grid.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    /// Patch count `n`.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per patch vector `d`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Per-head query/key width.
    pub fn key_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_side, self.image_side]
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_side * self.image_side
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = ViTConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_patches(), 16);
        assert_eq!(c.patch_dim(), 16);
        assert_eq!(c.key_dim(), 16);
        assert_eq!(c.seq_len(), 17);
    }

    #[test]
    fn rejects_bad_divisibility() {
        let c = ViTConfig {
            image_side: 15,
            ..ViTConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ViTConfig {
            n_heads: 3,
            ..ViTConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
