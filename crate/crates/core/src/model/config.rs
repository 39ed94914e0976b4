use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    /// Stochastic-depth rate; only used while fine-tuning.
    pub drop_path: f64,
}

impl EncoderConfig {
    /// ViT-Base at 16×16 patches.
    pub fn vit_base() -> Self {
        Self {
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            patch_size: 16,
            drop_path: 0.1,
        }
    }

    /// Desk-scale encoder used by the acceptance runs (32×32 inputs, P=4).
    pub fn toy() -> Self {
        Self {
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 4,
            drop_path: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("encoder.depth must be at least 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder.dim {} must be divisible by encoder.heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::config(format!(
                "encoder.dim {} must be a multiple of 4 for the positional table",
                self.dim
            )));
        }
        if self.mlp_ratio == 0 || self.patch_size == 0 {
            return Err(Error::config("encoder.mlp_ratio and encoder.patch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config(format!(
                "encoder.drop_path {} must lie in [0, 1)",
                self.drop_path
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    /// The weakened decoder: one block at width 128.
    fn default() -> Self {
        Self {
            depth: 1,
            dim: 128,
            heads: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("decoder.depth must be at least 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "decoder.dim {} must be divisible by decoder.heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Blocks in each contrastive feature encoder.
    pub feature_depth: usize,
    pub feature_heads: usize,
    /// Location vocabulary; `None` means one class per grid position.
    pub loc_vocab: Option<usize>,
    /// Route the strong-view query through the momentum encoder instead of
    /// the query encoder. Off by default.
    pub literal_strong_query: bool,
}

impl ModelConfig {
    pub fn vit_base() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            encoder: EncoderConfig::vit_base(),
            decoder: DecoderConfig::default(),
            feature_depth: 2,
            feature_heads: 4,
            loc_vocab: None,
            literal_strong_query: false,
        }
    }

    pub fn toy() -> Self {
        Self {
            image_size: 32,
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig {
                depth: 1,
                dim: 32,
                heads: 4,
            },
            ..Self::vit_base()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.encoder.patch_size;
        (g, g)
    }

    pub fn n_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Flattened patch width `P²·C`.
    pub fn token_dim(&self) -> usize {
        self.encoder.patch_size * self.encoder.patch_size * self.channels
    }

    pub fn loc_classes(&self) -> usize {
        self.loc_vocab.unwrap_or_else(|| self.n_tokens())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.channels == 0 {
            return Err(Error::config("channels must be positive"));
        }
        if self.image_size == 0 || self.image_size % self.encoder.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.encoder.patch_size
            )));
        }
        if self.n_tokens() < 2 {
            return Err(Error::config("the patch grid must hold at least 2 tokens"));
        }
        if self.encoder.dim < 2 {
            return Err(Error::config("encoder.dim must be at least 2"));
        }
        if self.feature_depth == 0 || self.feature_heads == 0 || self.decoder.dim % self.feature_heads != 0 {
            return Err(Error::config(format!(
                "feature encoder needs depth >= 1 and heads dividing decoder.dim {}",
                self.decoder.dim
            )));
        }
        if self.loc_classes() < 2 {
            return Err(Error::config("location vocabulary must have at least 2 entries"));
        }
        Ok(())
    }
}
