use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

/// Token routing between fusion tokens and modality patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RoutingMode {
    /// Camera/companion tokens are dropped after layer 0.
    Pruned,
    /// Fusion tokens keep attending to their paired patches in every layer.
    Persistent,
    /// Pruned routing with the companion input zeroed at the pixel level.
    RgbOnly,
    /// Pruned routing with the RGB input zeroed at the pixel level.
    ModOnly,
}

impl RoutingMode {
    pub fn prunes(self) -> bool {
        !matches!(self, RoutingMode::Persistent)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Pruned => "pruned",
            RoutingMode::Persistent => "persistent",
            RoutingMode::RgbOnly => "rgb-only",
            RoutingMode::ModOnly => "mod-only",
        }
    }

    /// The input pass this mode forces, if any.
    pub fn forced_pass(self) -> Option<InputPass> {
        match self {
            RoutingMode::RgbOnly => Some(InputPass::RgbOnly),
            RoutingMode::ModOnly => Some(InputPass::ModOnly),
            _ => None,
        }
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pruned" => Ok(RoutingMode::Pruned),
            "persistent" => Ok(RoutingMode::Persistent),
            "rgb-only" => Ok(RoutingMode::RgbOnly),
            "mod-only" => Ok(RoutingMode::ModOnly),
            other => Err(Error::Config(format!("unknown routing mode `{other}`"))),
        }
    }
}

/// Which inputs are live in one forward pass; absent inputs are zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputPass {
    Joint,
    RgbOnly,
    ModOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub routing: RoutingMode,
    pub projector_dim: usize,
    pub rgb_channels: usize,
    pub mod_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            routing: RoutingMode::Pruned,
            projector_dim: 16,
            rgb_channels: 3,
            mod_channels: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 || self.image_size == 0 {
            return Err(invalid(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(invalid(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.projector_dim == 0 || self.mlp_ratio == 0 {
            return Err(invalid("depth, projector dim and mlp ratio must be positive"));
        }
        if self.rgb_channels == 0 || self.mod_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        Ok(())
    }

    /// Patches per side of the global grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `N`, the patch count per modality at the global resolution.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}
