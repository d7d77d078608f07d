//! Fusion-token vision transformer.

mod config;
mod encoder;
mod mask;
mod tokens;

pub use config::{EncoderConfig, InputPass, RoutingMode};
pub use encoder::{block, encode, init_encoder, project, EncodeOutput, INIT_STD};
pub use mask::{full_layout, make_mask, pruned_layout, token_index, AttentionMask, TokenRole};
pub use tokens::{build_sequence, embed_patches, patchify, prune, Stem, TokenSequence};
