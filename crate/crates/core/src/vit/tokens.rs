use super::config::{EncoderConfig, RoutingMode};
use super::mask::{full_layout, pruned_layout, TokenRole};
use crate::error::{invalid, shape_err, Result};
use crate::grad::{Graph, ParamStore, Tensor, Var};
use crate::image::{bilinear_matrix, Image};

/// Patch stem selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stem {
    Cam,
    Mod,
}

impl Stem {
    pub fn name(self) -> &'static str {
        match self {
            Stem::Cam => "cam",
            Stem::Mod => "mod",
        }
    }

    pub fn channels(self, cfg: &EncoderConfig) -> usize {
        match self {
            Stem::Cam => cfg.rgb_channels,
            Stem::Mod => cfg.mod_channels,
        }
    }

    /// First row of this stem's slot range in the positional table.
    fn pos_offset(self, n: usize) -> usize {
        match self {
            Stem::Cam => 1 + n,
            Stem::Mod => 1 + 2 * n,
        }
    }
}

/// Token bundle flowing through the encoder, `tokens: [B, T, D]`.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub roles: Vec<TokenRole>,
    pub n: usize,
    pub routing: RoutingMode,
    pub pruned: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

/// Rearranges a square image into `[N, p*p*C]` rows, patches row-major,
/// features ordered `(dy, dx, c)`.
pub fn patchify(image: &Image, patch: usize, channels: usize) -> Result<Tensor> {
    if image.channels != channels {
        return Err(shape_err(
            "patchify",
            format!("expected {channels} channels, got {}", image.channels),
        ));
    }
    if image.height != image.width || patch == 0 || image.height % patch != 0 {
        return Err(shape_err(
            "patchify",
            format!("{}x{} image is not a square multiple of patch {patch}", image.height, image.width),
        ));
    }
    let side = image.height / patch;
    let feat = patch * patch * channels;
    let mut data = Vec::with_capacity(side * side * feat);
    for py in 0..side {
        for px in 0..side {
            for dy in 0..patch {
                let y = py * patch + dy;
                for dx in 0..patch {
                    let x = px * patch + dx;
                    data.extend(image.pixel(y, x).iter().map(|&v| v as f64));
                }
            }
        }
    }
    Tensor::new(vec![side * side, feat], data)
}

/// Grid side shared by every image of a batch.
pub(crate) fn batch_grid_side(images: &[Image], patch: usize) -> Result<usize> {
    let first = images
        .first()
        .ok_or_else(|| invalid("empty image batch"))?;
    for im in images {
        if im.height != first.height || im.width != first.width {
            return Err(shape_err(
                "patchify",
                format!("mixed sizes {}x{} and {}x{}", first.height, first.width, im.height, im.width),
            ));
        }
    }
    if patch == 0 || first.height % patch != 0 {
        return Err(shape_err("patchify", format!("size {} vs patch {patch}", first.height)));
    }
    Ok(first.height / patch)
}

/// Rows `[start, start + N)` of the positional table, resampled to a
/// `side x side` grid when it differs from the global grid.
pub(crate) fn grid_rows(
    g: &mut Graph,
    cfg: &EncoderConfig,
    table: Var,
    start: usize,
    side: usize,
) -> Result<Var> {
    let gs = cfg.grid_side();
    let rows = g.slice(table, 0, start, gs * gs)?;
    if side == gs {
        return Ok(rows);
    }
    let m = Tensor::new(vec![side * side, gs * gs], bilinear_matrix(gs, side))?;
    let m = g.constant(m);
    g.matmul(m, rows)
}

/// Projects a batch of images through `stem` and adds the modality and
/// positional embeddings: `[B, n, D]`. With `zeroed`, the pixels are
/// treated as all zero.
pub fn embed_patches(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    images: &[Image],
    stem: Stem,
    zeroed: bool,
) -> Result<Var> {
    let side = batch_grid_side(images, cfg.patch_size)?;
    let channels = stem.channels(cfg);
    let n = side * side;
    let feat = cfg.patch_size * cfg.patch_size * channels;
    let mut data = Vec::with_capacity(images.len() * n * feat);
    for im in images {
        let t = patchify(im, cfg.patch_size, channels)?;
        if zeroed {
            data.resize(data.len() + t.numel(), 0.0);
        } else {
            data.extend_from_slice(t.data());
        }
    }
    let x = g.constant(Tensor::new(vec![images.len(), n, feat], data)?);
    let w = g.param(store, &format!("stem.{}.w", stem.name()))?;
    let b = g.param(store, &format!("stem.{}.b", stem.name()))?;
    let e = g.param(store, &format!("embed.{}", stem.name()))?;
    let table = g.param(store, "pos")?;
    let y = g.linear(x, w, b)?;
    let y = g.add_bias(y, e)?;
    let pos = grid_rows(g, cfg, table, stem.pos_offset(cfg.num_patches()), side)?;
    g.add_bias(y, pos)
}

/// Assembles `[CLS, F, C, M]` from embedded patch sets `[B, n, D]`.
pub fn build_sequence(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    cam: Var,
    modality: Var,
) -> Result<TokenSequence> {
    let cs = g.shape(cam).to_vec();
    let ms = g.shape(modality).to_vec();
    if cs != ms || cs.len() != 3 || cs[2] != cfg.embed_dim {
        return Err(shape_err("build_sequence", format!("camera {cs:?} vs companion {ms:?}")));
    }
    let (batch, n, d) = (cs[0], cs[1], cs[2]);
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(shape_err("build_sequence", format!("{n} patches do not form a square grid")));
    }
    let table = g.param(store, "pos")?;
    let cls = g.param(store, "token.cls")?;
    let cls_pos = g.slice(table, 0, 0, 1)?;
    let cls_pos = g.reshape(cls_pos, &[d])?;
    let cls = g.add(cls, cls_pos)?;
    let cls = g.reshape(cls, &[1, 1, d])?;
    let cls = g.broadcast(cls, &[batch, 1, d])?;

    let bank = g.param(store, "token.fusion")?;
    let bank = grid_rows(g, cfg, bank, 0, side)?;
    let fpos = grid_rows(g, cfg, table, 1, side)?;
    let fusion = g.add(bank, fpos)?;
    let fusion = g.reshape(fusion, &[1, n, d])?;
    let fusion = g.broadcast(fusion, &[batch, n, d])?;

    let tokens = g.concat(&[cls, fusion, cam, modality], 1)?;
    Ok(TokenSequence {
        tokens,
        roles: full_layout(n),
        n,
        routing: cfg.routing,
        pruned: false,
    })
}

/// Drops camera and companion tokens, keeping CLS and the fusion grid.
pub fn prune(g: &mut Graph, seq: &TokenSequence) -> Result<TokenSequence> {
    if seq.pruned {
        return Err(invalid("sequence already pruned"));
    }
    if !seq.routing.prunes() {
        return Err(invalid("persistent routing never prunes"));
    }
    let tokens = g.slice(seq.tokens, 1, 0, 1 + seq.n)?;
    Ok(TokenSequence {
        tokens,
        roles: pruned_layout(seq.n),
        n: seq.n,
        routing: seq.routing,
        pruned: true,
    })
}
