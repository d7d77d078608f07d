use super::config::{EncoderConfig, InputPass};
use super::mask::{make_mask, AttentionMask};
use super::tokens::{build_sequence, embed_patches, prune, Stem, TokenSequence};
use crate::error::{shape_err, Result};
use crate::grad::{Graph, ParamStore, Tensor, Var};
use crate::image::Image;
use crate::rng::{rng_from, trunc_normal};

pub const INIT_STD: f64 = 0.02;

/// Parameter names, shapes and init rule, in draw order.
fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embed_dim;
    let n = cfg.num_patches();
    let p2 = cfg.patch_size * cfg.patch_size;
    let h = d * cfg.mlp_ratio;
    let mut v = vec![
        ("stem.cam.w".to_string(), vec![p2 * cfg.rgb_channels, d], Init::Normal),
        ("stem.cam.b".to_string(), vec![d], Init::Zero),
        ("stem.mod.w".to_string(), vec![p2 * cfg.mod_channels, d], Init::Normal),
        ("stem.mod.b".to_string(), vec![d], Init::Zero),
        ("embed.cam".to_string(), vec![d], Init::Normal),
        ("embed.mod".to_string(), vec![d], Init::Normal),
        ("token.cls".to_string(), vec![d], Init::Normal),
        ("token.fusion".to_string(), vec![n, d], Init::Normal),
        ("pos".to_string(), vec![1 + 3 * n, d], Init::Normal),
    ];
    let linear = |v: &mut Vec<_>, name: String, fan_in, fan_out| {
        v.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Normal));
        v.push((format!("{name}.b"), vec![fan_out], Init::Zero));
    };
    for l in 0..cfg.depth {
        for norm in ["norm1", "norm2"] {
            v.push((format!("block{l}.{norm}.gamma"), vec![d], Init::One));
            v.push((format!("block{l}.{norm}.beta"), vec![d], Init::Zero));
        }
        for p in ["q", "k", "v", "o"] {
            linear(&mut v, format!("block{l}.attn.{p}"), d, d);
        }
        linear(&mut v, format!("block{l}.mlp.fc1"), d, h);
        linear(&mut v, format!("block{l}.mlp.fc2"), h, d);
    }
    v.push(("norm.gamma".to_string(), vec![d], Init::One));
    v.push(("norm.beta".to_string(), vec![d], Init::Zero));
    v.push(("proj.fc1.w".to_string(), vec![d, d], Init::FanIn));
    v.push(("proj.fc1.b".to_string(), vec![d], Init::Zero));
    v.push(("proj.bn.gamma".to_string(), vec![d], Init::One));
    v.push(("proj.bn.beta".to_string(), vec![d], Init::Zero));
    v.push(("proj.fc2.w".to_string(), vec![d, cfg.projector_dim], Init::FanIn));
    v.push(("proj.fc2.b".to_string(), vec![cfg.projector_dim], Init::Zero));
    v
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    /// `std = 1/sqrt(fan_in)`, keeping projector outputs at unit scale.
    FanIn,
    Zero,
    One,
}

/// Fresh encoder + projector weights.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng_from(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg) {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Normal => (0..numel).map(|_| trunc_normal(&mut rng, INIT_STD)).collect(),
            Init::FanIn => {
                let std = 1.0 / (shape[0] as f64).sqrt();
                (0..numel).map(|_| trunc_normal(&mut rng, std)).collect()
            }
            Init::Zero => vec![0.0; numel],
            Init::One => vec![1.0; numel],
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Encoder outputs for a batch.
#[derive(Clone, Debug)]
pub struct EncodeOutput {
    /// Final-layer CLS, `[B, D]`.
    pub cls: Var,
    /// Final-layer fusion grid, `[B, n, D]`.
    pub fusion: Var,
    pub grid_side: usize,
    /// Token count entering each layer.
    pub layer_tokens: Vec<usize>,
    /// Attention probabilities per layer, `[B * heads, T, T]`.
    pub attention: Vec<Var>,
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, b)
}

fn norm(g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// `[B, T, D] -> [B * H, T, dh]`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, t, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, d / heads])
}

fn merge_heads(g: &mut Graph, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, t, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch, t, heads * dh])
}

/// One pre-norm transformer block; returns the output and the attention map.
pub fn block(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: usize,
    x: Var,
    mask: &AttentionMask,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != mask.tokens() {
        return Err(shape_err(
            "block",
            format!("tokens {s:?} vs mask for {} tokens", mask.tokens()),
        ));
    }
    let batch = s[0];
    let pre = format!("block{layer}");
    let (attn_out, probs) = g.scoped("attn", |g| -> Result<(Var, Var)> {
        let h = g.scoped("norm", |g| norm(g, store, x, &format!("{pre}.norm1")))?;
        let (q, k, v) = g.scoped("proj", |g| -> Result<_> {
            let q = linear(g, store, h, &format!("{pre}.attn.q"))?;
            let k = linear(g, store, h, &format!("{pre}.attn.k"))?;
            let v = linear(g, store, h, &format!("{pre}.attn.v"))?;
            let q = split_heads(g, q, cfg.heads)?;
            let q = g.scale(q, 1.0 / (cfg.head_dim() as f64).sqrt());
            let k = split_heads(g, k, cfg.heads)?;
            let k = g.transpose(k)?;
            let v = split_heads(g, v, cfg.heads)?;
            Ok((q, k, v))
        })?;
        let (ctx, probs) = g.scoped("score", |g| -> Result<_> {
            let scores = g.matmul(q, k)?;
            let probs = g.masked_softmax(scores, &mask.matrix)?;
            let ctx = g.matmul(probs, v)?;
            Ok((ctx, probs))
        })?;
        let out = g.scoped("proj", |g| -> Result<_> {
            let ctx = merge_heads(g, ctx, batch, cfg.heads)?;
            linear(g, store, ctx, &format!("{pre}.attn.o"))
        })?;
        Ok((out, probs))
    })?;
    let x = g.add(x, attn_out)?;
    let y = g.scoped("mlp", |g| -> Result<_> {
        let h = norm(g, store, x, &format!("{pre}.norm2"))?;
        let h = linear(g, store, h, &format!("{pre}.mlp.fc1"))?;
        let h = g.gelu(h);
        linear(g, store, h, &format!("{pre}.mlp.fc2"))
    })?;
    Ok((g.add(x, y)?, probs))
}

/// Runs the encoder over a batch of paired images. Absent modalities of
/// single-input passes are zeroed before the stem; `cfg.routing` may force
/// such a pass.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    rgb: &[Image],
    companion: &[Image],
    pass: InputPass,
) -> Result<EncodeOutput> {
    if rgb.len() != companion.len() {
        return Err(shape_err(
            "encode",
            format!("{} rgb vs {} companion images", rgb.len(), companion.len()),
        ));
    }
    let pass = cfg.routing.forced_pass().unwrap_or(pass);
    g.scoped("encoder", |g| {
        let (cam, modality) = g.scoped("stem", |g| -> Result<_> {
            let cam = embed_patches(g, store, cfg, rgb, Stem::Cam, pass == InputPass::ModOnly)?;
            let m = embed_patches(g, store, cfg, companion, Stem::Mod, pass == InputPass::RgbOnly)?;
            Ok((cam, m))
        })?;
        let mut seq: TokenSequence = g.scoped("stem", |g| build_sequence(g, store, cfg, cam, modality))?;
        let n = seq.n;
        let mut layer_tokens = Vec::with_capacity(cfg.depth);
        let mut attention = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let mask = make_mask(l, cfg.routing, n);
            layer_tokens.push(seq.len());
            let (x, probs) = g.scoped(&format!("L{l}"), |g| block(g, store, cfg, l, seq.tokens, &mask))?;
            attention.push(probs);
            seq.tokens = x;
            if l == 0 && cfg.routing.prunes() {
                seq = prune(g, &seq)?;
            }
        }
        let out = g.scoped("norm", |g| norm(g, store, seq.tokens, "norm"))?;
        let batch = rgb.len();
        let d = cfg.embed_dim;
        let cls = g.slice(out, 1, 0, 1)?;
        let cls = g.reshape(cls, &[batch, d])?;
        let fusion = g.slice(out, 1, 1, n)?;
        Ok(EncodeOutput {
            cls,
            fusion,
            grid_side: (n as f64).sqrt().round() as usize,
            layer_tokens,
            attention,
        })
    })
}

/// Per-feature standardization over the batch axis of `[B, D]`, then an
/// affine map. Uses batch statistics only.
fn batch_norm(g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let (b, d) = (g.shape(x)[0], g.shape(x)[1]);
    let t = g.transpose(x)?;
    let ones = g.constant(Tensor::full(vec![b], 1.0));
    let zeros = g.constant(Tensor::zeros(vec![b]));
    let t = g.layer_norm(t, ones, zeros)?;
    let y = g.transpose(t)?;
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let gamma = g.reshape(gamma, &[1, d])?;
    let gamma = g.broadcast(gamma, &[b, d])?;
    let y = g.mul(y, gamma)?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    g.add_bias(y, beta)
}

/// Projector head, `[B, D] -> [B, d]`: linear, batch norm, GELU, linear.
pub fn project(g: &mut Graph, store: &ParamStore, cls: Var) -> Result<Var> {
    g.scoped("projector", |g| {
        let h = linear(g, store, cls, "proj.fc1")?;
        let h = batch_norm(g, store, h, "proj.bn")?;
        let h = g.gelu(h);
        linear(g, store, h, "proj.fc2")
    })
}
