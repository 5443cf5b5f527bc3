//! Neural primitives: pre-norm transformer encoder block, convolutional
//! stem, three-layer Conv fusion block, and pooling. All of them build
//! onto an [`autodiff::Graph`] so forward and backward share one code path.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Conv2dSpec, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::seed;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const MAP_NORM_EPS: f64 = 1e-6;
/// MLP hidden width ratio of the transformer block.
pub const MLP_RATIO: usize = 4;
/// Std of the positional-table initialization.
pub const POS_INIT_STD: f64 = 0.02;

/// Layer-norm affine pair.
#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub scale: ParamId,
    pub shift: ParamId,
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// The two-layer feed-forward of a transformer block (D -> 4D -> D).
#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Everything one transformer encoder block owns.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub mlp: MlpParams,
    pub heads: usize,
}

/// Two stride-2 convolutions with a normalization + ReLU between them;
/// total downscale 4x.
#[derive(Debug, Clone, Copy)]
pub struct StemParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub norm: NormParams,
    pub w2: ParamId,
    pub b2: ParamId,
    pub out_channels: usize,
}

/// Conv fusion block: 1x1 widening to twice the input channels, 3x3 at
/// that width, then a linear 1x1 compression to the next stage's width.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlockParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub norm1: NormParams,
    pub w2: ParamId,
    pub b2: ParamId,
    pub norm2: NormParams,
    pub w3: ParamId,
    pub b3: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Weight matrix initialized from a fan-scaled truncated normal
/// (`std = sqrt(2 / (fan_in + fan_out))`), keyed by `(seed, name)` so a
/// parameter's initial value depends only on its name, never on which
/// sibling parameters exist. The fan scaling keeps per-layer signal gain
/// near one at the small embedding widths this architecture uses.
pub fn init_weight(
    store: &mut ParamStore,
    seed_value: u64,
    name: &str,
    shape: &[usize],
) -> ParamId {
    let (fan_in, fan_out) = match shape {
        [rows, cols] => (*rows, *cols),
        [kh, kw, ci, co] => (kh * kw * ci, kh * kw * co),
        other => panic!("unsupported weight shape {other:?}"),
    };
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = seed::stream_tagged(seed_value, &["init", name]);
    let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || trunc_normal(&mut rng, std));
    store.add(name, value, true)
}

/// Positional table initialized from a truncated normal at a small fixed
/// std; the table only nudges tokens, it does not carry the signal.
pub fn init_table(
    store: &mut ParamStore,
    seed_value: u64,
    name: &str,
    shape: &[usize],
) -> ParamId {
    let mut rng = seed::stream_tagged(seed_value, &["init", name]);
    let value =
        ArrayD::from_shape_simple_fn(IxDyn(shape), || trunc_normal(&mut rng, POS_INIT_STD));
    store.add(name, value, true)
}

pub fn init_bias(store: &mut ParamStore, name: &str, n: usize) -> ParamId {
    store.add(name, ArrayD::zeros(IxDyn(&[n])), false)
}

pub fn init_norm(store: &mut ParamStore, name: &str, n: usize) -> NormParams {
    NormParams {
        scale: store.add(format!("{name}.scale"), ArrayD::ones(IxDyn(&[n])), false),
        shift: store.add(format!("{name}.shift"), ArrayD::zeros(IxDyn(&[n])), false),
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).unwrap();
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Allocates one transformer block's parameters under `prefix`.
pub fn init_block(
    store: &mut ParamStore,
    seed_value: u64,
    prefix: &str,
    dim: usize,
    heads: usize,
) -> Result<BlockParams> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "{prefix}: embed dim {dim} not divisible by {heads} heads"
        )));
    }
    let hidden = MLP_RATIO * dim;
    Ok(BlockParams {
        norm1: init_norm(store, &format!("{prefix}.norm1"), dim),
        attn: AttentionParams {
            wq: init_weight(store, seed_value, &format!("{prefix}.attn.wq"), &[dim, dim]),
            bq: init_bias(store, &format!("{prefix}.attn.bq"), dim),
            wk: init_weight(store, seed_value, &format!("{prefix}.attn.wk"), &[dim, dim]),
            bk: init_bias(store, &format!("{prefix}.attn.bk"), dim),
            wv: init_weight(store, seed_value, &format!("{prefix}.attn.wv"), &[dim, dim]),
            bv: init_bias(store, &format!("{prefix}.attn.bv"), dim),
            wo: init_weight(store, seed_value, &format!("{prefix}.attn.wo"), &[dim, dim]),
            bo: init_bias(store, &format!("{prefix}.attn.bo"), dim),
        },
        norm2: init_norm(store, &format!("{prefix}.norm2"), dim),
        mlp: MlpParams {
            w1: init_weight(store, seed_value, &format!("{prefix}.mlp.w1"), &[dim, hidden]),
            b1: init_bias(store, &format!("{prefix}.mlp.b1"), hidden),
            w2: init_weight(store, seed_value, &format!("{prefix}.mlp.w2"), &[hidden, dim]),
            b2: init_bias(store, &format!("{prefix}.mlp.b2"), dim),
        },
        heads,
    })
}

pub fn init_stem(
    store: &mut ParamStore,
    seed_value: u64,
    prefix: &str,
    out_channels: usize,
) -> StemParams {
    StemParams {
        w1: init_weight(store, seed_value, &format!("{prefix}.conv1.w"), &[3, 3, 3, out_channels]),
        b1: init_bias(store, &format!("{prefix}.conv1.b"), out_channels),
        norm: init_norm(store, &format!("{prefix}.norm"), out_channels),
        w2: init_weight(
            store,
            seed_value,
            &format!("{prefix}.conv2.w"),
            &[3, 3, out_channels, out_channels],
        ),
        b2: init_bias(store, &format!("{prefix}.conv2.b"), out_channels),
        out_channels,
    }
}

pub fn init_conv_block(
    store: &mut ParamStore,
    seed_value: u64,
    prefix: &str,
    in_channels: usize,
    out_channels: usize,
) -> ConvBlockParams {
    let mid = 2 * in_channels;
    ConvBlockParams {
        w1: init_weight(store, seed_value, &format!("{prefix}.conv1.w"), &[1, 1, in_channels, mid]),
        b1: init_bias(store, &format!("{prefix}.conv1.b"), mid),
        norm1: init_norm(store, &format!("{prefix}.norm1"), mid),
        w2: init_weight(store, seed_value, &format!("{prefix}.conv2.w"), &[3, 3, mid, mid]),
        b2: init_bias(store, &format!("{prefix}.conv2.b"), mid),
        norm2: init_norm(store, &format!("{prefix}.norm2"), mid),
        w3: init_weight(store, seed_value, &format!("{prefix}.conv3.w"), &[1, 1, mid, out_channels]),
        b3: init_bias(store, &format!("{prefix}.conv3.b"), out_channels),
        in_channels,
        out_channels,
    }
}

/// Layer normalization of a token sequence over its embedding axis.
pub fn layer_norm(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    norm: &NormParams,
    eps: f64,
) -> NodeId {
    let scale = g.param(store, norm.scale);
    let shift = g.param(store, norm.shift);
    g.layer_norm(x, scale, shift, eps)
}

/// Standard scaled dot-product multi-head self-attention over `(B, T, D)`
/// tokens, per-head scale `1/sqrt(D/heads)`.
pub fn multi_head_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    p: &AttentionParams,
    heads: usize,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let [b, t, d] = shape[..] else {
        return Err(Error::Shape(format!("attention expects (B,T,D), got {shape:?}")));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "embed dim {d} not divisible by {heads} heads"
        )));
    }
    let hd = d / heads;
    let x2 = g.reshape(x, &[b * t, d]);
    let project = |g: &mut Graph, w, bias| {
        let w = g.param(store, w);
        let bias = g.param(store, bias);
        let y = g.linear(x2, w, bias);
        let y = g.reshape(y, &[b, t, heads, hd]);
        let y = g.permute(y, &[0, 2, 1, 3]);
        g.reshape(y, &[b * heads, t, hd])
    };
    let q = project(g, p.wq, p.bq);
    let k = project(g, p.wk, p.bk);
    let v = project(g, p.wv, p.bv);
    let scores = g.bmm(q, k, true);
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
    let attn = g.softmax_last(scores);
    let ctx = g.bmm(attn, v, false);
    let ctx = g.reshape(ctx, &[b, heads, t, hd]);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[b * t, d]);
    let wo = g.param(store, p.wo);
    let bo = g.param(store, p.bo);
    let out = g.linear(ctx, wo, bo);
    Ok(g.reshape(out, &[b, t, d]))
}

/// Pre-norm residual encoder block:
/// `z' = MSA(LN(x)) + x; out = MLP(LN(z')) + z'` with a GELU MLP.
pub fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    p: &BlockParams,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let [b, t, d] = shape[..] else {
        return Err(Error::Shape(format!("block expects (B,T,D), got {shape:?}")));
    };
    let n1 = layer_norm(g, store, x, &p.norm1, LAYER_NORM_EPS);
    let att = multi_head_self_attention(g, store, n1, &p.attn, p.heads)?;
    let z = g.add(att, x);
    let n2 = layer_norm(g, store, z, &p.norm2, LAYER_NORM_EPS);
    let h = g.reshape(n2, &[b * t, d]);
    let w1 = g.param(store, p.mlp.w1);
    let b1 = g.param(store, p.mlp.b1);
    let h = g.linear(h, w1, b1);
    let h = g.gelu(h);
    let w2 = g.param(store, p.mlp.w2);
    let b2 = g.param(store, p.mlp.b2);
    let h = g.linear(h, w2, b2);
    let h = g.reshape(h, &[b, t, d]);
    Ok(g.add(h, z))
}

/// Convolutional stem: downscales `(B, H, W, 3)` to `(B, H/4, W/4, C)`.
pub fn conv_stem(g: &mut Graph, store: &ParamStore, x: NodeId, p: &StemParams) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let [_, h, w, c] = shape[..] else {
        return Err(Error::Shape(format!("stem expects (B,H,W,C), got {shape:?}")));
    };
    if c != 3 {
        return Err(Error::Shape(format!("stem expects 3 input channels, got {c}")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Config(format!(
            "stem input {h}x{w} must be divisible by 4"
        )));
    }
    let spec = Conv2dSpec { kernel: 3, stride: 2, pad: 1 };
    let w1 = g.param(store, p.w1);
    let b1 = g.param(store, p.b1);
    let y = g.conv2d(x, w1, b1, spec);
    let scale = g.param(store, p.norm.scale);
    let shift = g.param(store, p.norm.shift);
    let y = g.map_norm(y, scale, shift, MAP_NORM_EPS);
    let y = g.relu(y);
    let w2 = g.param(store, p.w2);
    let b2 = g.param(store, p.b2);
    Ok(g.conv2d(y, w2, b2, spec))
}

/// Three-layer Conv fusion block. Spatial size is preserved; channels go
/// `C -> 2C -> 2C -> out`. The compressing 1x1 stays linear (no norm or
/// nonlinearity after it).
pub fn conv_block(g: &mut Graph, store: &ParamStore, x: NodeId, p: &ConvBlockParams) -> NodeId {
    assert_eq!(
        g.shape(x)[3],
        p.in_channels,
        "conv block input channels mismatch"
    );
    let one = Conv2dSpec { kernel: 1, stride: 1, pad: 0 };
    let three = Conv2dSpec { kernel: 3, stride: 1, pad: 1 };
    let w1 = g.param(store, p.w1);
    let b1 = g.param(store, p.b1);
    let y = g.conv2d(x, w1, b1, one);
    let s1 = g.param(store, p.norm1.scale);
    let h1 = g.param(store, p.norm1.shift);
    let y = g.map_norm(y, s1, h1, MAP_NORM_EPS);
    let y = g.relu(y);
    let w2 = g.param(store, p.w2);
    let b2 = g.param(store, p.b2);
    let y = g.conv2d(y, w2, b2, three);
    let s2 = g.param(store, p.norm2.scale);
    let h2 = g.param(store, p.norm2.shift);
    let y = g.map_norm(y, s2, h2, MAP_NORM_EPS);
    let y = g.relu(y);
    let w3 = g.param(store, p.w3);
    let b3 = g.param(store, p.b3);
    g.conv2d(y, w3, b3, one)
}

/// 2x2 average pooling, stride 2.
pub fn pool2(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let [_, h, w, _] = shape[..] else {
        return Err(Error::Shape(format!("pool2 expects (B,H,W,C), got {shape:?}")));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "pool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    Ok(g.avg_pool2(x))
}
