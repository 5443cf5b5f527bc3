//! The four-branch HoVer block and the stage assembly around it.
//!
//! A block carries two auxiliary strip branches (H, V) and two main
//! patch-grid branches (H2V, V2H). Per block:
//!
//! ```text
//! z_h'   = Trans_H(z_h)
//! z_v'   = Trans_V(z_v)
//! z_h2v' = Trans(Trans(B_h(z_h') + z_h2v) + B_v(z_v'))
//! z_v2h' = Trans(Trans(B_v(z_v') + z_v2h) + B_h(z_h'))
//! ```
//!
//! where `B_h`/`B_v` broadcast strip tokens onto the patch grid. A stage
//! embeds its input map once (the patch sequence feeds both main
//! branches), chains `depth` blocks, reshapes both main sequences back to
//! maps, concatenates them `[H2V, V2H]` along channels, and finishes with
//! the Conv fusion block and 2x2 pooling.
//!
//! Ablation variants drop the H and/or V branch structurally: their
//! parameters are never allocated and the corresponding additions vanish
//! from the graph.

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::embed::{
    broadcast_strips, hstrip_embed, init_scheme, patch_embed, tokens_to_map, vstrip_embed,
    EmbedParams, TokenDescriptor, TokenGeometry, TokenSequence,
};
use crate::error::{Error, Result};
use crate::nn::{
    conv_block, init_block, init_conv_block, pool2, transformer_block, BlockParams,
    ConvBlockParams,
};

/// The four branch sequences flowing between blocks. Strip branches are
/// `None` in variants that remove them.
#[derive(Debug, Clone, Copy)]
pub struct HoverBlockState {
    pub z_h: Option<TokenSequence>,
    pub z_v: Option<TokenSequence>,
    pub z_h2v: TokenSequence,
    pub z_v2h: TokenSequence,
}

/// Six independent transformer parameter sets per full block; strip-branch
/// sets exist only when the branch does.
#[derive(Debug, Clone)]
pub struct HoverBlockParams {
    pub h: Option<BlockParams>,
    pub v: Option<BlockParams>,
    pub h2v_inner: BlockParams,
    pub h2v_outer: BlockParams,
    pub v2h_inner: BlockParams,
    pub v2h_outer: BlockParams,
}

/// Everything one stage owns: embedding schemes, `depth` blocks, the Conv
/// fusion block.
#[derive(Debug, Clone)]
pub struct StageParams {
    pub embed: EmbedParams,
    pub blocks: Vec<HoverBlockParams>,
    pub conv: ConvBlockParams,
    pub geom: TokenGeometry,
    pub dim: usize,
}

pub fn init_hover_block(
    store: &mut ParamStore,
    seed_value: u64,
    prefix: &str,
    dim: usize,
    heads: usize,
    with_h: bool,
    with_v: bool,
) -> Result<HoverBlockParams> {
    Ok(HoverBlockParams {
        h: if with_h {
            Some(init_block(store, seed_value, &format!("{prefix}.h"), dim, heads)?)
        } else {
            None
        },
        v: if with_v {
            Some(init_block(store, seed_value, &format!("{prefix}.v"), dim, heads)?)
        } else {
            None
        },
        h2v_inner: init_block(store, seed_value, &format!("{prefix}.h2v_inner"), dim, heads)?,
        h2v_outer: init_block(store, seed_value, &format!("{prefix}.h2v_outer"), dim, heads)?,
        v2h_inner: init_block(store, seed_value, &format!("{prefix}.v2h_inner"), dim, heads)?,
        v2h_outer: init_block(store, seed_value, &format!("{prefix}.v2h_outer"), dim, heads)?,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn init_stage(
    store: &mut ParamStore,
    seed_value: u64,
    prefix: &str,
    geom: TokenGeometry,
    dim: usize,
    heads: usize,
    depth: usize,
    with_h: bool,
    with_v: bool,
    positional: bool,
) -> Result<StageParams> {
    geom.validate()?;
    if depth == 0 {
        return Err(Error::Config(format!("{prefix}: stage depth must be >= 1")));
    }
    if dim != geom.patch_dim() {
        return Err(Error::Config(format!(
            "{prefix}: embed dim {dim} must equal p^2*C = {}",
            geom.patch_dim()
        )));
    }
    let tokens = geom.grid() * geom.grid();
    let embed = EmbedParams {
        patch: init_scheme(
            store,
            seed_value,
            &format!("{prefix}.embed.patch"),
            geom.patch_dim(),
            dim,
            tokens,
            positional,
        ),
        hstrip: with_h.then(|| {
            init_scheme(
                store,
                seed_value,
                &format!("{prefix}.embed.hstrip"),
                geom.strip_dim(),
                dim,
                geom.strips(),
                positional,
            )
        }),
        vstrip: with_v.then(|| {
            init_scheme(
                store,
                seed_value,
                &format!("{prefix}.embed.vstrip"),
                geom.strip_dim(),
                dim,
                geom.strips(),
                positional,
            )
        }),
    };
    let blocks = (0..depth)
        .map(|l| {
            init_hover_block(
                store,
                seed_value,
                &format!("{prefix}.block{l}"),
                dim,
                heads,
                with_h,
                with_v,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let conv = init_conv_block(
        store,
        seed_value,
        &format!("{prefix}.conv"),
        2 * geom.channels,
        2 * geom.channels,
    );
    Ok(StageParams { embed, blocks, conv, geom, dim })
}

/// Runs one HoVer block. Descriptors are preserved; strip and grid
/// geometries must satisfy the broadcast alignment.
pub fn hover_block(
    g: &mut Graph,
    store: &ParamStore,
    state: &HoverBlockState,
    params: &HoverBlockParams,
) -> Result<HoverBlockState> {
    let TokenDescriptor::PatchGrid { rows, cols } = state.z_h2v.descriptor else {
        return Err(Error::Config("main branches must carry patch grids".into()));
    };
    if state.z_v2h.descriptor != state.z_h2v.descriptor {
        return Err(Error::Config("H2V and V2H descriptors differ".into()));
    }
    if state.z_h.is_some() != params.h.is_some() || state.z_v.is_some() != params.v.is_some() {
        return Err(Error::Config("branch state does not match branch parameters".into()));
    }

    // auxiliary branches
    let z_h = match (&state.z_h, &params.h) {
        (Some(seq), Some(p)) => Some(TokenSequence {
            id: transformer_block(g, store, seq.id, p)?,
            descriptor: seq.descriptor,
        }),
        _ => None,
    };
    let z_v = match (&state.z_v, &params.v) {
        (Some(seq), Some(p)) => Some(TokenSequence {
            id: transformer_block(g, store, seq.id, p)?,
            descriptor: seq.descriptor,
        }),
        _ => None,
    };
    let bh = z_h
        .as_ref()
        .map(|seq| broadcast_strips(g, seq, rows, cols))
        .transpose()?;
    let bv = z_v
        .as_ref()
        .map(|seq| broadcast_strips(g, seq, rows, cols))
        .transpose()?;

    // H2V: horizontal features first, vertical added after the inner block
    let mut a = state.z_h2v.id;
    if let Some(bh) = &bh {
        a = g.add(bh.id, a);
    }
    let inner = transformer_block(g, store, a, &params.h2v_inner)?;
    let mut b = inner;
    if let Some(bv) = &bv {
        b = g.add(b, bv.id);
    }
    let z_h2v = TokenSequence {
        id: transformer_block(g, store, b, &params.h2v_outer)?,
        descriptor: state.z_h2v.descriptor,
    };

    // V2H: the mirror
    let mut a = state.z_v2h.id;
    if let Some(bv) = &bv {
        a = g.add(bv.id, a);
    }
    let inner = transformer_block(g, store, a, &params.v2h_inner)?;
    let mut b = inner;
    if let Some(bh) = &bh {
        b = g.add(b, bh.id);
    }
    let z_v2h = TokenSequence {
        id: transformer_block(g, store, b, &params.v2h_outer)?,
        descriptor: state.z_v2h.descriptor,
    };

    Ok(HoverBlockState { z_h, z_v, z_h2v, z_v2h })
}

/// Embeds a stage input map into the four branches.
pub fn stage_entry(
    g: &mut Graph,
    store: &ParamStore,
    map: NodeId,
    params: &StageParams,
) -> Result<HoverBlockState> {
    let patch = patch_embed(g, store, map, &params.geom, &params.embed.patch)?;
    let z_h = params
        .embed
        .hstrip
        .as_ref()
        .map(|p| hstrip_embed(g, store, map, &params.geom, p))
        .transpose()?;
    let z_v = params
        .embed
        .vstrip
        .as_ref()
        .map(|p| vstrip_embed(g, store, map, &params.geom, p))
        .transpose()?;
    // both main branches start from the same patch-embedded sequence
    Ok(HoverBlockState { z_h, z_v, z_h2v: patch, z_v2h: patch })
}

/// Full stage: embed, `depth` chained blocks, reshape both main branches,
/// concatenate `[H2V, V2H]`, Conv fusion to `2C`, 2x2 pool.
/// `(B, S, S, C) -> (B, S/2, S/2, 2C)`.
pub fn hover_stage(
    g: &mut Graph,
    store: &ParamStore,
    map: NodeId,
    params: &StageParams,
) -> Result<NodeId> {
    let (out, _) = hover_stage_traced(g, store, map, params, true)?;
    Ok(out)
}

/// Like [`hover_stage`], also returning the pre-pool Conv-block output
/// (the heatmap evidence tap). `pool` can be disabled for a final stage
/// whose map is too small to halve.
pub fn hover_stage_traced(
    g: &mut Graph,
    store: &ParamStore,
    map: NodeId,
    params: &StageParams,
    pool: bool,
) -> Result<(NodeId, NodeId)> {
    let mut state = stage_entry(g, store, map, params)?;
    for block in &params.blocks {
        state = hover_block(g, store, &state, block)?;
    }
    let h2v_map = tokens_to_map(g, &state.z_h2v, &params.geom)?;
    let v2h_map = tokens_to_map(g, &state.z_v2h, &params.geom)?;
    let fused = g.concat(3, &[h2v_map, v2h_map]);
    let conv_out = conv_block(g, store, fused, &params.conv);
    let out = if pool { pool2(g, conv_out)? } else { conv_out };
    Ok((out, conv_out))
}
