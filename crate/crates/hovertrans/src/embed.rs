//! The three tokenization schemes — square patches, horizontal strips,
//! vertical strips — plus positional tables, the strip-to-grid broadcast
//! that makes strip and patch sequences addable, and the inverse reshape
//! from patch tokens back to a feature map.
//!
//! All projections are linear (no bias); the positional table is the only
//! additive term, added once at stage entry.

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{init_table, init_weight};

/// How a token sequence tiles its source map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenDescriptor {
    PatchGrid { rows: usize, cols: usize },
    HStrips { count: usize },
    VStrips { count: usize },
}

impl TokenDescriptor {
    pub fn token_count(&self) -> usize {
        match *self {
            TokenDescriptor::PatchGrid { rows, cols } => rows * cols,
            TokenDescriptor::HStrips { count } | TokenDescriptor::VStrips { count } => count,
        }
    }
}

/// A `(B, T, D)` token batch on the graph, tagged with its tiling.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub id: NodeId,
    pub descriptor: TokenDescriptor,
}

/// Tiling geometry of one stage: map side, channels, patch side `p`,
/// strip thickness `hv`.
#[derive(Debug, Clone, Copy)]
pub struct TokenGeometry {
    pub side: usize,
    pub channels: usize,
    pub p: usize,
    pub hv: usize,
}

impl TokenGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.side % self.p != 0 {
            return Err(Error::Config(format!(
                "patch side {} must divide map side {}",
                self.p, self.side
            )));
        }
        if self.hv == 0 || self.side % self.hv != 0 {
            return Err(Error::Config(format!(
                "strip thickness {} must divide map side {}",
                self.hv, self.side
            )));
        }
        if self.p % self.hv != 0 && self.hv % self.p != 0 {
            return Err(Error::Config(format!(
                "patch side {} and strip thickness {} are not broadcast-aligned",
                self.p, self.hv
            )));
        }
        Ok(())
    }

    /// Patch grid side: tokens per row/column.
    pub fn grid(&self) -> usize {
        self.side / self.p
    }

    /// Number of strips per axis.
    pub fn strips(&self) -> usize {
        self.side / self.hv
    }

    /// Flattened patch length `p*p*C`.
    pub fn patch_dim(&self) -> usize {
        self.p * self.p * self.channels
    }

    /// Flattened strip length `hv*side*C`.
    pub fn strip_dim(&self) -> usize {
        self.hv * self.side * self.channels
    }
}

/// One scheme's parameters: projection matrix and optional positional table.
#[derive(Debug, Clone, Copy)]
pub struct SchemeParams {
    pub proj: ParamId,
    pub pos: Option<ParamId>,
}

/// Per-stage embedding parameters. Strip schemes are absent (not zeroed)
/// in ablation variants that drop those branches.
#[derive(Debug, Clone, Copy)]
pub struct EmbedParams {
    pub patch: SchemeParams,
    pub hstrip: Option<SchemeParams>,
    pub vstrip: Option<SchemeParams>,
}

pub fn init_scheme(
    store: &mut ParamStore,
    seed_value: u64,
    name: &str,
    in_dim: usize,
    dim: usize,
    tokens: usize,
    positional: bool,
) -> SchemeParams {
    SchemeParams {
        proj: init_weight(store, seed_value, &format!("{name}.proj"), &[in_dim, dim]),
        pos: positional
            .then(|| init_table(store, seed_value, &format!("{name}.pos"), &[tokens, dim])),
    }
}

fn project(
    g: &mut Graph,
    store: &ParamStore,
    tiles: NodeId,
    batch: usize,
    tokens: usize,
    in_dim: usize,
    params: &SchemeParams,
) -> NodeId {
    let flat = g.reshape(tiles, &[batch * tokens, in_dim]);
    let w = g.param(store, params.proj);
    let projected = g.matmul(flat, w);
    let dim = g.shape(projected)[1];
    let seq = g.reshape(projected, &[batch, tokens, dim]);
    match params.pos {
        Some(pos) => {
            let table = g.param(store, pos);
            g.add_broadcast(seq, table)
        }
        None => seq,
    }
}

/// Cuts the map into a `(side/p)^2` row-major grid of `p x p x C` tiles,
/// flattens each tile in `(dy, dx, channel)` order, and projects to D.
pub fn patch_embed(
    g: &mut Graph,
    store: &ParamStore,
    map: NodeId,
    geom: &TokenGeometry,
    params: &SchemeParams,
) -> Result<TokenSequence> {
    geom.validate()?;
    let shape = g.shape(map).to_vec();
    expect_map(&shape, geom)?;
    let (b, c, p, grid) = (shape[0], geom.channels, geom.p, geom.grid());
    let split = g.reshape(map, &[b, grid, p, grid, p, c]);
    let grouped = g.permute(split, &[0, 1, 3, 2, 4, 5]);
    let tiles = g.reshape(grouped, &[b, grid * grid, p * p * c]);
    let id = project(g, store, tiles, b, grid * grid, geom.patch_dim(), params);
    Ok(TokenSequence {
        id,
        descriptor: TokenDescriptor::PatchGrid { rows: grid, cols: grid },
    })
}

/// One token per horizontal band of thickness `hv`, top to bottom, each
/// flattened in `(offset-within-strip, column, channel)` order.
pub fn hstrip_embed(
    g: &mut Graph,
    store: &ParamStore,
    map: NodeId,
    geom: &TokenGeometry,
    params: &SchemeParams,
) -> Result<TokenSequence> {
    geom.validate()?;
    let shape = g.shape(map).to_vec();
    expect_map(&shape, geom)?;
    let (b, s, c, m) = (shape[0], geom.side, geom.channels, geom.strips());
    let tiles = g.reshape(map, &[b, m, geom.hv * s * c]);
    let id = project(g, store, tiles, b, m, geom.strip_dim(), params);
    Ok(TokenSequence {
        id,
        descriptor: TokenDescriptor::HStrips { count: m },
    })
}

/// Mirror of [`hstrip_embed`] over vertical bands, left to right. The
/// flatten order `(offset-within-strip, row, channel)` mirrors the
/// horizontal scheme's, so a transposed map with shared projections
/// produces identical tokens.
pub fn vstrip_embed(
    g: &mut Graph,
    store: &ParamStore,
    map: NodeId,
    geom: &TokenGeometry,
    params: &SchemeParams,
) -> Result<TokenSequence> {
    geom.validate()?;
    let shape = g.shape(map).to_vec();
    expect_map(&shape, geom)?;
    let (b, s, c, m) = (shape[0], geom.side, geom.channels, geom.strips());
    let transposed = g.permute(map, &[0, 2, 1, 3]);
    let tiles = g.reshape(transposed, &[b, m, geom.hv * s * c]);
    let id = project(g, store, tiles, b, m, geom.strip_dim(), params);
    Ok(TokenSequence {
        id,
        descriptor: TokenDescriptor::VStrips { count: m },
    })
}

/// Replicates strip tokens onto a patch grid so the two sequences can be
/// added: grid cell `(r, c)` receives horizontal strip `floor(r*M/rows)`
/// or vertical strip `floor(c*M/cols)`.
pub fn broadcast_strips(
    g: &mut Graph,
    strips: &TokenSequence,
    rows: usize,
    cols: usize,
) -> Result<TokenSequence> {
    let (count, horizontal) = match strips.descriptor {
        TokenDescriptor::HStrips { count } => (count, true),
        TokenDescriptor::VStrips { count } => (count, false),
        TokenDescriptor::PatchGrid { .. } => {
            return Err(Error::Config("broadcast source must be a strip sequence".into()))
        }
    };
    let lines = if horizontal { rows } else { cols };
    if lines % count != 0 && count % lines != 0 {
        return Err(Error::Config(format!(
            "cannot broadcast {count} strips onto {lines} grid lines"
        )));
    }
    let mut index = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let line = if horizontal { r } else { c };
            index.push(line * count / lines);
        }
    }
    let id = g.gather_tokens(strips.id, &index);
    Ok(TokenSequence {
        id,
        descriptor: TokenDescriptor::PatchGrid { rows, cols },
    })
}

/// Inverse of the patch flatten: un-projects nothing (token dim must equal
/// `p*p*C`), places each token's tile back at its grid position.
pub fn tokens_to_map(
    g: &mut Graph,
    tokens: &TokenSequence,
    geom: &TokenGeometry,
) -> Result<NodeId> {
    let TokenDescriptor::PatchGrid { rows, cols } = tokens.descriptor else {
        return Err(Error::Config("tokens_to_map needs a patch-grid sequence".into()));
    };
    let shape = g.shape(tokens.id).to_vec();
    let (b, d) = (shape[0], shape[2]);
    let (p, c) = (geom.p, geom.channels);
    if d != p * p * c {
        return Err(Error::Config(format!(
            "token dim {d} does not equal p^2*C = {}",
            p * p * c
        )));
    }
    let split = g.reshape(tokens.id, &[b, rows, cols, p, p, c]);
    let grouped = g.permute(split, &[0, 1, 3, 2, 4, 5]);
    Ok(g.reshape(grouped, &[b, rows * p, cols * p, c]))
}

fn expect_map(shape: &[usize], geom: &TokenGeometry) -> Result<()> {
    let [_, h, w, c] = shape[..] else {
        return Err(Error::Shape(format!("expected (B,S,S,C) map, got {shape:?}")));
    };
    if h != geom.side || w != geom.side || c != geom.channels {
        return Err(Error::Shape(format!(
            "map {h}x{w}x{c} does not match geometry side {} channels {}",
            geom.side, geom.channels
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
