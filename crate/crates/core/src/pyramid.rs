//! Multi-direction, multi-scale feature pyramid on top of the trunk output.
//!
//! `z^m = [cls; P^m]` is rearranged into the `h x w` token grid, every
//! pyramid layer divides the grid into parts, each part gets a copy of the
//! class token and runs through that layer's shared encoder layer(s), and
//! only the resulting class tokens are kept. Entries are ordered layer by
//! layer, parts in division order.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::division::{Direction, ResolvedDivision};
use crate::error::{Error, Result};
use crate::init::Sampler;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Var};
use crate::transformer::{
    encoder_layer, encoder_layer_class_row, EncoderLayerParams, TransformerConfig,
};

/// Identifies one pyramid entry: pyramid layer index, its direction and the
/// 1-based part number within the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BranchLabel {
    pub layer: usize,
    pub direction: Direction,
    pub part: usize,
}

impl fmt::Display for BranchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.direction {
            Direction::Global => f.write_str("global"),
            d => write!(f, "{}_{}", d, self.part),
        }
    }
}

/// Per-image (or, after fusion, per-video) stack of class-token features,
/// each `[1, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub entries: Vec<(BranchLabel, Var)>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = BranchLabel> + '_ {
        self.entries.iter().map(|(l, _)| *l)
    }

    pub fn features(&self) -> impl Iterator<Item = Var> + '_ {
        self.entries.iter().map(|(_, v)| *v)
    }
}

/// Patch tokens rearranged on the grid, plus the trunk class token.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    /// `[h, w, c]`
    pub grid: Var,
    /// `[1, c]`
    pub cls: Var,
}

/// Splits `z^m: [N + 1, c]` into the class token and the `h x w` grid.
pub fn rearrange(tape: &mut Tape<'_>, z_m: Var, h: usize, w: usize) -> Result<TokenGrid> {
    let shape = tape.shape(z_m).to_vec();
    if shape.len() != 2 || shape[0] != h * w + 1 {
        return Err(Error::ShapeMismatch {
            op: "rearrange",
            left: shape,
            right: alloc::vec![h * w + 1],
        });
    }
    let cls = tape.slice_rows(z_m, 0, 1)?;
    let tokens = tape.slice_rows(z_m, 1, h * w + 1)?;
    let grid = tape.reshape(tokens, &[h, w, shape[1]])?;
    Ok(TokenGrid { grid, cls })
}

impl TokenGrid {
    /// Gathers each part's tokens (indices into the row-major grid) as a
    /// `[len, c]` sequence.
    pub fn parts(&self, tape: &mut Tape<'_>, parts: &[Vec<usize>]) -> Result<Vec<Var>> {
        let s = tape.shape(self.grid).to_vec();
        let flat = tape.reshape(self.grid, &[s[0] * s[1], s[2]])?;
        parts.iter().map(|p| tape.gather_rows(flat, p)).collect()
    }
}

/// Encoder layers of one pyramid layer; all of its parts share them.
pub type HeadLayers<T> = Vec<EncoderLayerParams<T>>;

/// One set of head layers (`depth` encoder layers) per pyramid layer.
pub fn init_heads(
    store: &mut ParamStore,
    sampler: &mut Sampler,
    division: &ResolvedDivision,
    depth: usize,
    cfg: &TransformerConfig,
) -> Vec<HeadLayers<ParamId>> {
    division
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            (0..depth)
                .map(|d| {
                    EncoderLayerParams::init(
                        store,
                        sampler,
                        &format!("pyramid.{i}.{}.{d}", l.layer.direction),
                        cfg,
                        ParamGroup::Pyramid,
                    )
                })
                .collect()
        })
        .collect()
}

/// Runs `[cls; part]` through the head layers and keeps the class token.
/// Returns the feature `[1, c]` and the last layer's class-token attention
/// `[heads, 1, len + 1]`.
pub fn run_head_with_attention(
    tape: &mut Tape<'_>,
    cls: Var,
    part: Var,
    layers: &[EncoderLayerParams<Var>],
    cfg: &TransformerConfig,
) -> Result<(Var, Option<Var>)> {
    let mut z = tape.concat_rows(&[cls, part])?;
    let Some((last, init)) = layers.split_last() else {
        return Ok((tape.slice_rows(z, 0, 1)?, None));
    };
    for p in init {
        z = encoder_layer(tape, z, p, cfg)?;
    }
    let (feature, attn) = encoder_layer_class_row(tape, z, last, cfg)?;
    Ok((feature, Some(attn)))
}

pub fn run_head(
    tape: &mut Tape<'_>,
    cls: Var,
    part: Var,
    layers: &[EncoderLayerParams<Var>],
    cfg: &TransformerConfig,
) -> Result<Var> {
    Ok(run_head_with_attention(tape, cls, part, layers, cfg)?.0)
}

/// A pyramid together with each entry's class-token attention.
pub struct PyramidWithAttention {
    pub pyramid: FeaturePyramid,
    pub attention: Vec<Option<Var>>,
}

pub fn build_pyramid_with_attention(
    tape: &mut Tape<'_>,
    z_m: Var,
    division: &ResolvedDivision,
    heads: &[HeadLayers<Var>],
    cfg: &TransformerConfig,
) -> Result<PyramidWithAttention> {
    if heads.len() != division.layers.len() {
        return Err(Error::StructureMismatch);
    }
    let grid = rearrange(tape, z_m, division.height, division.width)?;
    let mut entries = Vec::with_capacity(division.num_branches());
    let mut attention = Vec::with_capacity(division.num_branches());
    for (li, (layer, head)) in division.layers.iter().zip(heads).enumerate() {
        let parts = if layer.layer.direction == Direction::Global {
            // the undivided sequence is z^m itself
            let tokens = tape.slice_rows(z_m, 1, division.num_tokens() + 1)?;
            alloc::vec![tokens]
        } else {
            grid.parts(tape, &layer.parts)?
        };
        for (pi, part) in parts.into_iter().enumerate() {
            let (feature, attn) = run_head_with_attention(tape, grid.cls, part, head, cfg)?;
            entries.push((
                BranchLabel {
                    layer: li,
                    direction: layer.layer.direction,
                    part: pi + 1,
                },
                feature,
            ));
            attention.push(attn);
        }
    }
    Ok(PyramidWithAttention {
        pyramid: FeaturePyramid { entries },
        attention,
    })
}

/// Builds the per-image pyramid `[global; vertical..; horizontal..; patch..]`
/// (in the division's layer order). Layers absent from the division are omitted.
pub fn build_pyramid(
    tape: &mut Tape<'_>,
    z_m: Var,
    division: &ResolvedDivision,
    heads: &[HeadLayers<Var>],
    cfg: &TransformerConfig,
) -> Result<FeaturePyramid> {
    Ok(build_pyramid_with_attention(tape, z_m, division, heads, cfg)?.pyramid)
}
