//! Division strategies over the `h x w` patch-token grid and the compact
//! string notation used to describe a pyramid, e.g. `1x210_105x2_3x70_6p`.
//!
//! Notation, one `_`-separated token per pyramid layer:
//!
//! * `1x<N>`: no division (global branch).
//! * `<t>x<d>` with `t > d`: vertical division into `d` parts of `t` tokens.
//! * `<d>x<t>` with `d < t`: horizontal division into `d` parts of `t` tokens.
//! * `<n>p`: patch division into `n` rectangular blocks.
//!
//! When the size ordering cannot tell vertical from horizontal (equal
//! numbers, or a small grid where `d >= t`), a trailing `v` or `h` selects
//! the direction explicitly: `3x2h` is three horizontal stripes of two
//! tokens. Printing adds the suffix only when it is needed.
//!
//! Vertical parts are equal contiguous chunks of the column-major token
//! order, horizontal parts equal chunks of the row-major order, so a part
//! may split a column or a row when the grid side is not divisible. Patch
//! parts must be exact rectangles and are flattened row-major inside the
//! block, blocks ordered by row band first.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Global,
    Vertical,
    Horizontal,
    Patch,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Global => "global",
            Direction::Vertical => "vertical",
            Direction::Horizontal => "horizontal",
            Direction::Patch => "patch",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One pyramid layer: a direction and its part count. `tokens` is the
/// tokens-per-part figure written in the notation (absent for patch layers).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DivisionLayer {
    pub direction: Direction,
    pub parts: usize,
    pub tokens: Option<usize>,
}

impl DivisionLayer {
    pub fn global(num_tokens: usize) -> Self {
        Self {
            direction: Direction::Global,
            parts: 1,
            tokens: Some(num_tokens),
        }
    }

    pub fn vertical(num_tokens: usize, parts: usize) -> Self {
        Self {
            direction: Direction::Vertical,
            parts,
            tokens: Some(num_tokens / parts),
        }
    }

    pub fn horizontal(num_tokens: usize, parts: usize) -> Self {
        Self {
            direction: Direction::Horizontal,
            parts,
            tokens: Some(num_tokens / parts),
        }
    }

    pub fn patch(parts: usize) -> Self {
        Self {
            direction: Direction::Patch,
            parts,
            tokens: None,
        }
    }
}

impl fmt::Display for DivisionLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.tokens.unwrap_or(0);
        let d = self.parts;
        match self.direction {
            Direction::Global => write!(f, "1x{t}"),
            Direction::Vertical if t > d => write!(f, "{t}x{d}"),
            Direction::Vertical => write!(f, "{t}x{d}v"),
            Direction::Horizontal if d < t && d != 1 => write!(f, "{d}x{t}"),
            Direction::Horizontal => write!(f, "{d}x{t}h"),
            Direction::Patch => write!(f, "{d}p"),
        }
    }
}

/// Ordered list of pyramid layers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DivisionSpec {
    layers: Vec<DivisionLayer>,
}

impl DivisionSpec {
    pub fn new(layers: Vec<DivisionLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::DivisionSpec {
                spec: String::new(),
                reason: "at least one layer is required".into(),
            });
        }
        if let Some(l) = layers.iter().find(|l| l.parts == 0) {
            return Err(Error::DivisionSpec {
                spec: l.to_string(),
                reason: "part count must be positive".into(),
            });
        }
        Ok(Self { layers })
    }

    /// Global, vertical, horizontal and patch layers with `D_p = D_v * D_h`.
    pub fn four_layer(num_tokens: usize, d_v: usize, d_h: usize) -> Self {
        Self {
            layers: alloc::vec![
                DivisionLayer::global(num_tokens),
                DivisionLayer::vertical(num_tokens, d_v),
                DivisionLayer::horizontal(num_tokens, d_h),
                DivisionLayer::patch(d_v * d_h),
            ],
        }
    }

    pub fn global_only(num_tokens: usize) -> Self {
        Self {
            layers: alloc::vec![DivisionLayer::global(num_tokens)],
        }
    }

    pub fn layers(&self) -> &[DivisionLayer] {
        &self.layers
    }

    /// Part count of the first layer with the given direction.
    pub fn parts(&self, direction: Direction) -> Option<usize> {
        self.layers
            .iter()
            .find(|l| l.direction == direction)
            .map(|l| l.parts)
    }

    pub fn d_v(&self) -> Option<usize> {
        self.parts(Direction::Vertical)
    }

    pub fn d_h(&self) -> Option<usize> {
        self.parts(Direction::Horizontal)
    }

    pub fn d_p(&self) -> Option<usize> {
        self.parts(Direction::Patch)
    }

    pub fn is_enabled(&self, direction: Direction) -> bool {
        self.parts(direction).is_some()
    }

    /// Number of pyramid entries: one per part over all layers.
    pub fn num_branches(&self) -> usize {
        self.layers.iter().map(|l| l.parts).sum()
    }

    /// Checks the division against an `h x w` grid and computes token indices
    /// (0-based into `P^m`) for every part.
    pub fn resolve(&self, h: usize, w: usize) -> Result<ResolvedDivision> {
        let n = h * w;
        let err = |layer: &DivisionLayer, reason: String| Error::DivisionSpec {
            spec: layer.to_string(),
            reason,
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if let Some(t) = layer.tokens {
                if t * layer.parts != n {
                    return Err(err(
                        layer,
                        format!(
                            "{} parts of {t} tokens do not cover the {n} tokens of a {h}x{w} grid",
                            layer.parts
                        ),
                    ));
                }
            }
            let (parts, factors) = match layer.direction {
                Direction::Global => (alloc::vec![(0..n).collect()], None),
                Direction::Vertical => (divide_vertical(h, w, layer.parts)?, None),
                Direction::Horizontal => (divide_horizontal(h, w, layer.parts)?, None),
                Direction::Patch => {
                    let (d_v, d_h) = self.patch_factors(layer.parts, h, w).ok_or_else(|| {
                        err(
                            layer,
                            format!(
                                "no {}-block rectangular tiling of a {h}x{w} grid",
                                layer.parts
                            ),
                        )
                    })?;
                    (divide_patch(h, w, d_v, d_h)?, Some((d_v, d_h)))
                }
            };
            layers.push(ResolvedLayer {
                layer: *layer,
                factors,
                parts,
            });
        }
        Ok(ResolvedDivision {
            spec: self.clone(),
            height: h,
            width: w,
            layers,
        })
    }

    /// Picks `(D_v, D_h)` for an `n`-block patch layer: the first aligned
    /// pair of vertical and horizontal part counts present in the division,
    /// otherwise the aligned factorisation with the squarest blocks.
    fn patch_factors(&self, n: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let aligned = |d_v: usize, d_h: usize| d_v * d_h == n && w % d_v == 0 && h % d_h == 0;
        let of = |dir| self.layers.iter().filter(move |l| l.direction == dir).map(|l| l.parts);
        for d_v in of(Direction::Vertical) {
            for d_h in of(Direction::Horizontal) {
                if aligned(d_v, d_h) {
                    return Some((d_v, d_h));
                }
            }
        }
        (1..=n)
            .filter(|d_v| n % d_v == 0 && aligned(*d_v, n / d_v))
            .map(|d_v| (d_v, n / d_v))
            .min_by_key(|&(d_v, d_h)| ((h / d_h).abs_diff(w / d_v), d_v))
    }
}

impl fmt::Display for DivisionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("_")?;
            }
            write!(f, "{layer}")?;
        }
        Ok(())
    }
}

impl FromStr for DivisionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let fail = |reason: String| Error::DivisionSpec {
            spec: s.into(),
            reason,
        };
        let mut layers = Vec::new();
        for token in s.trim().split('_') {
            layers.push(parse_layer(token).map_err(|reason| fail(format!("`{token}`: {reason}")))?);
        }
        Self::new(layers).map_err(|e| match e {
            Error::DivisionSpec { reason, .. } => fail(reason),
            other => other,
        })
    }
}

fn parse_layer(token: &str) -> core::result::Result<DivisionLayer, String> {
    let number = |t: &str| -> core::result::Result<usize, String> {
        match t.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("expected a positive integer, found `{t}`")),
        }
    };
    if let Some(n) = token.strip_suffix('p') {
        return Ok(DivisionLayer::patch(number(n)?));
    }
    let (body, suffix) = match token.strip_suffix('v') {
        Some(b) => (b, Some('v')),
        None => match token.strip_suffix('h') {
            Some(b) => (b, Some('h')),
            None => (token, None),
        },
    };
    let (a, b) = body
        .split_once('x')
        .or_else(|| body.split_once('\u{d7}'))
        .ok_or_else(|| "expected `<a>x<b>` or `<n>p`".to_string())?;
    let (a, b) = (number(a)?, number(b)?);
    let vertical = DivisionLayer {
        direction: Direction::Vertical,
        parts: b,
        tokens: Some(a),
    };
    let horizontal = DivisionLayer {
        direction: Direction::Horizontal,
        parts: a,
        tokens: Some(b),
    };
    match suffix {
        Some('v') => Ok(vertical),
        Some(_) => Ok(horizontal),
        None if a == 1 => Ok(DivisionLayer {
            direction: Direction::Global,
            parts: 1,
            tokens: Some(b),
        }),
        None if a > b => Ok(vertical),
        None if a < b => Ok(horizontal),
        None => Err("ambiguous direction, append `v` or `h`".into()),
    }
}

/// A division spec checked against a concrete grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedDivision {
    pub spec: DivisionSpec,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<ResolvedLayer>,
}

impl ResolvedDivision {
    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn num_branches(&self) -> usize {
        self.layers.iter().map(|l| l.parts.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedLayer {
    pub layer: DivisionLayer,
    /// `(D_v, D_h)` of a patch layer.
    pub factors: Option<(usize, usize)>,
    /// Token indices of each part, in sequence order.
    pub parts: Vec<Vec<usize>>,
}

fn chunk(order: Vec<usize>, parts: usize, what: &'static str) -> Result<Vec<Vec<usize>>> {
    if parts == 0 || order.len() % parts != 0 {
        return Err(Error::Indivisible {
            what,
            total: order.len(),
            parts,
        });
    }
    Ok(order.chunks(order.len() / parts).map(|c| c.to_vec()).collect())
}

/// Vertical bands: equal chunks of the column-major order (top to bottom
/// within a column, then the next column).
pub fn divide_vertical(h: usize, w: usize, d_v: usize) -> Result<Vec<Vec<usize>>> {
    let order = (0..w).flat_map(|q| (0..h).map(move |r| r * w + q)).collect();
    chunk(order, d_v, "vertical division of the token grid")
}

/// Horizontal stripes: equal chunks of the row-major order.
pub fn divide_horizontal(h: usize, w: usize, d_h: usize) -> Result<Vec<Vec<usize>>> {
    chunk((0..h * w).collect(), d_h, "horizontal division of the token grid")
}

/// `D_v * D_h` rectangular blocks of `(h / D_h) x (w / D_v)` tokens, each
/// flattened row-major, ordered by row band then column band.
pub fn divide_patch(h: usize, w: usize, d_v: usize, d_h: usize) -> Result<Vec<Vec<usize>>> {
    if d_v == 0 || w % d_v != 0 {
        return Err(Error::Indivisible {
            what: "patch division of the grid width",
            total: w,
            parts: d_v,
        });
    }
    if d_h == 0 || h % d_h != 0 {
        return Err(Error::Indivisible {
            what: "patch division of the grid height",
            total: h,
            parts: d_h,
        });
    }
    let (bh, bw) = (h / d_h, w / d_v);
    let mut blocks = Vec::with_capacity(d_v * d_h);
    for band in 0..d_h {
        for col in 0..d_v {
            let mut block = Vec::with_capacity(bh * bw);
            for r in band * bh..(band + 1) * bh {
                for q in col * bw..(col + 1) * bw {
                    block.push(r * w + q);
                }
            }
            blocks.push(block);
        }
    }
    Ok(blocks)
}
