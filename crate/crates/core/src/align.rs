//! Restoring pixel correspondence between the two views' feature maps.
//!
//! All functions here assume feature maps have already been flipped back,
//! so a map cell `(i, j)` always refers to the unflipped crop geometry.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::views::ViewSpec;

/// Box relative to a view's own extent, all coordinates in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RelBox {
    pub const FULL: RelBox = RelBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AlignMode {
    Roi,
    #[default]
    Offset,
    None,
}

impl AlignMode {
    pub const ALL: [AlignMode; 3] = [AlignMode::Roi, AlignMode::Offset, AlignMode::None];
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::Roi => "roi",
            AlignMode::Offset => "offset",
            AlignMode::None => "none",
        })
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "roi" => Ok(AlignMode::Roi),
            "offset" => Ok(AlignMode::Offset),
            "none" => Ok(AlignMode::None),
            other => Err(Error::config(
                "alignment",
                format!("invalid value `{other}`, expected one of roi, offset, none"),
            )),
        }
    }
}

/// Source-image coordinate of the center of grid cell `(i, j)` of an
/// `h` x `w` grid laid over the view. A flipped view mirrors the column.
pub fn grid_coord(spec: &ViewSpec, i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
    let col = if spec.flipped { w - 1 - j } else { j };
    let c = &spec.crop;
    let x = c.x0 + (col as f64 + 0.5) * (c.width() / w as f64);
    let y = c.y0 + (i as f64 + 0.5) * (c.height() / h as f64);
    (x, y)
}

/// Mirrors a `[C, H, W]` map horizontally when the view was flipped.
pub fn flip_back(tape: &mut Tape, map: Var, flipped: bool) -> Var {
    if flipped {
        tape.flip_w(map)
    } else {
        map
    }
}

/// Intersection of the two crops relative to each view's extent.
pub fn intersection_relative(spec_a: &ViewSpec, spec_b: &ViewSpec) -> Result<(RelBox, RelBox)> {
    let inter = spec_a
        .crop
        .intersection(&spec_b.crop)
        .ok_or(Error::EmptyIntersection)?;
    let rel = |s: &ViewSpec| {
        let c = &s.crop;
        RelBox {
            x0: ((inter.x0 - c.x0) / c.width()).clamp(0.0, 1.0),
            y0: ((inter.y0 - c.y0) / c.height()).clamp(0.0, 1.0),
            x1: ((inter.x1 - c.x0) / c.width()).clamp(0.0, 1.0),
            y1: ((inter.y1 - c.y0) / c.height()).clamp(0.0, 1.0),
        }
    };
    Ok((rel(spec_a), rel(spec_b)))
}

/// Bilinear RoI pooling of a `[C, H, W]` map onto an `out_h` x `out_w` grid.
pub fn roi_align(tape: &mut Tape, map: Var, roi: RelBox, out_h: usize, out_w: usize) -> Result<Var> {
    tape.roi_align(map, roi.as_array(), out_h, out_w)
}

/// `[2, H, W]` map of per-cell coordinate differences from view `a` to view `b`.
///
/// With `normalize`, each axis is divided by the grid span of view `a`
/// (`coord(H, W) - coord(1, 1)`). Coordinates are those of the flipped-back grids.
pub fn offset_map(spec_a: &ViewSpec, spec_b: &ViewSpec, h: usize, w: usize, normalize: bool) -> Tensor {
    let unflip = |s: &ViewSpec| ViewSpec {
        flipped: false,
        ..*s
    };
    let (a, b) = (unflip(spec_a), unflip(spec_b));
    let (span_x, span_y) = if normalize {
        let first = grid_coord(&a, 0, 0, h, w);
        let last = grid_coord(&a, h - 1, w - 1, h, w);
        let nz = |v: f64| if v != 0.0 { v } else { 1.0 };
        (nz(last.0 - first.0), nz(last.1 - first.1))
    } else {
        (1.0, 1.0)
    };
    let mut data = vec![0.0; 2 * h * w];
    for i in 0..h {
        for j in 0..w {
            let (ax, ay) = grid_coord(&a, i, j, h, w);
            let (bx, by) = grid_coord(&b, i, j, h, w);
            data[i * w + j] = (bx - ax) / span_x;
            data[h * w + i * w + j] = (by - ay) / span_y;
        }
    }
    Tensor::new([2, h, w], data).expect("offset map shape")
}

#[derive(Clone, Copy, Debug)]
pub struct AlignedPair {
    pub online: Var,
    pub target: Var,
    pub mode: AlignMode,
}

/// Aligns flipped-back online and target maps.
///
/// * `Roi`: both maps pooled over the crop intersection at their own resolution.
/// * `Offset`: the online map gains two offset channels; the target is unchanged.
/// * `None`: both maps pass through.
pub fn align_pair(
    tape: &mut Tape,
    online: Var,
    target: Var,
    spec_a: &ViewSpec,
    spec_b: &ViewSpec,
    mode: AlignMode,
    normalize_offset: bool,
) -> Result<AlignedPair> {
    let (so, st) = (tape.shape(online).to_vec(), tape.shape(target).to_vec());
    if so.len() != 3 || st.len() != 3 || so[1..] != st[1..] {
        return Err(Error::ShapeMismatch {
            op: "align_pair",
            lhs: so,
            rhs: st,
        });
    }
    let (h, w) = (so[1], so[2]);
    let (online, target) = match mode {
        AlignMode::None => (online, target),
        AlignMode::Roi => {
            let (ra, rb) = intersection_relative(spec_a, spec_b)?;
            (roi_align(tape, online, ra, h, w)?, roi_align(tape, target, rb, h, w)?)
        }
        AlignMode::Offset => {
            let offsets = tape.constant(offset_map(spec_a, spec_b, h, w, normalize_offset));
            (tape.concat(&[online, offsets], 0)?, target)
        }
    };
    Ok(AlignedPair {
        online,
        target,
        mode,
    })
}
