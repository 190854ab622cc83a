//! Synthetic multi-instance scenes with ground-truth masks.
//!
//! Each image holds a few disks, rectangles and triangles over a smooth
//! value-noise background. Shape classes have a base color that is jittered
//! per instance, and the background spans a similar intensity range, so
//! intensity alone does not separate instances from background.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSIM";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Disk = 1,
    Rectangle = 2,
    Triangle = 3,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Disk, ShapeClass::Rectangle, ShapeClass::Triangle];

    pub fn label(self) -> u8 {
        self as u8
    }
}

/// Geometry in pixel units; pixel `(i, j)` is covered when its center
/// `(j + 0.5, i + 0.5)` lies inside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { pts } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }

    /// `(x0, y0, x1, y1)` bounding box.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Disk { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Shape::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Shape::Triangle { pts } => pts.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
        }
    }

    /// Row-major coverage mask of an `h` x `w` raster.
    pub fn rasterize(&self, h: usize, w: usize) -> Vec<bool> {
        let mut out = vec![false; h * w];
        for i in 0..h {
            for j in 0..w {
                out[i * w + j] = self.contains(j as f64 + 0.5, i as f64 + 0.5);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive instance count range.
    pub instances: (usize, usize),
    /// Base RGB color of disks, rectangles and triangles.
    pub palette: [[f64; 3]; 3],
    /// Per-channel uniform jitter of instance colors.
    pub color_jitter: f64,
    /// Background value-noise lattice cells per side.
    pub noise_cells: usize,
    /// Background channel values stay within `0.5 ± noise_amplitude`.
    pub noise_amplitude: f64,
    /// Instance size as a fraction of the shorter image side.
    pub size_range: (f64, f64),
    pub max_overlap: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            height: size,
            width: size,
            instances: (2, 5),
            palette: [[0.85, 0.3, 0.25], [0.25, 0.4, 0.85], [0.35, 0.8, 0.3]],
            color_jitter: 0.1,
            noise_cells: 4,
            noise_amplitude: 0.3,
            size_range: (0.12, 0.25),
            max_overlap: 0.3,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Row-major, 0 is background, instances are numbered from 1.
    pub instance_mask: Vec<u16>,
    /// Row-major class labels, 0 is background.
    pub class_mask: Vec<u8>,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(h: usize, w: usize, cells: usize, rng: &mut Rng) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let gy = (i as f64 + 0.5) / h as f64 * cells as f64;
        let y0 = (gy.floor() as usize).min(cells - 1);
        let ty = smoothstep(gy - y0 as f64);
        for j in 0..w {
            let gx = (j as f64 + 0.5) / w as f64 * cells as f64;
            let x0 = (gx.floor() as usize).min(cells - 1);
            let tx = smoothstep(gx - x0 as f64);
            let at = |y: usize, x: usize| lattice[y * n + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn random_shape(class: ShapeClass, spec: &SceneSpec, rng: &mut Rng) -> Shape {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let side = w.min(h);
    let size = side * rng.gen_range(spec.size_range.0..=spec.size_range.1);
    // Keep the whole shape inside the image by sampling its center in the
    // shrunken range; `size` is a circumradius-like extent for every class.
    let cx = rng.gen_range(size..=w - size);
    let cy = rng.gen_range(size..=h - size);
    match class {
        ShapeClass::Disk => Shape::Disk { cx, cy, r: size },
        ShapeClass::Rectangle => {
            let aspect: f64 = rng.gen_range(0.5f64.ln()..2.0f64.ln()).exp();
            let hw = (size * aspect.sqrt()).min(size);
            let hh = (size / aspect.sqrt()).min(size);
            Shape::Rect {
                x0: cx - hw,
                y0: cy - hh,
                x1: cx + hw,
                y1: cy + hh,
            }
        }
        ShapeClass::Triangle => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let step = std::f64::consts::TAU / 3.0;
            let pts = [0.0, 1.0, 2.0].map(|k| (cx + size * (theta + k * step).cos(), cy + size * (theta + k * step).sin()));
            Shape::Triangle { pts }
        }
    }
}

fn generate_one(spec: &SceneSpec, index: u64) -> LabeledImage {
    let (h, w) = (spec.height, spec.width);
    let mut rng = stream(spec.seed, Stream::Corpus, &[index]);
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let noise = value_noise(h, w, spec.noise_cells.max(1), &mut rng);
        for (d, n) in data[c * h * w..(c + 1) * h * w].iter_mut().zip(noise) {
            *d = 0.5 + spec.noise_amplitude * n;
        }
    }
    let target = rng.gen_range(spec.instances.0..=spec.instances.1);
    let mut instance_mask = vec![0u16; h * w];
    let mut class_mask = vec![0u8; h * w];
    let mut placed = 0u16;
    let mut attempts = 0;
    while (placed as usize) < target && attempts < 200 {
        attempts += 1;
        let class = ShapeClass::ALL[rng.gen_range(0..3)];
        let shape = random_shape(class, spec, &mut rng);
        let cover = shape.rasterize(h, w);
        let area = cover.iter().filter(|&&c| c).count();
        if area == 0 {
            continue;
        }
        // Overlap is measured both ways: the share of the new shape already
        // covered, and the share of every existing instance it would hide.
        let mut hidden = vec![0usize; placed as usize + 1];
        for (p, &c) in cover.iter().enumerate() {
            if c {
                hidden[instance_mask[p] as usize] += 1;
            }
        }
        let mut sizes = vec![0usize; placed as usize + 1];
        instance_mask.iter().for_each(|&id| sizes[id as usize] += 1);
        let overlap_new = (area - hidden[0]) as f64 / area as f64;
        let overlap_old = (1..=placed as usize).any(|id| hidden[id] as f64 >= spec.max_overlap * sizes[id] as f64);
        if overlap_new >= spec.max_overlap || overlap_old {
            continue;
        }
        placed += 1;
        let base = spec.palette[class as usize - 1];
        let color: Vec<f64> = base
            .iter()
            .map(|&b| (b + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0))
            .collect();
        for (p, &c) in cover.iter().enumerate() {
            if c {
                instance_mask[p] = placed;
                class_mask[p] = class.label();
                for (ch, &v) in color.iter().enumerate() {
                    data[ch * h * w + p] = v;
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    LabeledImage {
        image: Tensor::new([3, h, w], data).expect("image shape"),
        instance_mask,
        class_mask,
    }
}

/// `n` images; image `i` depends only on the seed and `i`.
///
/// Placement gives up after a bounded number of attempts, so a crowded
/// image may hold fewer instances than requested (never fewer than one in
/// practice at the default sizes).
pub fn generate(spec: &SceneSpec, n: usize) -> Vec<LabeledImage> {
    generate_range(spec, 0, n)
}

/// Images `start..start + n` of the stream defined by `spec`.
pub fn generate_range(spec: &SceneSpec, start: usize, n: usize) -> Vec<LabeledImage> {
    (start..start + n)
        .into_par_iter()
        .map(|i| generate_one(spec, i as u64))
        .collect()
}

/// Majority vote over `s` x `s` blocks; ties go to the lowest label.
pub fn downsample_mask<T: Copy + Ord>(mask: &[T], h: usize, w: usize, s: usize) -> Result<Vec<T>> {
    if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) || mask.len() != h * w {
        return Err(Error::InvalidShape {
            op: "downsample_mask",
            detail: format!("{h}x{w} mask ({} values) with stride {s}", mask.len()),
        });
    }
    let (oh, ow) = (h / s, w / s);
    let mut out = Vec::with_capacity(oh * ow);
    let mut block = Vec::with_capacity(s * s);
    for bi in 0..oh {
        for bj in 0..ow {
            block.clear();
            for i in bi * s..(bi + 1) * s {
                block.extend_from_slice(&mask[i * w + bj * s..i * w + (bj + 1) * s]);
            }
            block.sort_unstable();
            let (mut best, mut best_n) = (block[0], 0);
            let mut k = 0;
            while k < block.len() {
                let run = block[k..].iter().take_while(|&&v| v == block[k]).count();
                // Sorted ascending, so strict `>` keeps the lowest label on ties.
                if run > best_n {
                    best = block[k];
                    best_n = run;
                }
                k += run;
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corpus(msg.into())
}

pub fn write_image(path: &Path, img: &LabeledImage) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let (h16, w16) = (
        u16::try_from(h).map_err(|_| corrupt("height exceeds u16"))?,
        u16::try_from(w).map_err(|_| corrupt("width exceeds u16"))?,
    );
    let mut buf = Vec::with_capacity(8 + h * w * 15);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&h16.to_le_bytes());
    buf.extend_from_slice(&w16.to_le_bytes());
    let d = img.image.data();
    for p in 0..h * w {
        for c in 0..3 {
            buf.extend_from_slice(&(d[c * h * w + p] as f32).to_le_bytes());
        }
    }
    img.instance_mask.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    buf.extend_from_slice(&img.class_mask);
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<LabeledImage> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let h = u16::from_le_bytes([buf[4], buf[5]]) as usize;
    let w = u16::from_le_bytes([buf[6], buf[7]]) as usize;
    let n = h * w;
    if buf.len() != 8 + n * 12 + n * 2 + n {
        return Err(corrupt(format!("expected {} bytes for {h}x{w}, got {}", 8 + n * 15, buf.len())));
    }
    let mut data = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            let o = 8 + (p * 3 + c) * 4;
            data[c * n + p] = f32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes")) as f64;
        }
    }
    let off = 8 + n * 12;
    let instance_mask = (0..n)
        .map(|p| u16::from_le_bytes([buf[off + 2 * p], buf[off + 2 * p + 1]]))
        .collect();
    let class_mask = buf[off + 2 * n..].to_vec();
    Ok(LabeledImage {
        image: Tensor::new([3, h, w], data)?,
        instance_mask,
        class_mask,
    })
}
