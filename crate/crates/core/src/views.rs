//! Positive view pairs: IoU-constrained random crops and their rendering.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Axis-aligned box in continuous source-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CropBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn intersection(&self, other: &CropBox) -> Option<CropBox> {
        let b = CropBox::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        );
        b.is_valid().then_some(b)
    }

    pub fn scaled(&self, s: f64) -> CropBox {
        CropBox::new(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.is_valid()
            && self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= width as f64
            && self.y1 <= height as f64
    }
}

pub fn compute_iou(a: &CropBox, b: &CropBox) -> f64 {
    let inter = a.intersection(b).map_or(0.0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Photometric recipe of one view. Factors are `1 + delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotoParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale: bool,
    pub blur_sigma: f64,
    pub solarize: bool,
}

impl PhotoParams {
    pub const NEUTRAL: PhotoParams = PhotoParams {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
        grayscale: false,
        blur_sigma: 0.0,
        solarize: false,
    };
}

impl Default for PhotoParams {
    fn default() -> Self {
        Self::NEUTRAL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub crop: CropBox,
    pub flipped: bool,
    pub photometric: PhotoParams,
    /// `(height, width)` of the rendered view in pixels.
    pub out_size: (usize, usize),
}

impl ViewSpec {
    /// The whole image rendered at native resolution with no augmentation.
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            crop: CropBox::full(width, height),
            flipped: false,
            photometric: PhotoParams::NEUTRAL,
            out_size: (height, width),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub spec_a: ViewSpec,
    pub spec_b: ViewSpec,
    pub iou: f64,
}

/// Per-view photometric sampling probabilities and magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotoConfig {
    pub jitter_prob: f64,
    pub max_brightness: f64,
    pub max_contrast: f64,
    pub max_saturation: f64,
    pub max_hue: f64,
    pub grayscale_prob: f64,
    /// Blur probability for the first and second view.
    pub blur_prob: [f64; 2],
    /// Blur sigma range in output pixels.
    pub blur_sigma: (f64, f64),
    pub solarize_prob: [f64; 2],
}

impl PhotoConfig {
    /// BYOL-style augmentation with the blur range rescaled to `out_width`.
    pub fn byol(out_width: usize) -> Self {
        let s = out_width as f64 / 224.0;
        Self {
            jitter_prob: 0.8,
            max_brightness: 0.4,
            max_contrast: 0.4,
            max_saturation: 0.2,
            max_hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: [1.0, 0.1],
            blur_sigma: (0.1 * s, 2.0 * s),
            solarize_prob: [0.0, 0.2],
        }
    }

    pub fn disabled() -> Self {
        Self {
            jitter_prob: 0.0,
            max_brightness: 0.0,
            max_contrast: 0.0,
            max_saturation: 0.0,
            max_hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: [0.0, 0.0],
            blur_sigma: (0.0, 0.0),
            solarize_prob: [0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub iou_threshold: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Aspect ratio (width / height) range, sampled log-uniformly.
    pub aspect_range: (f64, f64),
    pub max_attempts: usize,
    pub out_size: (usize, usize),
    pub flip_prob: f64,
    pub photo: PhotoConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            min_scale: 0.08,
            max_scale: 1.0,
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            max_attempts: 100,
            out_size: (64, 64),
            flip_prob: 0.5,
            photo: PhotoConfig::byol(64),
        }
    }
}

/// One random-resized-crop box inside a `width` x `height` image.
pub fn sample_crop_box(width: usize, height: usize, cfg: &SamplerConfig, rng: &mut Rng) -> CropBox {
    let (w, h) = (width as f64, height as f64);
    let area = w * h;
    let (log_lo, log_hi) = (cfg.aspect_range.0.ln(), cfg.aspect_range.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(cfg.min_scale..=cfg.max_scale);
        let aspect = if log_hi > log_lo {
            rng.gen_range(log_lo..log_hi).exp()
        } else {
            cfg.aspect_range.0
        };
        let cw = (target * aspect).sqrt();
        let ch = (target / aspect).sqrt();
        if cw > 0.0 && ch > 0.0 && cw <= w && ch <= h {
            let x0 = rng.gen_range(0.0..=w - cw);
            let y0 = rng.gen_range(0.0..=h - ch);
            return CropBox::new(x0, y0, (x0 + cw).min(w), (y0 + ch).min(h));
        }
    }
    // Central crop clamped to the aspect range.
    let ratio = w / h;
    let (cw, ch) = if ratio < cfg.aspect_range.0 {
        (w, w / cfg.aspect_range.0)
    } else if ratio > cfg.aspect_range.1 {
        (h * cfg.aspect_range.1, h)
    } else {
        (w, h)
    };
    let x0 = (w - cw) / 2.0;
    let y0 = (h - ch) / 2.0;
    CropBox::new(x0, y0, x0 + cw, y0 + ch)
}

fn sample_photo(cfg: &PhotoConfig, view: usize, rng: &mut Rng) -> PhotoParams {
    let sym = |m: f64, rng: &mut Rng| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let mut p = PhotoParams::NEUTRAL;
    if rng.gen_bool(cfg.jitter_prob) {
        p.brightness = sym(cfg.max_brightness, rng);
        p.contrast = sym(cfg.max_contrast, rng);
        p.saturation = sym(cfg.max_saturation, rng);
        p.hue = sym(cfg.max_hue, rng);
    }
    p.grayscale = rng.gen_bool(cfg.grayscale_prob);
    if rng.gen_bool(cfg.blur_prob[view]) && cfg.blur_sigma.1 > 0.0 {
        p.blur_sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
    }
    p.solarize = rng.gen_bool(cfg.solarize_prob[view]);
    p
}

/// Draws crop pairs until their IoU reaches the threshold.
///
/// Both boxes are resampled on every attempt. After `max_attempts` failures
/// the pair with the highest IoU seen is returned. IoU is measured on the
/// unflipped source boxes.
pub fn sample_view_pair(
    image_size: (usize, usize),
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> ViewPair {
    let (width, height) = image_size;
    let mut best: Option<(CropBox, CropBox, f64)> = None;
    for _ in 0..cfg.max_attempts.max(1) {
        let a = sample_crop_box(width, height, cfg, rng);
        let b = sample_crop_box(width, height, cfg, rng);
        let iou = compute_iou(&a, &b);
        if best.is_none_or(|(_, _, v)| iou > v) {
            best = Some((a, b, iou));
        }
        if iou >= cfg.iou_threshold {
            break;
        }
    }
    let (a, b, iou) = best.expect("at least one attempt");
    let view = |crop: CropBox, idx: usize, rng: &mut Rng| ViewSpec {
        crop,
        flipped: rng.gen_bool(cfg.flip_prob),
        photometric: sample_photo(&cfg.photo, idx, rng),
        out_size: cfg.out_size,
    };
    let spec_a = view(a, 0, rng);
    let spec_b = view(b, 1, rng);
    ViewPair {
        spec_a,
        spec_b,
        iou,
    }
}

fn bilinear_sample(plane: &[f64], w: usize, h: usize, px: f64, py: f64) -> f64 {
    let px = px.clamp(0.0, (w - 1) as f64);
    let py = py.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    (1.0 - fy) * ((1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1])
        + fy * ((1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1])
}

/// Geometric half of rendering: crop, resize and optional flip.
pub fn resample(image: &Tensor, spec: &ViewSpec) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = spec.out_size;
    let sx = spec.crop.width() / ow as f64;
    let sy = spec.crop.height() / oh as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let py = spec.crop.y0 + (i as f64 + 0.5) * sy - 0.5;
            for j in 0..ow {
                let px = spec.crop.x0 + (j as f64 + 0.5) * sx - 0.5;
                let oj = if spec.flipped { ow - 1 - j } else { j };
                out[(ch * oh + i) * ow + oj] = bilinear_sample(plane, w, h, px, py);
            }
        }
    }
    Tensor::new([c, oh, ow], out).expect("rendered shape")
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur_plane(plane: &mut [f64], w: usize, h: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[i * w + clampi(j as isize + k as isize - r, w)])
                .sum();
        }
    }
    for i in 0..h {
        for j in 0..w {
            plane[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clampi(i as isize + k as isize - r, h) * w + j])
                .sum();
        }
    }
}

/// Photometric half of rendering, applied to an RGB `[3, H, W]` view in the
/// order jitter, grayscale, blur, solarize. Values are clamped to `[0, 1]`.
pub fn apply_photometric(view: &Tensor, p: &PhotoParams) -> Tensor {
    let s = view.shape();
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let mut d = view.data().to_vec();
    let clamp = |d: &mut [f64]| d.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));

    if p.brightness != 0.0 {
        d.iter_mut().for_each(|x| *x *= 1.0 + p.brightness);
        clamp(&mut d);
    }
    if p.contrast != 0.0 {
        let mean = (0..n).map(|k| luma(d[k], d[n + k], d[2 * n + k])).sum::<f64>() / n as f64;
        d.iter_mut().for_each(|x| *x = (*x - mean) * (1.0 + p.contrast) + mean);
        clamp(&mut d);
    }
    if p.saturation != 0.0 {
        for k in 0..n {
            let g = luma(d[k], d[n + k], d[2 * n + k]);
            for c in 0..3 {
                d[c * n + k] = (d[c * n + k] - g) * (1.0 + p.saturation) + g;
            }
        }
        clamp(&mut d);
    }
    if p.hue != 0.0 {
        // Rotate chroma in YIQ space by hue * 2π.
        let (sin, cos) = (p.hue * std::f64::consts::TAU).sin_cos();
        for k in 0..n {
            let (r, g, b) = (d[k], d[n + k], d[2 * n + k]);
            let y = luma(r, g, b);
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i, q) = (i * cos - q * sin, i * sin + q * cos);
            d[k] = y + 0.956 * i + 0.621 * q;
            d[n + k] = y - 0.272 * i - 0.647 * q;
            d[2 * n + k] = y - 1.106 * i + 1.703 * q;
        }
        clamp(&mut d);
    }
    if p.grayscale {
        for k in 0..n {
            let g = luma(d[k], d[n + k], d[2 * n + k]);
            for c in 0..3 {
                d[c * n + k] = g;
            }
        }
    }
    if p.blur_sigma > 0.0 {
        let kernel = gaussian_kernel(p.blur_sigma);
        for plane in d.chunks_mut(n) {
            blur_plane(plane, w, h, &kernel);
        }
    }
    if p.solarize {
        d.iter_mut().for_each(|x| {
            if *x >= 0.5 {
                *x = 1.0 - *x
            }
        });
    }
    clamp(&mut d);
    Tensor::new(s.to_vec(), d).expect("same shape")
}

/// Renders a view: bilinear crop-resize, flip, then photometric ops.
pub fn render_view(image: &Tensor, spec: &ViewSpec) -> Tensor {
    apply_photometric(&resample(image, spec), &spec.photometric)
}
