//! Clustering probes of frozen backbones and cluster-map rendering.
//!
//! A probe runs per-image K-means on backbone feature maps and scores the
//! clusters against ground-truth masks with the adjusted Rand index, which
//! ignores how cluster labels are numbered.

use std::collections::HashMap;
use std::fs;
use std::hash::Hash;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{downsample_mask, LabeledImage};
use crate::error::{Error, Result};
use crate::network::{Network, Params};
use crate::objective::{kmeans, KMeansMetric};
use crate::rng::{stream, Stream};
use crate::tensor::{Tape, Tensor};
use crate::trainer::feature_std;

/// Fixed cluster colors; cluster `c` gets `PALETTE[c % 8]`.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
    [128, 128, 128],
];

fn comb2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index of two labelings of the same items.
///
/// When both labelings are trivial in the same way (one cluster each, or all
/// singletons) the index is undefined; this returns 1 there.
pub fn adjusted_rand_index<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Copy + Eq + Hash,
    B: Copy + Eq + Hash,
{
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let mut table: HashMap<(A, B), u64> = HashMap::new();
    let mut rows: HashMap<A, u64> = HashMap::new();
    let mut cols: HashMap<B, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| comb2(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| comb2(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| comb2(n)).sum();
    let total = comb2(a.len() as u64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Clustering scores of one backbone over a held-out set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BackboneProbe {
    /// Mean per-image ARI against instance masks (background is a segment).
    pub ari_instance: f64,
    pub ari_class: f64,
    /// Spread of unit-normalized pooled features across the set.
    pub feature_std: f64,
    /// Row-major cluster index per feature cell, one entry per image.
    #[serde(skip)]
    pub cluster_maps: Vec<Vec<usize>>,
}

/// Trained backbone against a random initialization on the same images.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub trained: BackboneProbe,
    pub random_init: BackboneProbe,
    pub margin_instance: f64,
    pub margin_class: f64,
}

impl ProbeReport {
    pub fn new(trained: BackboneProbe, random_init: BackboneProbe) -> Self {
        Self {
            margin_instance: trained.ari_instance - random_init.ari_instance,
            margin_class: trained.ari_class - random_init.ari_class,
            trained,
            random_init,
        }
    }
}

/// Clusters each `[C, h, w]` map and scores it against masks already at `h` x `w`.
pub fn cluster_and_score(
    features: &[Tensor],
    instance_masks: &[Vec<u16>],
    class_masks: &[Vec<u8>],
    k: usize,
    metric: KMeansMetric,
    seed: u64,
) -> Result<BackboneProbe> {
    if features.is_empty() || features.len() != instance_masks.len() || features.len() != class_masks.len() {
        return Err(Error::InvalidShape {
            op: "cluster_and_score",
            detail: format!(
                "{} feature maps, {} instance masks, {} class masks",
                features.len(),
                instance_masks.len(),
                class_masks.len()
            ),
        });
    }
    let per_image: Vec<(Vec<usize>, f64, f64)> = features
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let cells = f.shape()[1] * f.shape()[2];
            if instance_masks[i].len() != cells || class_masks[i].len() != cells {
                return Err(Error::ShapeMismatch {
                    op: "cluster_and_score",
                    lhs: f.shape().to_vec(),
                    rhs: vec![instance_masks[i].len()],
                });
            }
            let r = kmeans(f, k, metric, 10, &mut stream(seed, Stream::Probe, &[i as u64]))?;
            let ai = adjusted_rand_index(&r.assignments, &instance_masks[i]);
            let ac = adjusted_rand_index(&r.assignments, &class_masks[i]);
            Ok((r.assignments, ai, ac))
        })
        .collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let pooled: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let cells = (f.shape()[1] * f.shape()[2]) as f64;
            f.data().chunks(f.shape()[1] * f.shape()[2]).map(|c| c.iter().sum::<f64>() / cells).collect()
        })
        .collect();
    Ok(BackboneProbe {
        ari_instance: per_image.iter().map(|p| p.1).sum::<f64>() / n,
        ari_class: per_image.iter().map(|p| p.2).sum::<f64>() / n,
        feature_std: feature_std(&pooled),
        cluster_maps: per_image.into_iter().map(|p| p.0).collect(),
    })
}

/// Backbone feature map of a whole, unaugmented image.
pub fn backbone_features(net: &Network, params: &Params, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, params, false);
    let x = tape.constant(image.clone());
    let f = net.backbone_forward(&mut tape, &bound, x)?;
    Ok(tape.value(f).clone())
}

/// Per-image K-means on frozen backbone features against masks downsampled
/// to the feature resolution.
pub fn probe_backbone(
    net: &Network,
    params: &Params,
    images: &[LabeledImage],
    k: usize,
    metric: KMeansMetric,
    seed: u64,
) -> Result<BackboneProbe> {
    let s = net.config().total_stride();
    let features = images
        .par_iter()
        .map(|img| backbone_features(net, params, &img.image))
        .collect::<Result<Vec<_>>>()?;
    let mut inst = Vec::with_capacity(images.len());
    let mut class = Vec::with_capacity(images.len());
    for img in images {
        inst.push(downsample_mask(&img.instance_mask, img.height(), img.width(), s)?);
        class.push(downsample_mask(&img.class_mask, img.height(), img.width(), s)?);
    }
    cluster_and_score(&features, &inst, &class, k, metric, seed)
}

/// Bilinear resize of a `[C, h, w]` map with pixel-center alignment.
pub fn upsample_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let src = |o: usize, n_out: usize, n_in: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), x - i0 as f64)
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let d = map.data();
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for i in 0..out_h {
            let (y0, y1, fy) = src(i, out_h, h);
            for j in 0..out_w {
                let (x0, x1, fx) = src(j, out_w, w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out).expect("upsample shape")
}

/// RGB bytes of a cluster map, one palette color per cluster.
pub fn colorize(assignments: &[usize]) -> Vec<u8> {
    assignments.iter().flat_map(|&c| PALETTE[c % PALETTE.len()]).collect()
}

/// RGB bytes of a `[3, H, W]` image in `[0, 1]`.
pub fn image_rgb(image: &Tensor) -> Vec<u8> {
    let n = image.shape()[1] * image.shape()[2];
    let d = image.data();
    (0..n)
        .flat_map(|p| (0..3).map(move |c| (d[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect()
}

/// Places equally sized RGB panels left to right.
pub fn side_by_side(panels: &[Vec<u8>], h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(panels.len() * h * w * 3);
    for i in 0..h {
        for p in panels {
            out.extend_from_slice(&p[i * w * 3..(i + 1) * w * 3]);
        }
    }
    out
}

/// Cluster map at full image resolution, as used for visualization.
pub fn full_resolution_clusters(
    features: &Tensor,
    h: usize,
    w: usize,
    k: usize,
    metric: KMeansMetric,
    seed: u64,
) -> Result<Vec<usize>> {
    let up = upsample_bilinear(features, h, w);
    Ok(kmeans(&up, k, metric, 10, &mut stream(seed, Stream::Probe, &[u64::MAX]))?.assignments)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::InvalidShape {
            op: "write_ppm",
            detail: format!("{} bytes for {width}x{height}", rgb.len()),
        });
    }
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(rgb);
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a binary PPM with maxval 255; returns `(width, height, rgb)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let buf = fs::read(path)?;
    let bad = |m: &str| Error::InvalidShape {
        op: "read_ppm",
        detail: m.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = buf.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != w * h * 3 {
        return Err(bad("pixel data length"));
    }
    Ok((w, h, data.to_vec()))
}
