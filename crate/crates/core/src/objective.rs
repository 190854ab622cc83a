//! Intra-image clustering targets and training objectives.
//!
//! Every target here (K-means centroids, target-network maps, queue entries)
//! enters the tape as a constant, so no gradient can reach it.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::align::{intersection_relative, roi_align};
use crate::error::{Error, Result};
use crate::network::{self_attention_predict, Bound, Network, COS_EPS};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::views::ViewSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KMeansMetric {
    #[default]
    Cosine,
    Euclidean,
}

impl fmt::Display for KMeansMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KMeansMetric::Cosine => "cosine",
            KMeansMetric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for KMeansMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(KMeansMetric::Cosine),
            "euclidean" => Ok(KMeansMetric::Euclidean),
            other => Err(Error::config(
                "kmeans_metric",
                format!("invalid value `{other}`, expected one of cosine, euclidean"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossMode {
    /// Centroid regression against intra-image K-means targets.
    #[default]
    Cluster,
    /// Per-pixel regression against the aligned target map.
    WoKmeans,
    /// Per-pixel InfoNCE with centroid positives and queued negatives.
    Moco,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Cluster => "cluster",
            LossMode::WoKmeans => "wo_kmeans",
            LossMode::Moco => "moco",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(LossMode::Cluster),
            "wo_kmeans" => Ok(LossMode::WoKmeans),
            "moco" => Ok(LossMode::Moco),
            other => Err(Error::config(
                "loss_mode",
                format!("invalid value `{other}`, expected one of cluster, wo_kmeans, moco"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// `[K, C]`
    pub centroids: Tensor,
    /// Row-major `H*W` cluster indices.
    pub assignments: Vec<usize>,
    /// `[C, H, W]`, each pixel replaced by its centroid.
    pub centroid_map: Tensor,
    /// Sum of squared distances to assigned centroids.
    pub cost: f64,
    /// Cost after every assignment step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
    v.iter().map(|x| x / n).collect()
}

/// k-means++ seeding.
pub fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            // Guard against landing on a zero-weight tail through rounding.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().expect("non-empty")));
        }
    }
    centers
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

/// Lloyd iterations from explicit initial centroids.
///
/// Empty clusters are repaired by moving the point farthest from its
/// centroid (taken from a cluster with more than one member) into them.
/// Stops once assignments are stable or after `max_iter` assignment steps.
pub fn lloyd(points: &[Vec<f64>], init: Vec<Vec<f64>>, max_iter: usize) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let k = init.len();
    let dim = points[0].len();
    let mut centers = init;
    let mut history = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut assignments = Vec::new();
    for _ in 0..max_iter.max(1) {
        let (mut a, mut d) = assign(points, &centers);
        let mut counts = vec![0usize; k];
        a.iter().for_each(|&c| counts[c] += 1);
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let donor = (0..points.len())
                .filter(|&i| counts[a[i]] > 1)
                .max_by(|&i, &j| d[i].total_cmp(&d[j]).then(j.cmp(&i)));
            if let Some(i) = donor {
                counts[a[i]] -= 1;
                counts[c] += 1;
                a[i] = c;
                d[i] = 0.0;
                centers[c] = points[i].clone();
            }
        }
        history.push(d.iter().sum());
        let stable = previous.as_ref() == Some(&a);
        assignments = a;
        if stable {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &c) in points.iter().zip(&assignments) {
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        previous = Some(assignments.clone());
    }
    (centers, assignments, history)
}

/// K-means over the pixels of a `[C, H, W]` map.
///
/// The cosine metric unit-normalizes every pixel and then runs Euclidean
/// Lloyd steps (spherical K-means). The result is plain data, never a tape node.
pub fn kmeans(map: &Tensor, k: usize, metric: KMeansMetric, max_iter: usize, rng: &mut Rng) -> Result<ClusterResult> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            op: "kmeans",
            detail: format!("expected [C,H,W], got {s:?}"),
        });
    }
    let (h, w) = (s[1], s[2]);
    if k == 0 || k > h * w {
        return Err(Error::TooManyClusters { k, points: h * w });
    }
    let mut points = map.pixels();
    if metric == KMeansMetric::Cosine {
        points = points.iter().map(|p| normalized(p)).collect();
    }
    let init = kmeans_pp_init(&points, k, rng);
    let (centers, assignments, history) = lloyd(&points, init, max_iter);
    debug_assert!(
        history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0)),
        "Lloyd cost increased: {history:?}"
    );
    let cost = points
        .iter()
        .zip(&assignments)
        .map(|(p, &c)| sq_dist(p, &centers[c]))
        .sum();
    let map_pixels: Vec<Vec<f64>> = assignments.iter().map(|&c| centers[c].clone()).collect();
    Ok(ClusterResult {
        centroids: Tensor::new([k, s[0]], centers.concat())?,
        assignments,
        centroid_map: Tensor::from_pixels(&map_pixels, h, w)?,
        cost,
        iterations: history.len(),
        cost_history: history,
    })
}

fn stop_grad(tape: &mut Tape, v: Var) -> Var {
    if tape.requires_grad(v) {
        tape.detach(v)
    } else {
        v
    }
}

/// `-cos(q, z)` with `z` treated as a constant.
pub fn loss_1d(tape: &mut Tape, q: Var, z: Var) -> Result<Var> {
    let z = stop_grad(tape, z);
    let c = tape.cosine_similarity(q, z, COS_EPS)?;
    Ok(tape.neg(c))
}

/// Mean over pixels of `-cos(Q, centroid)`, or with `dense`, of the mean
/// `-cos(Q, R')` over every target pixel sharing the pixel's cluster.
pub fn loss_2d_cluster(
    tape: &mut Tape,
    q: Var,
    cluster: &ClusterResult,
    dense: bool,
    target: &Tensor,
) -> Result<Var> {
    if tape.shape(q)[1..] != cluster.centroid_map.shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "loss_2d_cluster",
            lhs: tape.shape(q).to_vec(),
            rhs: cluster.centroid_map.shape().to_vec(),
        });
    }
    if !dense {
        let c = tape.constant(cluster.centroid_map.clone());
        let cos = tape.cosine_map(q, c, COS_EPS)?;
        let m = tape.mean(cos);
        return Ok(tape.neg(m));
    }
    let s = tape.shape(q).to_vec();
    let hw = s[1] * s[2];
    let mut sizes = vec![0usize; cluster.centroids.shape()[0]];
    cluster.assignments.iter().for_each(|&a| sizes[a] += 1);
    let mut weights = vec![0.0; hw * hw];
    for (p, &ap) in cluster.assignments.iter().enumerate() {
        for (p2, &ap2) in cluster.assignments.iter().enumerate() {
            if ap == ap2 {
                weights[p * hw + p2] = 1.0 / (hw * sizes[ap]) as f64;
            }
        }
    }
    let qn = tape.l2_normalize(q, 0, COS_EPS)?;
    let qn = tape.reshape(qn, [s[0], hw])?;
    let qt = tape.transpose(qn)?;
    let r = tape.constant(target.clone());
    let rn = tape.l2_normalize(r, 0, COS_EPS)?;
    let rn = tape.reshape(rn, [target.shape()[0], hw])?;
    let cos = tape.matmul(qt, rn)?;
    let wv = tape.constant(Tensor::new([hw, hw], weights)?);
    let weighted = tape.mul(cos, wv)?;
    let total = tape.sum(weighted);
    Ok(tape.neg(total))
}

/// Mean over pixels of `-cos(Q, R')`.
pub fn loss_2d_wo_kmeans(tape: &mut Tape, q: Var, target: Var) -> Result<Var> {
    let target = stop_grad(tape, target);
    let cos = tape.cosine_map(q, target, COS_EPS)?;
    let m = tape.mean(cos);
    Ok(tape.neg(m))
}

/// `λ·l1d + (1 − λ)·l2d`.
pub fn loss_total(tape: &mut Tape, l1d: Var, l2d: Var, lambda: f64) -> Result<Var> {
    let a = tape.scale(l1d, lambda);
    let b = tape.scale(l2d, 1.0 - lambda);
    tape.add(a, b)
}

/// FIFO ring buffer of unit-normalized negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    dim: usize,
    capacity: usize,
    entries: Vec<Vec<f64>>,
    cursor: usize,
}

impl NegativeQueue {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            dim,
            capacity,
            entries: Vec::new(),
            cursor: 0,
        }
    }

    pub fn from_parts(dim: usize, capacity: usize, entries: Vec<Vec<f64>>, cursor: usize) -> Self {
        Self {
            dim,
            capacity,
            entries,
            cursor,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    /// Appends a normalized copy of `v`, evicting the oldest entry when full.
    pub fn push(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.dim);
        if self.capacity == 0 {
            return;
        }
        let v = normalized(v);
        if self.entries.len() < self.capacity {
            self.entries.push(v);
        } else {
            self.entries[self.cursor] = v;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Entries as an `[L, dim]` tensor.
    pub fn as_matrix(&self) -> Tensor {
        Tensor::new([self.entries.len(), self.dim], self.entries.concat()).expect("queue shape")
    }
}

/// Mean per-pixel InfoNCE of a `[C, H, W]` online map.
///
/// Each pixel's positive is the matching pixel of `positives`; negatives are
/// the queue entries. Online pixels and positives are unit-normalized.
pub fn info_nce_pixels(
    tape: &mut Tape,
    online: Var,
    positives: &Tensor,
    queue: &NegativeQueue,
    temperature: f64,
) -> Result<Var> {
    let s = tape.shape(online).to_vec();
    if s != positives.shape() {
        return Err(Error::ShapeMismatch {
            op: "info_nce_pixels",
            lhs: s,
            rhs: positives.shape().to_vec(),
        });
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let gn = tape.l2_normalize(online, 0, COS_EPS)?;
    let gn = tape.reshape(gn, [c, hw])?;
    let k = tape.constant(positives.clone());
    let kn = tape.l2_normalize(k, 0, COS_EPS)?;
    let kn = tape.reshape(kn, [c, hw])?;
    let pos = tape.mul(gn, kn)?;
    let pos = tape.sum_axis(pos, 0)?;
    let mut logits = tape.reshape(pos, [1, hw])?;
    if !queue.is_empty() {
        let negs = tape.constant(queue.as_matrix());
        let neg = tape.matmul(negs, gn)?;
        logits = tape.concat(&[logits, neg], 0)?;
    }
    let logits = tape.scale(logits, 1.0 / temperature);
    let ce = tape.cross_entropy_first(logits)?;
    Ok(tape.mean(ce))
}

#[derive(Clone, Copy, Debug)]
pub struct MocoSettings {
    pub k: usize,
    pub metric: KMeansMetric,
    pub max_iter: usize,
    pub temperature: f64,
    pub self_attention: bool,
    pub residual: bool,
}

/// Output of the per-pixel contrastive variant.
pub struct MocoOutput {
    pub loss: Var,
    /// Normalized target pixel projections, to be queued after the step.
    pub keys: Vec<Vec<f64>>,
    pub cluster: ClusterResult,
}

/// Per-pixel contrastive loss with RoI alignment before the projectors.
///
/// `f_online` and `f_target` are flipped-back backbone maps. The online
/// projector output is aggregated by self-attention over the aligned raw
/// features; the target projection is clustered and its centroids serve as
/// positives.
#[allow(clippy::too_many_arguments)]
pub fn moco_pixel_infonce(
    tape: &mut Tape,
    net: &Network,
    online: &Bound,
    target: &Bound,
    f_online: Var,
    f_target: Var,
    spec_a: &ViewSpec,
    spec_b: &ViewSpec,
    queue: &NegativeQueue,
    settings: MocoSettings,
    rng: &mut Rng,
) -> Result<MocoOutput> {
    let s = tape.shape(f_online).to_vec();
    let (h, w) = (s[1], s[2]);
    let (ra, rb) = intersection_relative(spec_a, spec_b)?;
    let r = roi_align(tape, f_online, ra, h, w)?;
    let r_t = roi_align(tape, f_target, rb, h, w)?;
    let g_local = net.project_2d(tape, online, r)?;
    let g = if settings.self_attention {
        self_attention_predict(tape, r, g_local, settings.residual)?
    } else {
        g_local
    };
    let g_t = net.project_2d(tape, target, r_t)?;
    let g_t = tape.value(g_t).clone();
    let cluster = kmeans(&g_t, settings.k, settings.metric, settings.max_iter, rng)?;
    let loss = info_nce_pixels(tape, g, &cluster.centroid_map, queue, settings.temperature)?;
    let keys = g_t.pixels().iter().map(|p| normalized(p)).collect();
    Ok(MocoOutput { loss, keys, cluster })
}
