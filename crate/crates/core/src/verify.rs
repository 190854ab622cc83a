//! Finite-difference suite over every differentiable operation.
//!
//! Each case builds a scalar from one operation (weighting non-scalar
//! outputs by a fixed random tensor) and compares tape gradients against
//! central differences. Inputs are drawn per seed.

use rand::Rng as _;

use crate::align::{flip_back, roi_align, RelBox};
use crate::error::Result;
use crate::network::{self_attention_predict, Bound, ModelConfig, Network, COS_EPS};
use crate::objective::{
    info_nce_pixels, kmeans, loss_1d, loss_2d_cluster, loss_2d_wo_kmeans, loss_total, KMeansMetric, NegativeQueue,
};
use crate::rng::{stream, Stream};
use crate::tensor::{finite_difference_check, GradCheckReport, Tape, Tensor, Var};

/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn uniform(shape: &[usize], seed: u64, salt: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = stream(seed, Stream::Probe, &[salt]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn random(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    uniform(shape, seed, salt, -1.0, 1.0)
}

/// `Σ out ⊙ w` for a constant `w` shaped like `out`.
fn weighted(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

fn tiny_model(extra_in: usize) -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        widths: vec![4, 5],
        strides: vec![2, 1],
        proj2d_hidden: 6,
        proj2d_out: 5,
        pred2d_hidden: 6,
        pred2d_extra_in: extra_in,
        proj1d_hidden: 6,
        proj1d_out: 4,
        pred1d_hidden: 6,
    }
}

/// Checks one network head with every parameter as a differentiated input.
fn head_check(
    name: &str,
    net: &Network,
    seed: u64,
    x: Tensor,
    forward: impl Fn(&Network, &mut Tape, &Bound, Var) -> Result<Var>,
    out_shape: &[usize],
) -> Result<GradCheckReport> {
    let params = net.init_params(&mut stream(seed, Stream::ParamInit, &[]));
    // Small nonzero biases so every parameter influences the output.
    let mut inputs = vec![x];
    for (k, t) in params.tensors().iter().enumerate() {
        inputs.push(if t.ndim() == 1 {
            random(t.shape(), seed, 100 + k as u64).map(|v| 0.1 * v)
        } else {
            t.clone()
        });
    }
    let w = random(out_shape, seed, 99);
    finite_difference_check(
        name,
        |t, v| {
            let b = Bound::from_vars(v[1..].to_vec());
            let out = forward(net, t, &b, v[0])?;
            weighted(t, out, &w)
        },
        &inputs,
        H,
    )
}

fn case(name: &str, seed: u64) -> Result<GradCheckReport> {
    let s = seed;
    match name {
        "add_sub_mul_scale" => {
            let (a, b) = (random(&[2, 3], s, 1), random(&[2, 3], s, 2));
            let w = random(&[2, 3], s, 3);
            finite_difference_check(
                name,
                |t, v| {
                    let x = t.add(v[0], v[1])?;
                    let y = t.sub(x, v[1])?;
                    let y = t.mul(y, v[1])?;
                    let y = t.scale(y, -1.5);
                    weighted(t, y, &w)
                },
                &[a, b],
                H,
            )
        }
        "relu" => {
            // Keep entries away from the kink at 0.
            let a = random(&[12], s, 1).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            let w = random(&[12], s, 2);
            finite_difference_check(name, |t, v| {
                let r = t.relu(v[0]);
                weighted(t, r, &w)
            }, &[a], H)
        }
        "matmul_transpose" => {
            let (a, b) = (random(&[3, 4], s, 1), random(&[3, 2], s, 2));
            let w = random(&[4, 2], s, 3);
            finite_difference_check(
                name,
                |t, v| {
                    let at = t.transpose(v[0])?;
                    let m = t.matmul(at, v[1])?;
                    weighted(t, m, &w)
                },
                &[a, b],
                H,
            )
        }
        "sum_axis_reshape" => {
            let a = random(&[2, 3, 4], s, 1);
            let w = random(&[3, 4], s, 2);
            finite_difference_check(
                name,
                |t, v| {
                    let r = t.reshape(v[0], [2, 12])?;
                    let r = t.reshape(r, [2, 3, 4])?;
                    let m = t.sum_axis(r, 0)?;
                    weighted(t, m, &w)
                },
                &[a],
                H,
            )
        }
        "conv2d_3x3_stride1" | "conv2d_3x3_stride2" | "conv2d_1x1" => {
            let (k, stride, pad) = match name {
                "conv2d_3x3_stride1" => (3, 1, 1),
                "conv2d_3x3_stride2" => (3, 2, 1),
                _ => (1, 1, 0),
            };
            let x = random(&[2, 6, 6], s, 1);
            let wt = random(&[3, 2, k, k], s, 2);
            let b = random(&[3], s, 3);
            let out = (6 + 2 * pad - k) / stride + 1;
            let w = random(&[3, out, out], s, 4);
            finite_difference_check(
                name,
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    weighted(t, y, &w)
                },
                &[x, wt, b],
                H,
            )
        }
        "global_avg_pool" => {
            let x = random(&[3, 4, 5], s, 1);
            let w = random(&[3], s, 2);
            finite_difference_check(name, |t, v| {
                let p = t.global_avg_pool(v[0])?;
                weighted(t, p, &w)
            }, &[x], H)
        }
        "l2_normalize" => {
            let x = random(&[4, 3, 3], s, 1);
            let w = random(&[4, 3, 3], s, 2);
            finite_difference_check(name, |t, v| {
                let n = t.l2_normalize(v[0], 0, COS_EPS)?;
                weighted(t, n, &w)
            }, &[x], H)
        }
        "cosine_similarity" => {
            let (a, b) = (random(&[6], s, 1), random(&[6], s, 2));
            finite_difference_check(name, |t, v| t.cosine_similarity(v[0], v[1], COS_EPS), &[a, b], H)
        }
        "cosine_map" => {
            let (a, b) = (random(&[3, 3, 4], s, 1), random(&[3, 3, 4], s, 2));
            let w = random(&[3, 4], s, 3);
            finite_difference_check(name, |t, v| {
                let c = t.cosine_map(v[0], v[1], COS_EPS)?;
                weighted(t, c, &w)
            }, &[a, b], H)
        }
        "roi_align" => {
            let x = random(&[2, 6, 6], s, 1);
            let mut rng = stream(s, Stream::Probe, &[2]);
            let x0 = rng.gen_range(0.0..0.5);
            let y0 = rng.gen_range(0.0..0.5);
            let roi = RelBox {
                x0,
                y0,
                x1: x0 + rng.gen_range(0.2..0.5),
                y1: y0 + rng.gen_range(0.2..0.5),
            };
            let w = random(&[2, 4, 4], s, 3);
            finite_difference_check(name, |t, v| {
                let r = roi_align(t, v[0], roi, 4, 4)?;
                weighted(t, r, &w)
            }, &[x], H)
        }
        "flip_back" => {
            let x = random(&[2, 3, 4], s, 1);
            let w = random(&[2, 3, 4], s, 2);
            finite_difference_check(name, |t, v| {
                let f = flip_back(t, v[0], true);
                weighted(t, f, &w)
            }, &[x], H)
        }
        "concat" => {
            let (a, b) = (random(&[2, 3, 3], s, 1), random(&[1, 3, 3], s, 2));
            let w = random(&[3, 3, 3], s, 3);
            finite_difference_check(name, |t, v| {
                let c = t.concat(&[v[0], v[1]], 0)?;
                weighted(t, c, &w)
            }, &[a, b], H)
        }
        "cross_entropy" => {
            let x = random(&[5, 4], s, 1).map(|v| 3.0 * v);
            let w = random(&[4], s, 2);
            finite_difference_check(name, |t, v| {
                let c = t.cross_entropy_first(v[0])?;
                weighted(t, c, &w)
            }, &[x], H)
        }
        "backbone" => {
            let net = Network::new(tiny_model(0));
            head_check(name, &net, s, random(&[3, 4, 4], s, 1), |n, t, b, x| n.backbone_forward(t, b, x), &[5, 2, 2])
        }
        "projector_2d" => {
            let net = Network::new(tiny_model(0));
            head_check(name, &net, s, random(&[5, 3, 3], s, 1), |n, t, b, x| n.project_2d(t, b, x), &[5, 3, 3])
        }
        "predictor_2d" => {
            let net = Network::new(tiny_model(2));
            head_check(name, &net, s, random(&[7, 3, 3], s, 1), |n, t, b, x| n.predict_local(t, b, x), &[5, 3, 3])
        }
        "projector_predictor_1d" => {
            let net = Network::new(tiny_model(0));
            head_check(
                name,
                &net,
                s,
                random(&[5, 3, 3], s, 1),
                |n, t, b, x| n.project_predict_1d(t, b, x, true),
                &[4],
            )
        }
        "self_attention_predict" => {
            // Positive features keep every pairwise cosine off the clamp at 0.
            let r = uniform(&[4, 3, 3], s, 1, 0.1, 1.0);
            let p = random(&[3, 3, 3], s, 2);
            let w = random(&[3, 3, 3], s, 3);
            finite_difference_check(name, |t, v| {
                let q = self_attention_predict(t, v[0], v[1], s.is_multiple_of(2))?;
                weighted(t, q, &w)
            }, &[r, p], H)
        }
        "loss_1d" => {
            // The target side is a stop-gradient input, so only `q` is checked.
            let (q, z) = (random(&[6], s, 1), random(&[6], s, 2));
            finite_difference_check(
                name,
                |t, v| {
                    let z = t.constant(z.clone());
                    loss_1d(t, v[0], z)
                },
                &[q],
                H,
            )
        }
        "loss_2d_cluster" | "loss_2d_cluster_dense" => {
            let q = random(&[4, 3, 3], s, 1);
            let target = random(&[4, 3, 3], s, 2);
            let clusters = kmeans(&target, 3, KMeansMetric::Cosine, 10, &mut stream(s, Stream::KMeans, &[]))?;
            let dense = name.ends_with("dense");
            finite_difference_check(name, |t, v| loss_2d_cluster(t, v[0], &clusters, dense, &target), &[q], H)
        }
        "loss_2d_wo_kmeans" => {
            let (q, r) = (random(&[4, 3, 3], s, 1), random(&[4, 3, 3], s, 2));
            finite_difference_check(
                name,
                |t, v| {
                    let r = t.constant(r.clone());
                    loss_2d_wo_kmeans(t, v[0], r)
                },
                &[q],
                H,
            )
        }
        "info_nce" => {
            let g = random(&[4, 2, 3], s, 1);
            let pos = random(&[4, 2, 3], s, 2);
            let mut queue = NegativeQueue::new(4, 8);
            for row in random(&[8, 4], s, 3).data().chunks(4) {
                queue.push(row);
            }
            finite_difference_check(name, |t, v| info_nce_pixels(t, v[0], &pos, &queue, 0.2), &[g], H)
        }
        "loss_total" => {
            let (a, b) = (random(&[1], s, 1), random(&[1], s, 2));
            let lambda = stream(s, Stream::Probe, &[3]).gen_range(0.0..1.0);
            finite_difference_check(
                name,
                |t, v| {
                    let a = t.sum(v[0]);
                    let b = t.sum(v[1]);
                    let a = t.mul(a, a)?;
                    loss_total(t, a, b, lambda)
                },
                &[a, b],
                H,
            )
        }
        other => unreachable!("unknown gradient case {other}"),
    }
}

/// Names of every case in [`gradient_suite`].
pub const CASES: &[&str] = &[
    "add_sub_mul_scale",
    "relu",
    "matmul_transpose",
    "sum_axis_reshape",
    "conv2d_3x3_stride1",
    "conv2d_3x3_stride2",
    "conv2d_1x1",
    "global_avg_pool",
    "l2_normalize",
    "cosine_similarity",
    "cosine_map",
    "roi_align",
    "flip_back",
    "concat",
    "cross_entropy",
    "backbone",
    "projector_2d",
    "predictor_2d",
    "projector_predictor_1d",
    "self_attention_predict",
    "loss_1d",
    "loss_2d_cluster",
    "loss_2d_cluster_dense",
    "loss_2d_wo_kmeans",
    "info_nce",
    "loss_total",
];

/// One report per `(case, seed)`, in case-major order.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::with_capacity(CASES.len() * seeds.len());
    for name in CASES {
        for &seed in seeds {
            let mut r = case(name, seed)?;
            r.op_name = format!("{name}[seed {seed}]");
            out.push(r);
        }
    }
    Ok(out)
}
