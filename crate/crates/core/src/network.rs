//! Online/target Siamese networks.
//!
//! A small convolutional backbone keeps its final 2D feature map. Two head
//! families sit on top: a 1D branch (global pool, MLP projector, MLP
//! predictor) and a 2D branch where every MLP is a pair of 1x1 convolutions
//! so spatial extent is preserved. The target network shares the
//! architecture and is updated only by exponential moving average.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const COS_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of each 3x3 conv stage; the last one is the feature width C.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub proj2d_hidden: usize,
    pub proj2d_out: usize,
    pub pred2d_hidden: usize,
    /// Extra channels appended to the predictor input (2 for offset alignment).
    pub pred2d_extra_in: usize,
    pub proj1d_hidden: usize,
    pub proj1d_out: usize,
    pub pred1d_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 32, 32],
            strides: vec![2, 2, 2, 1],
            proj2d_hidden: 64,
            proj2d_out: 32,
            pred2d_hidden: 64,
            pred2d_extra_in: 2,
            proj1d_hidden: 128,
            proj1d_out: 64,
            pred1d_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("at least one stage")
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn same_structure(&self, other: &Params) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }
}

/// Parameters recorded on one tape, indexed like the owning [`Params`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars already on a tape, in [`Params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every bound parameter after `tape.backward`; zeros where
    /// no gradient reached.
    pub fn grads(&self, tape: &Tape, like: &Params) -> Params {
        let tensors = self
            .vars
            .iter()
            .zip(like.tensors())
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        Params {
            names: like.names.clone(),
            tensors,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    first: Layer,
    second: Layer,
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
    backbone: Vec<Layer>,
    proj2d: Mlp,
    pred2d: Mlp,
    proj1d: Mlp,
    pred1d: Mlp,
    shapes: Vec<(String, Vec<usize>)>,
}

impl Network {
    pub fn new(cfg: ModelConfig) -> Self {
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut layer = |name: String, cout: usize, cin: usize, k: usize| {
            shapes.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            shapes.push((format!("{name}.bias"), vec![cout]));
            Layer {
                weight: shapes.len() - 2,
                bias: shapes.len() - 1,
            }
        };
        let mut cin = cfg.in_channels;
        let mut backbone = Vec::new();
        for (k, &w) in cfg.widths.iter().enumerate() {
            backbone.push(layer(format!("backbone.conv{k}"), w, cin, 3));
            cin = w;
        }
        let c = cfg.feature_channels();
        let mut mlp = |name: &str, cin: usize, hidden: usize, out: usize| Mlp {
            first: layer(format!("{name}.0"), hidden, cin, 1),
            second: layer(format!("{name}.1"), out, hidden, 1),
        };
        let proj2d = mlp("proj2d", c, cfg.proj2d_hidden, cfg.proj2d_out);
        let pred2d = mlp(
            "pred2d",
            cfg.proj2d_out + cfg.pred2d_extra_in,
            cfg.pred2d_hidden,
            cfg.proj2d_out,
        );
        let proj1d = mlp("proj1d", c, cfg.proj1d_hidden, cfg.proj1d_out);
        let pred1d = mlp("pred1d", cfg.proj1d_out, cfg.pred1d_hidden, cfg.proj1d_out);
        Self {
            cfg,
            backbone,
            proj2d,
            pred2d,
            proj1d,
            pred1d,
            shapes,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// He-normal weights, zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> Params {
        let entries = self
            .shapes
            .iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                    let n = shape.iter().product();
                    Tensor::new(shape.clone(), (0..n).map(|_| normal.sample(rng)).collect())
                        .expect("init shape")
                } else {
                    Tensor::zeros(shape.clone())
                };
                (name.clone(), t)
            })
            .collect();
        Params::new(entries)
    }

    /// Records `params` on `tape`; only trainable bindings receive gradients.
    pub fn bind(&self, tape: &mut Tape, params: &Params, trainable: bool) -> Bound {
        Bound {
            vars: params.tensors().iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }

    fn conv(&self, tape: &mut Tape, b: &Bound, l: Layer, x: Var, stride: usize, pad: usize) -> Result<Var> {
        tape.conv2d(x, b.vars[l.weight], Some(b.vars[l.bias]), stride, pad)
    }

    fn mlp(&self, tape: &mut Tape, b: &Bound, m: Mlp, x: Var) -> Result<Var> {
        let h = self.conv(tape, b, m.first, x, 1, 0)?;
        let h = tape.relu(h);
        self.conv(tape, b, m.second, h, 1, 0)
    }

    /// `[3, H, W]` view to a `[C, H/S, W/S]` feature map.
    pub fn backbone_forward(&self, tape: &mut Tape, b: &Bound, view: Var) -> Result<Var> {
        let s = tape.shape(view).to_vec();
        let stride = self.cfg.total_stride();
        if s.len() != 3 || s[0] != self.cfg.in_channels || !s[1].is_multiple_of(stride) || !s[2].is_multiple_of(stride) {
            return Err(Error::InvalidShape {
                op: "backbone_forward",
                detail: format!(
                    "view {s:?} must be [{}, H, W] with H, W divisible by {stride}",
                    self.cfg.in_channels
                ),
            });
        }
        let mut x = view;
        for (k, &layer) in self.backbone.iter().enumerate() {
            x = self.conv(tape, b, layer, x, self.cfg.strides[k], 1)?;
            x = tape.relu(x);
        }
        Ok(x)
    }

    /// 2D projector: two 1x1 convolutions with a ReLU between.
    pub fn project_2d(&self, tape: &mut Tape, b: &Bound, f: Var) -> Result<Var> {
        self.check_channels(tape, f, self.cfg.feature_channels(), "project_2d")?;
        self.mlp(tape, b, self.proj2d, f)
    }

    /// Per-pixel local predictor `q(R)`.
    pub fn predict_local(&self, tape: &mut Tape, b: &Bound, r: Var) -> Result<Var> {
        let expected = self.cfg.proj2d_out + self.cfg.pred2d_extra_in;
        self.check_channels(tape, r, expected, "predict_local")?;
        self.mlp(tape, b, self.pred2d, r)
    }

    /// Pooled projection `z`; with `predict`, followed by the 1D predictor.
    pub fn project_predict_1d(&self, tape: &mut Tape, b: &Bound, f: Var, predict: bool) -> Result<Var> {
        let pooled = tape.global_avg_pool(f)?;
        let c = tape.shape(pooled)[0];
        let x = tape.reshape(pooled, [c, 1, 1])?;
        let mut z = self.mlp(tape, b, self.proj1d, x)?;
        if predict {
            z = self.mlp(tape, b, self.pred1d, z)?;
        }
        let d = tape.shape(z)[0];
        tape.reshape(z, [d])
    }

    fn check_channels(&self, tape: &Tape, x: Var, expected: usize, op: &'static str) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 3 || s[0] != expected {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![expected],
                rhs: s.to_vec(),
            });
        }
        Ok(())
    }
}

/// Self-attentive aggregation of local predictions.
///
/// `Q[i,j] = Σ sim(R[i,j], R[i',j']) · P[i',j']` with
/// `sim = max(cos, 0)^2`, unnormalized. With `residual`, `P` is added back.
pub fn self_attention_predict(tape: &mut Tape, r: Var, local: Var, residual: bool) -> Result<Var> {
    let (sr, sp) = (tape.shape(r).to_vec(), tape.shape(local).to_vec());
    if sr.len() != 3 || sp.len() != 3 || sr[1..] != sp[1..] {
        return Err(Error::ShapeMismatch {
            op: "self_attention_predict",
            lhs: sr,
            rhs: sp,
        });
    }
    let hw = sr[1] * sr[2];
    let n = tape.l2_normalize(r, 0, COS_EPS)?;
    let n = tape.reshape(n, [sr[0], hw])?;
    let nt = tape.transpose(n)?;
    let cos = tape.matmul(nt, n)?;
    let pos = tape.relu(cos);
    let sim = tape.mul(pos, pos)?;
    let p = tape.reshape(local, [sp[0], hw])?;
    // sim is symmetric, so P·simᵀ = P·sim.
    let q = tape.matmul(p, sim)?;
    let q = tape.reshape(q, sp)?;
    if residual {
        tape.add(q, local)
    } else {
        Ok(q)
    }
}

/// `target ← τ·target + (1 − τ)·online`, elementwise.
pub fn ema_update(target: &mut Params, online: &Params, tau: f64) {
    debug_assert!(target.same_structure(online));
    for (t, o) in target.tensors_mut().iter_mut().zip(online.tensors()) {
        for (x, &y) in t.data_mut().iter_mut().zip(o.data()) {
            *x = tau * *x + (1.0 - tau) * y;
        }
    }
}

/// Cosine ramp of the EMA coefficient from `tau_base` at step 0 to 1 at `total_steps`.
pub fn momentum_schedule(step: usize, total_steps: usize, tau_base: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    1.0 - (1.0 - tau_base) * ((std::f64::consts::PI * progress).cos() + 1.0) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::tensor::finite_difference_check;
    use rand::Rng as _;

    fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = stream(seed, Stream::Probe, &[]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        uniform(shape, seed, -1.0, 1.0)
    }

    fn net() -> (Network, Params) {
        let n = Network::new(ModelConfig::default());
        let p = n.init_params(&mut stream(0, Stream::ParamInit, &[]));
        (n, p)
    }

    #[test]
    fn backbone_desk_shape_and_determinism() {
        let (n, p) = net();
        let view = random(&[3, 64, 64], 1);
        let mut tape = Tape::new();
        let b = n.bind(&mut tape, &p, false);
        let v = tape.constant(view.clone());
        let f1 = n.backbone_forward(&mut tape, &b, v).unwrap();
        let v2 = tape.constant(view);
        let f2 = n.backbone_forward(&mut tape, &b, v2).unwrap();
        assert_eq!(tape.shape(f1), &[32, 8, 8]);
        assert_eq!(tape.value(f1), tape.value(f2));
    }

    #[test]
    fn backbone_rejects_indivisible_extent() {
        let (n, p) = net();
        let mut tape = Tape::new();
        let b = n.bind(&mut tape, &p, false);
        let v = tape.constant(Tensor::zeros([3, 60, 64]));
        assert!(n.backbone_forward(&mut tape, &b, v).is_err());
    }

    #[test]
    fn zeroed_final_conv_yields_bias_map() {
        let (n, mut p) = net();
        let last = n.cfg.widths.len() - 1;
        let bias: Vec<f64> = (0..32).map(|k| 0.1 * k as f64).collect();
        let names = p.names().to_vec();
        for (name, t) in names.iter().zip(p.tensors_mut()) {
            if name == &format!("backbone.conv{last}.weight") {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
            if name == &format!("backbone.conv{last}.bias") {
                t.data_mut().copy_from_slice(&bias);
            }
        }
        let mut tape = Tape::new();
        let b = n.bind(&mut tape, &p, false);
        let v = tape.constant(random(&[3, 64, 64], 2));
        let f = n.backbone_forward(&mut tape, &b, v).unwrap();
        for (c, &b) in bias.iter().enumerate().take(32) {
            for k in 0..64 {
                assert_eq!(tape.value(f).data()[c * 64 + k], b);
            }
        }
    }

    #[test]
    fn heads_preserve_extent_and_are_pointwise() {
        let (n, p) = net();
        let mut tape = Tape::new();
        let b = n.bind(&mut tape, &p, false);
        let f = random(&[32, 3, 4], 3);
        let fv = tape.constant(f.clone());
        let g = n.project_2d(&mut tape, &b, fv).unwrap();
        assert_eq!(tape.shape(g), &[32, 3, 4]);

        // Swap two pixels of the input; the outputs swap identically.
        let mut px = f.pixels();
        px.swap(0, 7);
        let swapped = tape.constant(Tensor::from_pixels(&px, 3, 4).unwrap());
        let gs = n.project_2d(&mut tape, &b, swapped).unwrap();
        let mut expect = tape.value(g).pixels();
        expect.swap(0, 7);
        assert_eq!(tape.value(gs).pixels(), expect);

        let r = tape.constant(random(&[34, 3, 4], 4));
        let q = n.predict_local(&mut tape, &b, r).unwrap();
        assert_eq!(tape.shape(q), &[32, 3, 4]);
        let bad = tape.constant(random(&[32, 3, 4], 5));
        assert!(n.predict_local(&mut tape, &b, bad).is_err());
    }

    #[test]
    fn one_d_branch_dims() {
        let (n, p) = net();
        let mut tape = Tape::new();
        let b = n.bind(&mut tape, &p, false);
        let f = tape.constant(random(&[32, 8, 8], 6));
        let q = n.project_predict_1d(&mut tape, &b, f, true).unwrap();
        let z = n.project_predict_1d(&mut tape, &b, f, false).unwrap();
        assert_eq!(tape.shape(q), &[64]);
        assert_eq!(tape.shape(z), &[64]);
        assert_ne!(tape.value(q), tape.value(z));
        let q2 = n.project_predict_1d(&mut tape, &b, f, true).unwrap();
        assert_eq!(tape.value(q), tape.value(q2));
    }

    #[test]
    fn attention_examples() {
        let mut tape = Tape::new();
        let r = tape.constant(random(&[3, 1, 1], 7));
        let p = tape.constant(random(&[4, 1, 1], 8));
        let q = self_attention_predict(&mut tape, r, p, false).unwrap();
        let diff: f64 = tape
            .value(q)
            .data()
            .iter()
            .zip(tape.value(p).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-15);

        // Constant feature field: every pixel attends to every other with weight 1.
        let r = tape.constant(Tensor::new([2, 2, 2], vec![1., 1., 1., 1., 2., 2., 2., 2.]).unwrap());
        let pl = random(&[3, 2, 2], 9);
        let p = tape.constant(pl.clone());
        let q = self_attention_predict(&mut tape, r, p, false).unwrap();
        let pix = pl.pixels();
        let sum: Vec<f64> = (0..3).map(|k| pix.iter().map(|v| v[k]).sum()).collect();
        for px in tape.value(q).pixels() {
            for k in 0..3 {
                assert!((px[k] - sum[k]).abs() < 1e-12);
            }
        }

        // Orthogonal features: each pixel only sees itself.
        let r = tape.constant(Tensor::new([2, 1, 2], vec![1., 0., 0., 1.]).unwrap());
        let p = tape.constant(random(&[3, 1, 2], 10));
        let q = self_attention_predict(&mut tape, r, p, false).unwrap();
        for (a, b) in tape.value(q).data().iter().zip(tape.value(p).data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let qr = self_attention_predict(&mut tape, r, p, true).unwrap();
        for (a, b) in tape.value(qr).data().iter().zip(tape.value(p).data()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        // Positive features keep every pairwise cosine off the clamped side
        // of max(cos, 0), where gradients vanish exactly.
        for seed in 0..5 {
            let r = uniform(&[3, 2, 2], 100 + seed, 0.1, 1.0);
            let p = random(&[3, 2, 2], 200 + seed);
            let w = random(&[3, 2, 2], 300 + seed);
            let report = finite_difference_check(
                "self_attention_predict",
                |t, v| {
                    let q = self_attention_predict(t, v[0], v[1], seed % 2 == 0)?;
                    let m = t.mul(q, v[2])?;
                    Ok(t.sum(m))
                },
                &[r, p, w],
                1e-5,
            )
            .unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn ema_examples() {
        let one = Params::new(vec![("w".into(), Tensor::vector(vec![1.0, 1.0]))]);
        let zero = Params::new(vec![("w".into(), Tensor::vector(vec![0.0, 0.0]))]);
        let mut t = one.clone();
        ema_update(&mut t, &zero, 1.0);
        assert_eq!(t, one);
        ema_update(&mut t, &zero, 0.0);
        assert_eq!(t, zero);
        let mut t = one.clone();
        ema_update(&mut t, &zero, 0.996);
        assert_eq!(t.tensors()[0].data(), &[0.996, 0.996]);
        let snapshot = t.clone();
        ema_update(&mut t, &zero, 1.0);
        assert_eq!(t, snapshot);
    }

    #[test]
    fn momentum_schedule_examples() {
        assert_eq!(momentum_schedule(0, 300, 0.996), 0.996);
        assert_eq!(momentum_schedule(300, 300, 0.996), 1.0);
        assert!((momentum_schedule(150, 300, 0.996) - 0.998).abs() < 1e-15);
        let mut prev = 0.0;
        for s in 0..=300 {
            let tau = momentum_schedule(s, 300, 0.996);
            assert!(tau >= prev);
            prev = tau;
        }
    }
}
