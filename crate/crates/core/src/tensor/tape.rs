use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Transpose(Var),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    L2Normalize {
        input: Var,
        axis: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    RoiAlign {
        input: Var,
        roi: [f64; 4],
    },
    FlipW(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    CrossEntropyFirst(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass worth of recorded operations.
///
/// A tape is built per forward pass and dropped after [`Tape::backward`];
/// only first-order derivatives are supported.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Continuous source coordinate of a bin center and its two bilinear taps.
fn bilinear_taps(pos: f64, extent: usize) -> (usize, usize, f64) {
    let p = pos.clamp(0.0, (extent - 1) as f64);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, p - lo as f64)
}

/// Sample positions (in pixel-index space) for RoI bins along one axis.
pub(crate) fn roi_positions(lo: f64, hi: f64, extent: usize, bins: usize) -> Vec<f64> {
    let step = (hi - lo) * extent as f64 / bins as f64;
    (0..bins)
        .map(|b| lo * extent as f64 + (b as f64 + 0.5) * step - 0.5)
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node recorded so far, in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Trainable leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant node (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(shape, g.clone()).expect("grad buffer matches value shape"))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.is_scalar() {
            let y = vb.item();
            va.map(|x| f(x, y))
        } else if va.is_scalar() {
            let x = va.item();
            vb.map(|y| f(x, y))
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Rectified linear unit; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.ndim() {
            return Err(Error::InvalidShape {
                op: "sum_axis",
                detail: format!("axis {axis} out of range for {:?}", va.shape()),
            });
        }
        let (outer, n, inner) = axis_split(va.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += va.data()[base + i];
                }
            }
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(a, axis), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let &[m, n] = va.shape() else {
            return Err(Error::InvalidShape {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", va.shape()),
            });
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data()[i * n + j];
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (va.shape(), vb.shape()) else {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// Cross-correlation of a `[C_in, H, W]` map with `[C_out, C_in, kh, kw]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vi, vw) = (self.value(input), self.value(weight));
        let (&[cin, h, w], &[cout, cin_w, kh, kw]) = (vi.shape(), vw.shape()) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vi.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        };
        if cin != cin_w {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vi.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) || stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("unsupported kernel {kh}x{kw} / stride {stride}"),
            });
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        // The window grid must tile the input exactly, with padding on both
        // sides or on the leading side only (the trailing pad row unused).
        let tiles = |ext: usize, k: usize| {
            ext + 2 * pad >= k
                && ((ext + 2 * pad - k).is_multiple_of(stride)
                    || (ext + pad >= k && (ext + pad - k).is_multiple_of(stride)))
        };
        if !tiles(h, kh) || !tiles(w, kw) {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!(
                    "output extent ({h}+2*{pad}-{kh})/{stride} is not integral for input {h}x{w}"
                ),
            });
        }
        let (ho, wo) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let geo = ConvGeometry {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        };
        let mut out = vec![0.0; cout * ho * wo];
        geo.forward(vi.data(), vw.data(), &mut out);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (o, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.iter_mut().for_each(|x| *x += bd[o]);
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            Tensor::new([cout, ho, wo], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Per-channel mean of a `[C, H, W]` map.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let &[c, h, w] = va.shape() else {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                detail: format!("expected [C,H,W], got {:?}", va.shape()),
            });
        };
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                detail: "empty spatial extent".into(),
            });
        }
        let hw = (h * w) as f64;
        let out = va
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f64>() / hw)
            .collect();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new([c], out)?, Op::GlobalAvgPool(a), rg))
    }

    /// `v / max(||v||_2, eps)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.ndim() {
            return Err(Error::InvalidShape {
                op: "l2_normalize",
                detail: format!("axis {axis} out of range for {:?}", va.shape()),
            });
        }
        let (outer, n, inner) = axis_split(va.shape(), axis);
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let norm = (0..n).map(|k| x[idx(k)] * x[idx(k)]).sum::<f64>().sqrt();
                norms[o * inner + i] = norm;
                let d = norm.max(eps);
                for k in 0..n {
                    out[idx(k)] = x[idx(k)] / d;
                }
            }
        }
        let shape = va.shape().to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::L2Normalize {
                input: a,
                axis,
                eps,
                norms,
            },
            rg,
        ))
    }

    /// Bilinear RoI pooling of a `[C, H, W]` map, one sample per bin center.
    ///
    /// `roi` is `[x0, y0, x1, y1]` relative to the map extent; pixel `(i, j)`
    /// sits at `((j + 0.5) / W, (i + 0.5) / H)`. Samples outside the hull of
    /// pixel centers clamp to the edge.
    pub fn roi_align(&mut self, a: Var, roi: [f64; 4], out_h: usize, out_w: usize) -> Result<Var> {
        let va = self.value(a);
        let &[c, h, w] = va.shape() else {
            return Err(Error::InvalidShape {
                op: "roi_align",
                detail: format!("expected [C,H,W], got {:?}", va.shape()),
            });
        };
        let xs: Vec<_> = roi_positions(roi[0], roi[2], w, out_w)
            .into_iter()
            .map(|p| bilinear_taps(p, w))
            .collect();
        let ys: Vec<_> = roi_positions(roi[1], roi[3], h, out_h)
            .into_iter()
            .map(|p| bilinear_taps(p, h))
            .collect();
        let x = va.data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for (oi, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (oj, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v = (1.0 - fy) * ((1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1])
                        + fy * ((1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
                    out[(ch * out_h + oi) * out_w + oj] = v;
                }
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor::new([c, out_h, out_w], out)?,
            Op::RoiAlign { input: a, roi },
            rg,
        ))
    }

    /// Mirrors the last axis.
    pub fn flip_w(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let w = *va.shape().last().unwrap_or(&1);
        let mut out = va.data().to_vec();
        out.chunks_mut(w.max(1)).for_each(|row| row.reverse());
        let shape = va.shape().to_vec();
        let rg = self.needs(&[a]);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::FlipW(a),
            rg,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                detail: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let vv = self.value(v);
                let n = vv.shape()[axis];
                out.extend_from_slice(&vv.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Per-column softmax cross-entropy of `[n_classes, N]` logits where the
    /// target class is row 0. Returns the `[N]` vector of losses.
    pub fn cross_entropy_first(&mut self, logits: Var) -> Result<Var> {
        let vl = self.value(logits);
        let &[n, cols] = vl.shape() else {
            return Err(Error::InvalidShape {
                op: "cross_entropy_first",
                detail: format!("expected [classes, N], got {:?}", vl.shape()),
            });
        };
        let x = vl.data();
        let out = (0..cols)
            .map(|j| log_sum_exp((0..n).map(|i| x[i * cols + j])) - x[j])
            .collect();
        let rg = self.needs(&[logits]);
        Ok(self.push(Tensor::new([cols], out)?, Op::CrossEntropyFirst(logits), rg))
    }

    /// Cosine similarity of two equal-length vectors as a scalar node.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.value(a).ndim() != 1 {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let na = self.l2_normalize(a, 0, eps)?;
        let nb = self.l2_normalize(b, 0, eps)?;
        let prod = self.mul(na, nb)?;
        Ok(self.sum(prod))
    }

    /// Per-pixel cosine similarity of two `[C, H, W]` maps, as an `[H, W]` map.
    pub fn cosine_map(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.value(a).ndim() != 3 {
            return Err(Error::ShapeMismatch {
                op: "cosine_map",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let na = self.l2_normalize(a, 0, eps)?;
        let nb = self.l2_normalize(b, 0, eps)?;
        let prod = self.mul(na, nb)?;
        self.sum_axis(prod, 0)
    }

    /// Populates gradients of every node that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        delta(buf);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => self.binary_backward(id, kind, a, b, g),
            Op::Scale(a, f) => self.accumulate(a, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += f * g)
            }),
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data().to_vec();
                self.accumulate(a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(&x) {
                        if x > 0.0 {
                            *d += g;
                        }
                    }
                })
            }
            Op::Sum(a) => self.accumulate(a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = axis_split(self.nodes[a.0].value.shape(), axis);
                self.accumulate(a, |d| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                d[(o * n + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::Reshape(a) => self.accumulate(a, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)
            }),
            Op::Transpose(a) => {
                let &[m, n] = self.nodes[a.0].value.shape() else {
                    unreachable!()
                };
                self.accumulate(a, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }
            Op::Matmul(a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb.data()[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.accumulate(a, |d| d.iter_mut().zip(&da).for_each(|(d, x)| *d += x));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = va.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(b, |d| d.iter_mut().zip(&db).for_each(|(d, x)| *d += x));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let vi = self.nodes[input.0].value.clone();
                let vw = self.nodes[weight.0].value.clone();
                let (s_in, s_w) = (vi.shape(), vw.shape());
                let out_shape = self.nodes[id].value.shape();
                let geo = ConvGeometry {
                    cin: s_in[0],
                    h: s_in[1],
                    w: s_in[2],
                    cout: s_w[0],
                    kh: s_w[2],
                    kw: s_w[3],
                    ho: out_shape[1],
                    wo: out_shape[2],
                    stride,
                    pad,
                };
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; vi.numel()];
                    geo.backward_input(g, vw.data(), &mut dx);
                    self.accumulate(input, |d| d.iter_mut().zip(&dx).for_each(|(d, x)| *d += x));
                }
                if self.nodes[weight.0].requires_grad {
                    let mut dw = vec![0.0; vw.numel()];
                    geo.backward_weight(g, vi.data(), &mut dw);
                    self.accumulate(weight, |d| d.iter_mut().zip(&dw).for_each(|(d, x)| *d += x));
                }
                if let Some(b) = bias {
                    let plane = geo.ho * geo.wo;
                    self.accumulate(b, |d| {
                        for (o, chunk) in g.chunks(plane).enumerate() {
                            d[o] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.nodes[a.0].value.shape();
                let hw = s[1] * s[2];
                self.accumulate(a, |d| {
                    for (c, chunk) in d.chunks_mut(hw).enumerate() {
                        chunk.iter_mut().for_each(|d| *d += g[c] / hw as f64);
                    }
                })
            }
            Op::L2Normalize {
                input,
                axis,
                eps,
                norms,
            } => {
                let (outer, n, inner) = axis_split(self.nodes[input.0].value.shape(), axis);
                let y = self.nodes[id].value.data().to_vec();
                self.accumulate(input, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let norm = norms[o * inner + i];
                            if norm > eps {
                                let dot: f64 = (0..n).map(|k| y[idx(k)] * g[idx(k)]).sum();
                                for k in 0..n {
                                    d[idx(k)] += (g[idx(k)] - y[idx(k)] * dot) / norm;
                                }
                            } else {
                                for k in 0..n {
                                    d[idx(k)] += g[idx(k)] / eps;
                                }
                            }
                        }
                    }
                })
            }
            Op::RoiAlign { input, roi } => {
                let s = self.nodes[input.0].value.shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let os = self.nodes[id].value.shape();
                let (oh, ow) = (os[1], os[2]);
                let xs: Vec<_> = roi_positions(roi[0], roi[2], w, ow)
                    .into_iter()
                    .map(|p| bilinear_taps(p, w))
                    .collect();
                let ys: Vec<_> = roi_positions(roi[1], roi[3], h, oh)
                    .into_iter()
                    .map(|p| bilinear_taps(p, h))
                    .collect();
                self.accumulate(input, |d| {
                    for ch in 0..c {
                        let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                        for (oi, &(y0, y1, fy)) in ys.iter().enumerate() {
                            for (oj, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let gv = g[(ch * oh + oi) * ow + oj];
                                plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                                plane[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                })
            }
            Op::FlipW(a) => {
                let w = *self.nodes[a.0].value.shape().last().unwrap_or(&1);
                self.accumulate(a, |d| {
                    for (drow, grow) in d.chunks_mut(w.max(1)).zip(g.chunks(w.max(1))) {
                        for (dd, gg) in drow.iter_mut().zip(grow.iter().rev()) {
                            *dd += gg;
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&out_shape, axis);
                let mut offset = 0;
                for v in inputs {
                    let n = self.nodes[v.0].value.shape()[axis];
                    self.accumulate(v, |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            for t in 0..n * inner {
                                d[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::CrossEntropyFirst(a) => {
                let vl = self.nodes[a.0].value.clone();
                let (n, cols) = (vl.shape()[0], vl.shape()[1]);
                let x = vl.data();
                self.accumulate(a, |d| {
                    for j in 0..cols {
                        let lse = log_sum_exp((0..n).map(|i| x[i * cols + j]));
                        for i in 0..n {
                            let p = (x[i * cols + j] - lse).exp();
                            let t = if i == 0 { 1.0 } else { 0.0 };
                            d[i * cols + j] += g[j] * (p - t);
                        }
                    }
                })
            }
        }
    }

    fn binary_backward(&mut self, id: usize, kind: Binary, a: Var, b: Var, g: &[f64]) {
        let out_len = self.nodes[id].value.numel();
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        // Local derivative of the output w.r.t. each operand, per output element.
        let elem = |t: &Tensor, i: usize| {
            if t.numel() == out_len {
                t.data()[i]
            } else {
                t.item()
            }
        };
        for (operand, other, is_lhs) in [(a, &vb, true), (b, &va, false)] {
            if !self.nodes[operand.0].requires_grad {
                continue;
            }
            let broadcast = self.nodes[operand.0].value.numel() != out_len;
            let local: Vec<f64> = (0..out_len)
                .map(|i| match kind {
                    Binary::Add => g[i],
                    Binary::Sub if is_lhs => g[i],
                    Binary::Sub => -g[i],
                    Binary::Mul => g[i] * elem(other, i),
                })
                .collect();
            self.accumulate(operand, |d| {
                if broadcast {
                    d[0] += local.iter().sum::<f64>();
                } else {
                    d.iter_mut().zip(&local).for_each(|(d, x)| *d += x);
                }
            });
        }
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    /// Output indices `o` whose tap `k` lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> std::ops::Range<usize> {
        // source = o*stride + k - pad must lie in [0, extent)
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi_src = extent + self.pad;
        let hi = if hi_src > k {
            ((hi_src - k - 1) / self.stride + 1).min(out_extent)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    fn forward(&self, x: &[f64], wt: &[f64], out: &mut [f64]) {
        for o in 0..self.cout {
            let oplane = &mut out[o * self.ho * self.wo..(o + 1) * self.ho * self.wo];
            for c in 0..self.cin {
                let xplane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
                for ki in 0..self.kh {
                    let rows = self.valid_range(ki, self.h, self.ho);
                    for kj in 0..self.kw {
                        let cols = self.valid_range(kj, self.w, self.wo);
                        let wv = wt[((o * self.cin + c) * self.kh + ki) * self.kw + kj];
                        for y in rows.clone() {
                            let sy = y * self.stride + ki - self.pad;
                            let xrow = &xplane[sy * self.w..(sy + 1) * self.w];
                            let orow = &mut oplane[y * self.wo..(y + 1) * self.wo];
                            for xo in cols.clone() {
                                orow[xo] += wv * xrow[xo * self.stride + kj - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_input(&self, g: &[f64], wt: &[f64], dx: &mut [f64]) {
        for o in 0..self.cout {
            let gplane = &g[o * self.ho * self.wo..(o + 1) * self.ho * self.wo];
            for c in 0..self.cin {
                let dplane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
                for ki in 0..self.kh {
                    let rows = self.valid_range(ki, self.h, self.ho);
                    for kj in 0..self.kw {
                        let cols = self.valid_range(kj, self.w, self.wo);
                        let wv = wt[((o * self.cin + c) * self.kh + ki) * self.kw + kj];
                        for y in rows.clone() {
                            let sy = y * self.stride + ki - self.pad;
                            for xo in cols.clone() {
                                dplane[sy * self.w + xo * self.stride + kj - self.pad] +=
                                    wv * gplane[y * self.wo + xo];
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], dw: &mut [f64]) {
        for o in 0..self.cout {
            let gplane = &g[o * self.ho * self.wo..(o + 1) * self.ho * self.wo];
            for c in 0..self.cin {
                let xplane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
                for ki in 0..self.kh {
                    let rows = self.valid_range(ki, self.h, self.ho);
                    for kj in 0..self.kw {
                        let cols = self.valid_range(kj, self.w, self.wo);
                        let mut s = 0.0;
                        for y in rows.clone() {
                            let sy = y * self.stride + ki - self.pad;
                            for xo in cols.clone() {
                                s += gplane[y * self.wo + xo]
                                    * xplane[sy * self.w + xo * self.stride + kj - self.pad];
                            }
                        }
                        dw[((o * self.cin + c) * self.kh + ki) * self.kw + kj] += s;
                    }
                }
            }
        }
    }
}
