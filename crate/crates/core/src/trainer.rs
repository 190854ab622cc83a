//! Optimizers, schedules, the training loop and checkpoints.
//!
//! One iteration processes a micro-batch of `batch_size` images. Every
//! `accumulation_steps` iterations the summed gradients go through the
//! optimizer, after which the target network takes its EMA step.
//!
//! Randomness is keyed by `(update, slot)`: the optimizer update index and
//! the image position within the accumulated batch. Two runs that differ only
//! in how a batch is split into micro-batches therefore see the same images,
//! views and K-means seeds, and a run resumed from a checkpoint continues
//! exactly as the uninterrupted one.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::align::{align_pair, flip_back};
use crate::config::{Optimizer, TrainConfig};
use crate::error::{Error, Result};
use crate::network::{ema_update, momentum_schedule, self_attention_predict, Bound, Network, Params};
use crate::objective::{
    kmeans, loss_1d, loss_2d_cluster, loss_2d_wo_kmeans, loss_total, moco_pixel_infonce, LossMode, MocoSettings,
    NegativeQueue,
};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::{Tape, Tensor, Var};
use crate::views::{render_view, sample_view_pair, ViewSpec};

const CHECKPOINT_MAGIC: &[u8; 4] = b"MSIA";
const CHECKPOINT_VERSION: u32 = 1;

/// `lr_base · batch/256 · (cos(π·step/steps) + 1)/2`.
pub fn cosine_lr(step: usize, steps: usize, lr_base: f64, batch: usize) -> f64 {
    let progress = step.min(steps) as f64 / steps.max(1) as f64;
    lr_base * batch as f64 / 256.0 * ((std::f64::consts::PI * progress).cos() + 1.0) / 2.0
}

/// Learning rate at iteration `step`, scaled by the accumulated batch size.
pub fn effective_lr(step: usize, cfg: &TrainConfig) -> f64 {
    cosine_lr(step, cfg.steps, cfg.lr_base, cfg.batch_size * cfg.accumulation_steps)
}

/// Momentum SGD: `v ← μv + g + wd·w`, `w ← w − lr·v`.
pub fn sgd_step(params: &mut Params, grads: &Params, velocity: &mut Params, lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, g), v) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(velocity.tensors_mut()) {
        for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = momentum * *v + g + weight_decay * *w;
            *w -= lr * *v;
        }
    }
}

/// LARS: momentum SGD with a per-tensor trust ratio.
///
/// One-dimensional tensors (biases) get no weight decay and a local rate of
/// 1, as does any tensor with zero norm.
#[allow(clippy::too_many_arguments)]
pub fn lars_step(
    params: &mut Params,
    grads: &Params,
    velocity: &mut Params,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    trust: f64,
    eps: f64,
) {
    for ((w, g), v) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(velocity.tensors_mut()) {
        let exempt = w.ndim() == 1;
        let wd = if exempt { 0.0 } else { weight_decay };
        let d: Vec<f64> = w.data().iter().zip(g.data()).map(|(&w, &g)| g + wd * w).collect();
        let w_norm = w.l2_norm();
        let d_norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let local = if exempt || w_norm == 0.0 {
            1.0
        } else {
            trust * w_norm / (d_norm + eps)
        };
        for ((w, d), v) in w.data_mut().iter_mut().zip(d).zip(v.data_mut()) {
            *v = momentum * *v + local * d;
            *w -= lr * *v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub l1d: f64,
    pub l2d: f64,
    pub lr: f64,
    pub tau: f64,
    pub feature_std: f64,
}

/// Spread of a batch of unit-normalized embeddings:
/// `sqrt(Σ_d Var_batch(e_d))`, which is 0 when every embedding is identical
/// and at most 1.
pub fn feature_std(embeddings: &[Vec<f64>]) -> f64 {
    if embeddings.is_empty() {
        return 0.0;
    }
    let n = embeddings.len() as f64;
    let unit: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            e.iter().map(|x| x / norm).collect()
        })
        .collect();
    let dim = unit[0].len();
    let mut total = 0.0;
    for d in 0..dim {
        let mean = unit.iter().map(|e| e[d]).sum::<f64>() / n;
        total += unit.iter().map(|e| (e[d] - mean).powi(2)).sum::<f64>() / n;
    }
    total.sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Iterations completed.
    pub step: usize,
    pub online: Params,
    pub target: Params,
    pub velocity: Params,
    /// Gradients summed since the last optimizer update.
    pub accum: Params,
    pub queue: NegativeQueue,
}

/// One image's recorded forward pass, before backward.
pub struct ImageForward {
    pub tape: Tape,
    pub online: Bound,
    pub target: Bound,
    /// Symmetrized total loss.
    pub loss: Var,
    pub l1d: f64,
    pub l2d: f64,
    /// Normalized target keys for the negative queue (contrastive mode only).
    pub keys: Vec<Vec<f64>>,
    /// Global-average-pooled online backbone features of the first view.
    pub embedding: Vec<f64>,
    pub image: usize,
}

struct ImageOutcome {
    grads: Params,
    loss: f64,
    l1d: f64,
    l2d: f64,
    keys: Vec<Vec<f64>>,
    embedding: Vec<f64>,
}

struct Direction<'a> {
    f_online: Var,
    spec_online: &'a ViewSpec,
    f_target: Var,
    spec_target: &'a ViewSpec,
}

pub struct Trainer {
    cfg: TrainConfig,
    net: Network,
    images: Vec<Tensor>,
    state: TrainState,
}

impl Trainer {
    /// Fresh run; the target starts as a copy of the online network.
    pub fn new(cfg: TrainConfig, images: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(cfg.model_config());
        let online = net.init_params(&mut stream(cfg.seed, Stream::ParamInit, &[]));
        let state = TrainState {
            step: 0,
            target: online.clone(),
            velocity: online.zeros_like(),
            accum: online.zeros_like(),
            queue: NegativeQueue::new(cfg.proj2d_out, cfg.queue_len),
            online,
        };
        let moco = cfg.loss_mode == LossMode::Moco;
        let mut trainer = Self::with_state(cfg, images, state)?;
        if moco {
            trainer.prime_queue()?;
        }
        Ok(trainer)
    }

    /// Fills the negative queue with target pixel projections of random
    /// training views, so the contrastive loss sees a full queue from step 0.
    fn prime_queue(&mut self) -> Result<()> {
        let capacity = self.state.queue.capacity();
        let mut draw = 0;
        while self.state.queue.len() < capacity {
            let mut rng = self.key_rng(Stream::Queue, &[draw]);
            let img = &self.images[rng.gen_range(0..self.images.len())];
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let spec = sample_view_pair((w, h), &self.cfg.sampler_config(), &mut rng).spec_b;
            let mut tape = Tape::new();
            let target = self.net.bind(&mut tape, &self.state.target, false);
            let x = tape.constant(render_view(img, &spec));
            let f = self.net.backbone_forward(&mut tape, &target, x)?;
            let f = flip_back(&mut tape, f, spec.flipped);
            let g = self.net.project_2d(&mut tape, &target, f)?;
            for p in tape.value(g).pixels().iter().take(capacity - self.state.queue.len()) {
                self.state.queue.push(p);
            }
            draw += 1;
        }
        Ok(())
    }

    pub fn with_state(cfg: TrainConfig, images: Vec<Tensor>, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::config("corpus_size", "training needs at least one image"));
        }
        for img in &images {
            let s = img.shape();
            if s.len() != 3 || s[0] != 3 {
                return Err(Error::InvalidShape {
                    op: "Trainer",
                    detail: format!("images must be [3, H, W], got {s:?}"),
                });
            }
        }
        let net = Network::new(cfg.model_config());
        let expected = net.init_params(&mut stream(0, Stream::ParamInit, &[]));
        for p in [&state.online, &state.target, &state.velocity, &state.accum] {
            if !p.same_structure(&expected) {
                return Err(Error::Checkpoint("parameter set does not match the configured model".into()));
            }
        }
        Ok(Self {
            cfg,
            net,
            images,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.cfg.steps
    }

    fn key_rng(&self, purpose: Stream, keys: &[u64]) -> Rng {
        stream(self.cfg.seed, purpose, keys)
    }

    /// Records the symmetrized loss of accumulated-batch slot `slot` of update `update`.
    pub fn forward_image(&self, update: usize, slot: usize) -> Result<ImageForward> {
        let cfg = &self.cfg;
        let keys = [update as u64, slot as u64];
        let image = self.key_rng(Stream::Batch, &keys).gen_range(0..self.images.len());
        let src = &self.images[image];
        let (h, w) = (src.shape()[1], src.shape()[2]);
        let pair = sample_view_pair((w, h), &cfg.sampler_config(), &mut self.key_rng(Stream::Views, &keys));
        let (spec_a, spec_b) = (pair.spec_a, pair.spec_b);

        let mut tape = Tape::new();
        let online = self.net.bind(&mut tape, &self.state.online, true);
        let target = self.net.bind(&mut tape, &self.state.target, false);
        let xa = tape.constant(render_view(src, &spec_a));
        let xb = tape.constant(render_view(src, &spec_b));
        let fa = self.net.backbone_forward(&mut tape, &online, xa)?;
        let tb = self.net.backbone_forward(&mut tape, &target, xb)?;
        let mut directions = vec![Direction {
            f_online: fa,
            spec_online: &spec_a,
            f_target: tb,
            spec_target: &spec_b,
        }];
        if cfg.symmetrize {
            let fb = self.net.backbone_forward(&mut tape, &online, xb)?;
            let ta = self.net.backbone_forward(&mut tape, &target, xa)?;
            directions.push(Direction {
                f_online: fb,
                spec_online: &spec_b,
                f_target: ta,
                spec_target: &spec_a,
            });
        }

        let mut totals = Vec::new();
        let (mut l1d, mut l2d) = (0.0, 0.0);
        let mut queue_keys = Vec::new();
        for (d, dir) in directions.iter().enumerate() {
            let mut rng = self.key_rng(Stream::KMeans, &[update as u64, slot as u64, d as u64]);
            let (total, l1, l2, k) = self.direction_loss(&mut tape, &online, &target, dir, &mut rng)?;
            l1d += tape.value(l1).item();
            l2d += tape.value(l2).item();
            totals.push(total);
            queue_keys.extend(k);
        }
        let n = directions.len() as f64;
        let sum = tape.concat(&totals, 0)?;
        let sum = tape.sum(sum);
        let loss = tape.scale(sum, 1.0 / n);
        let pooled = tape.global_avg_pool(fa)?;
        let embedding = tape.value(pooled).data().to_vec();
        Ok(ImageForward {
            tape,
            online,
            target,
            loss,
            l1d: l1d / n,
            l2d: l2d / n,
            keys: queue_keys,
            embedding,
            image,
        })
    }

    /// Total, 1D and 2D losses for one view ordering, plus contrastive keys.
    fn direction_loss(
        &self,
        tape: &mut Tape,
        online: &Bound,
        target: &Bound,
        dir: &Direction<'_>,
        rng: &mut Rng,
    ) -> Result<(Var, Var, Var, Vec<Vec<f64>>)> {
        let cfg = &self.cfg;
        let net = &self.net;
        let q1 = net.project_predict_1d(tape, online, dir.f_online, true)?;
        let z1 = net.project_predict_1d(tape, target, dir.f_target, false)?;
        let l1 = loss_1d(tape, q1, z1)?;
        let fo = flip_back(tape, dir.f_online, dir.spec_online.flipped);
        let ft = flip_back(tape, dir.f_target, dir.spec_target.flipped);
        let (l2, keys) = match cfg.loss_mode {
            LossMode::Moco => {
                let settings = MocoSettings {
                    k: cfg.k,
                    metric: cfg.kmeans_metric,
                    max_iter: cfg.kmeans_iters,
                    temperature: cfg.temperature,
                    self_attention: cfg.self_attention,
                    residual: cfg.residual(),
                };
                let out = moco_pixel_infonce(
                    tape,
                    net,
                    online,
                    target,
                    fo,
                    ft,
                    dir.spec_online,
                    dir.spec_target,
                    &self.state.queue,
                    settings,
                    rng,
                )?;
                (out.loss, out.keys)
            }
            mode => {
                let r = net.project_2d(tape, online, fo)?;
                let rt = net.project_2d(tape, target, ft)?;
                let aligned = align_pair(
                    tape,
                    r,
                    rt,
                    dir.spec_online,
                    dir.spec_target,
                    cfg.effective_alignment(),
                    cfg.normalize_offset,
                )?;
                let p = net.predict_local(tape, online, aligned.online)?;
                let q = if cfg.self_attention {
                    self_attention_predict(tape, aligned.online, p, cfg.residual())?
                } else {
                    p
                };
                let l2 = if mode == LossMode::Cluster {
                    let target_map = tape.value(aligned.target).clone();
                    let clusters = kmeans(&target_map, cfg.k, cfg.kmeans_metric, cfg.kmeans_iters, rng)?;
                    loss_2d_cluster(tape, q, &clusters, cfg.dense, &target_map)?
                } else {
                    loss_2d_wo_kmeans(tape, q, aligned.target)?
                };
                (l2, Vec::new())
            }
        };
        let total = loss_total(tape, l1, l2, cfg.lambda)?;
        let total = tape.reshape(total, [1])?;
        Ok((total, l1, l2, keys))
    }

    fn image_outcome(&self, update: usize, slot: usize, scale: f64) -> Result<ImageOutcome> {
        let mut fwd = self.forward_image(update, slot)?;
        let loss = fwd.tape.value(fwd.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "update {update} slot {slot} image {}: loss {loss}, l1d {}, l2d {}",
                fwd.image, fwd.l1d, fwd.l2d
            )));
        }
        let scaled = fwd.tape.scale(fwd.loss, scale);
        fwd.tape.backward(scaled)?;
        let grads = fwd.online.grads(&fwd.tape, &self.state.online);
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite(format!(
                "update {update} slot {slot} image {}: gradient of {name}",
                fwd.image
            )));
        }
        Ok(ImageOutcome {
            grads,
            loss,
            l1d: fwd.l1d,
            l2d: fwd.l2d,
            keys: fwd.keys,
            embedding: fwd.embedding,
        })
    }

    fn outcomes(&self, update: usize, slots: Range<usize>) -> Result<Vec<ImageOutcome>> {
        let scale = 1.0 / (self.cfg.batch_size * self.cfg.accumulation_steps) as f64;
        slots
            .into_par_iter()
            .map(|slot| self.image_outcome(update, slot, scale))
            .collect()
    }

    /// Sum over `slots` of per-image gradients, each scaled by one over the
    /// accumulated batch size, added in slot order.
    pub fn gradients(&self, update: usize, slots: Range<usize>) -> Result<Params> {
        let mut total = self.state.online.zeros_like();
        for o in self.outcomes(update, slots)? {
            add_into(&mut total, &o.grads);
        }
        Ok(total)
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let cfg = self.cfg.clone();
        let step = self.state.step;
        let update = step / cfg.accumulation_steps;
        let micro = step % cfg.accumulation_steps;
        let slots = micro * cfg.batch_size..(micro + 1) * cfg.batch_size;
        let outcomes = self.outcomes(update, slots)?;

        let n = outcomes.len() as f64;
        let mut metrics = StepMetrics {
            step,
            loss: outcomes.iter().map(|o| o.loss).sum::<f64>() / n,
            l1d: outcomes.iter().map(|o| o.l1d).sum::<f64>() / n,
            l2d: outcomes.iter().map(|o| o.l2d).sum::<f64>() / n,
            lr: 0.0,
            tau: 0.0,
            feature_std: feature_std(&outcomes.iter().map(|o| o.embedding.clone()).collect::<Vec<_>>()),
        };
        for o in &outcomes {
            add_into(&mut self.state.accum, &o.grads);
        }

        // Schedules are evaluated at the first iteration of the accumulation window.
        let window_start = update * cfg.accumulation_steps;
        metrics.lr = effective_lr(window_start, &cfg);
        metrics.tau = momentum_schedule(window_start, cfg.steps, cfg.tau_base);
        if micro + 1 == cfg.accumulation_steps {
            let st = &mut self.state;
            match cfg.optimizer {
                Optimizer::Sgd => sgd_step(
                    &mut st.online,
                    &st.accum,
                    &mut st.velocity,
                    metrics.lr,
                    cfg.momentum,
                    cfg.weight_decay,
                ),
                Optimizer::Lars => lars_step(
                    &mut st.online,
                    &st.accum,
                    &mut st.velocity,
                    metrics.lr,
                    cfg.momentum,
                    cfg.weight_decay,
                    cfg.lars_trust,
                    cfg.lars_eps,
                ),
            }
            st.accum = st.online.zeros_like();
            ema_update(&mut st.target, &st.online, metrics.tau);
        }
        for o in &outcomes {
            for k in &o.keys {
                self.state.queue.push(k);
            }
        }
        self.state.step += 1;
        Ok(metrics)
    }

    /// Steps until `cfg.steps` iterations are done, reporting each one.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut all = Vec::new();
        while !self.is_finished() {
            let m = self.step()?;
            on_step(&m);
            all.push(m);
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let st = &self.state;
        let mut tensors = Vec::new();
        for (prefix, p) in [
            ("online", &st.online),
            ("target", &st.target),
            ("velocity", &st.velocity),
            ("accum", &st.accum),
        ] {
            tensors.extend(p.iter().map(|(n, t)| (format!("{prefix}.{n}"), t.clone())));
        }
        let q = &st.queue;
        let flat: Vec<f64> = q.entries().iter().flatten().copied().collect();
        tensors.push((
            "queue.entries".into(),
            Tensor::new([q.len(), q.dim()], flat).expect("queue shape"),
        ));
        tensors.push((
            "queue.state".into(),
            Tensor::vector(vec![q.capacity() as f64, q.cursor() as f64]),
        ));
        Checkpoint {
            step: st.step as u64,
            config_text: self.cfg.to_text(),
            tensors,
        }
    }

    /// Restores a run; the configuration comes from the checkpoint itself.
    pub fn from_checkpoint(ckpt: &Checkpoint, images: Vec<Tensor>) -> Result<Self> {
        let cfg = TrainConfig::from_text(&ckpt.config_text)?;
        let take = |prefix: &str| ckpt.params(prefix);
        let find = |name: &str| {
            ckpt.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let entries = find("queue.entries")?;
        let qstate = find("queue.state")?;
        if entries.ndim() != 2 || qstate.numel() != 2 {
            return Err(Error::Checkpoint("malformed queue tensors".into()));
        }
        let dim = entries.shape()[1];
        let rows = entries.data().chunks(dim.max(1)).map(|r| r.to_vec()).collect();
        let queue = NegativeQueue::from_parts(dim, qstate.data()[0] as usize, rows, qstate.data()[1] as usize);
        let state = TrainState {
            step: ckpt.step as usize,
            online: take("online."),
            target: take("target."),
            velocity: take("velocity."),
            accum: take("accum."),
            queue,
        };
        Self::with_state(cfg, images, state)
    }
}

fn add_into(total: &mut Params, g: &Params) {
    for (t, g) in total.tensors_mut().iter_mut().zip(g.tensors()) {
        t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
    }
}

/// Serialized training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// `key=value` lines of the run configuration.
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn params(&self, prefix: &str) -> Params {
        Params::new(
            self.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
                .collect(),
        )
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.push(0);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(ckpt.config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(ckpt.config_text.as_bytes());
    // Write then rename, so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let data = match r.take(1)?[0] {
            0 => r
                .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            1 => r
                .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            tag => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {tag}"))),
        };
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let config_text = r.string()?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        step,
        config_text,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::AlignMode;
    use crate::corpus::{generate, SceneSpec};

    fn params(values: &[f64]) -> Params {
        Params::new(vec![("w".into(), Tensor::new([values.len(), 1], values.to_vec()).unwrap())])
    }

    fn tiny_cfg(text: &str) -> TrainConfig {
        let mut cfg = TrainConfig::from_text("image_size=32\nbatch_size=2\nsteps=6\nqueue_len=64\nseed=3").unwrap();
        cfg.apply_text(text).unwrap();
        cfg.validate().unwrap();
        cfg
    }

    fn images(n: usize) -> Vec<Tensor> {
        generate(&SceneSpec::new(32, 9), n).into_iter().map(|i| i.image).collect()
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(cosine_lr(0, 100, 1.0, 256), 1.0);
        assert!(cosine_lr(100, 100, 1.0, 256).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 1.0, 256) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(0, 100, 1.0, 512), 2.0);
        assert_eq!(cosine_lr(0, 100, 1.0, 8), 8.0 / 256.0);
        let cfg = TrainConfig::default();
        assert_eq!(effective_lr(0, &cfg), 8.0 / 256.0);
        let acc = TrainConfig {
            accumulation_steps: 4,
            ..TrainConfig::default()
        };
        assert_eq!(effective_lr(0, &acc), 32.0 / 256.0);
    }

    #[test]
    fn sgd_examples() {
        let mut w = params(&[1.0, -2.0]);
        let mut v = w.zeros_like();
        sgd_step(&mut w, &params(&[0.0, 0.0]), &mut v, 0.1, 0.9, 0.0);
        assert_eq!(w, params(&[1.0, -2.0]));

        let mut w = params(&[2.0]);
        let mut v = w.zeros_like();
        sgd_step(&mut w, &params(&[0.5]), &mut v, 0.1, 0.0, 0.01);
        assert_eq!(w.tensors()[0].data()[0], 2.0 - 0.1 * (0.5 + 0.01 * 2.0));

        // Hand-unrolled: v1 = g1, w1 = w0 - lr g1; v2 = 0.9 g1 + g2, w2 = w1 - lr v2.
        let mut w = params(&[1.0]);
        let mut v = w.zeros_like();
        sgd_step(&mut w, &params(&[0.3]), &mut v, 0.5, 0.9, 0.0);
        sgd_step(&mut w, &params(&[-0.2]), &mut v, 0.5, 0.9, 0.0);
        let w1 = 1.0 - 0.5 * 0.3;
        let w2 = w1 - 0.5 * (0.9 * 0.3 - 0.2);
        assert!((w.tensors()[0].data()[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn lars_examples() {
        let scalar = |x: f64| Params::new(vec![("w".into(), Tensor::scalar(x))]);
        let mut w = scalar(2.0);
        let mut v = w.zeros_like();
        lars_step(&mut w, &scalar(1.0), &mut v, 1.0, 0.0, 0.0, 0.001, 0.0);
        assert!((w.tensors()[0].item() - 1.998).abs() < 1e-15);

        let mut w = params(&[1.0, 2.0]);
        let mut v = w.zeros_like();
        lars_step(&mut w, &params(&[0.0, 0.0]), &mut v, 1.0, 0.9, 0.0, 0.001, 1e-9);
        assert_eq!(w, params(&[1.0, 2.0]));

        // Equal norms with unit trust reduce to plain SGD.
        let (w0, g) = (params(&[3.0, 4.0]), params(&[0.0, 5.0]));
        let (mut a, mut va) = (w0.clone(), w0.zeros_like());
        let (mut b, mut vb) = (w0.clone(), w0.zeros_like());
        lars_step(&mut a, &g, &mut va, 0.1, 0.9, 0.0, 1.0, 0.0);
        sgd_step(&mut b, &g, &mut vb, 0.1, 0.9, 0.0);
        assert_eq!(a, b);

        // Biases: local rate 1 and no weight decay.
        let bias = |x: &[f64]| Params::new(vec![("b".into(), Tensor::vector(x.to_vec()))]);
        let mut w = bias(&[1.0, 1.0]);
        let mut v = w.zeros_like();
        lars_step(&mut w, &bias(&[0.5, 0.0]), &mut v, 0.1, 0.0, 0.5, 0.001, 1e-9);
        assert_eq!(w, bias(&[0.95, 1.0]));
    }

    #[test]
    fn feature_std_examples() {
        assert_eq!(feature_std(&[vec![1.0, 2.0], vec![2.0, 4.0]]), 0.0);
        // Two orthogonal unit vectors: per-dim variance 1/4 each.
        let s = feature_std(&[vec![1.0, 0.0], vec![0.0, 3.0]]);
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
        let s = feature_std(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_seeds_give_identical_metrics() {
        let run = || {
            let mut t = Trainer::new(tiny_cfg("steps=3"), images(4)).unwrap();
            t.run(|_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for m in &a {
            assert!(m.loss.is_finite() && (-1.0..=1.0).contains(&m.loss), "{m:?}");
        }
    }

    #[test]
    fn target_never_receives_gradients() {
        for extra in [
            "loss_mode=cluster",
            "loss_mode=cluster\ndense=true\nalignment=roi",
            "loss_mode=wo_kmeans\nalignment=none",
            "loss_mode=moco",
        ] {
            let t = Trainer::new(tiny_cfg(extra), images(2)).unwrap();
            let mut fwd = t.forward_image(0, 0).unwrap();
            fwd.tape.backward(fwd.loss).unwrap();
            assert!(fwd.target.vars().iter().all(|&v| fwd.tape.grad(v).is_none()), "{extra}");
            assert!(fwd.online.vars().iter().any(|&v| fwd.tape.grad(v).is_some()), "{extra}");
        }
    }

    #[test]
    fn contrastive_runs_start_with_a_full_queue() {
        let t = Trainer::new(tiny_cfg("loss_mode=moco\nqueue_len=40"), images(2)).unwrap();
        let q = &t.state().queue;
        assert_eq!((q.len(), q.cursor()), (40, 0));
        for e in q.entries() {
            assert!((e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let t = Trainer::new(tiny_cfg("loss_mode=cluster"), images(2)).unwrap();
        assert!(t.state().queue.is_empty());
    }

    #[test]
    fn accumulated_gradients_equal_the_large_batch() {
        let imgs = images(6);
        let split = Trainer::new(tiny_cfg("batch_size=2\naccumulation_steps=2\nsteps=4"), imgs.clone()).unwrap();
        let whole = Trainer::new(tiny_cfg("batch_size=4\naccumulation_steps=1\nsteps=2"), imgs).unwrap();
        assert_eq!(split.state().online, whole.state().online);
        let mut parts = split.gradients(0, 0..2).unwrap();
        add_into(&mut parts, &split.gradients(0, 2..4).unwrap());
        let full = whole.gradients(0, 0..4).unwrap();
        for (a, b) in parts.tensors().iter().zip(full.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }

        // The parameter update after the boundary matches too.
        let (mut split, mut whole) = (split, whole);
        split.step().unwrap();
        assert_eq!(split.state().online, whole.state().online, "no update before the boundary");
        split.step().unwrap();
        whole.step().unwrap();
        for (a, b) in split.state().online.tensors().iter().zip(whole.state().online.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn target_follows_the_ema_recurrence() {
        let mut t = Trainer::new(tiny_cfg("steps=5"), images(3)).unwrap();
        let mut expected = t.state().target.clone();
        for _ in 0..5 {
            let m = t.step().unwrap();
            let online = &t.state().online;
            for (x, o) in expected.tensors_mut().iter_mut().zip(online.tensors()) {
                for (x, &o) in x.data_mut().iter_mut().zip(o.data()) {
                    *x = m.tau * *x + (1.0 - m.tau) * o;
                }
            }
        }
        for (a, b) in t.state().target.tensors().iter().zip(expected.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let mut t = Trainer::new(tiny_cfg("loss_mode=moco\nsteps=2"), images(2)).unwrap();
        t.step().unwrap();
        let ckpt = t.checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let restored = Trainer::from_checkpoint(&back, images(2)).unwrap();
        assert_eq!(restored.state(), t.state());
        assert!(!restored.state().queue.is_empty());

        let bytes = fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(m)) if m.contains("version")));
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(m)) if m.contains("truncated")));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny_cfg("steps=4\nalignment=roi");
        let mut full = Trainer::new(cfg.clone(), images(3)).unwrap();
        let reference = full.run(|_| {}).unwrap();
        let mut first = Trainer::new(cfg, images(3)).unwrap();
        first.step().unwrap();
        first.step().unwrap();
        let mut resumed = Trainer::from_checkpoint(&first.checkpoint(), images(3)).unwrap();
        let tail = resumed.run(|_| {}).unwrap();
        assert_eq!(tail, reference[2..].to_vec());
        assert_eq!(resumed.state(), full.state());
    }

    #[test]
    fn alignment_modes_build_matching_models() {
        for mode in AlignMode::ALL {
            let cfg = tiny_cfg(&format!("alignment={mode}\nsteps=1"));
            let mut t = Trainer::new(cfg, images(2)).unwrap();
            assert!(t.step().unwrap().loss.is_finite());
        }
    }
}
