//! Run configuration as flat `key=value` text.
//!
//! Files hold one assignment per line; `#` starts a comment. Later
//! assignments win, so command-line overrides are simply appended after the
//! file contents. Unknown keys and malformed values are errors naming the key.

use std::fmt::Display;
use std::str::FromStr;

use crate::align::AlignMode;
use crate::corpus::SceneSpec;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::objective::{KMeansMetric, LossMode};
use crate::views::{PhotoConfig, SamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Sgd,
    Lars,
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Lars => "lars",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "lars" => Ok(Optimizer::Lars),
            other => Err(Error::config(
                "optimizer",
                format!("invalid value `{other}`, expected one of sgd, lars"),
            )),
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Micro-batches summed before each optimizer update.
    pub accumulation_steps: usize,
    pub lr_base: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    pub lars_trust: f64,
    pub lars_eps: f64,
    /// Weight of the global (1D) loss; the local (2D) loss gets `1 - lambda`.
    pub lambda: f64,
    pub loss_mode: LossMode,
    /// Ignored by `loss_mode=moco`, which always aligns by RoI.
    pub alignment: AlignMode,
    pub normalize_offset: bool,
    pub self_attention: bool,
    /// `None` picks the alignment-dependent default: on for RoI, off otherwise.
    pub residual: Option<bool>,
    pub dense: bool,
    pub k: usize,
    pub kmeans_metric: KMeansMetric,
    pub kmeans_iters: usize,
    pub iou_threshold: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub flip_prob: f64,
    pub augment: bool,
    pub tau_base: f64,
    pub temperature: f64,
    pub queue_len: usize,
    pub symmetrize: bool,
    pub seed: u64,
    pub image_size: usize,
    pub corpus_size: usize,
    pub eval_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub proj2d_hidden: usize,
    pub proj2d_out: usize,
    pub proj1d_hidden: usize,
    pub proj1d_out: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            accumulation_steps: 1,
            lr_base: 1.0,
            weight_decay: 1e-5,
            momentum: 0.9,
            optimizer: Optimizer::Sgd,
            lars_trust: 0.001,
            lars_eps: 1e-8,
            lambda: 0.5,
            loss_mode: LossMode::Cluster,
            alignment: AlignMode::Offset,
            normalize_offset: true,
            self_attention: true,
            residual: None,
            dense: false,
            k: 3,
            kmeans_metric: KMeansMetric::Cosine,
            kmeans_iters: 10,
            iou_threshold: 0.5,
            min_scale: 0.08,
            max_scale: 1.0,
            flip_prob: 0.5,
            augment: true,
            tau_base: 0.996,
            temperature: 0.2,
            queue_len: 1024,
            symmetrize: true,
            seed: 0,
            image_size: 64,
            corpus_size: 512,
            eval_size: 64,
            min_instances: 2,
            max_instances: 5,
            proj2d_hidden: 64,
            proj2d_out: 32,
            proj1d_hidden: 128,
            proj1d_out: 64,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

impl TrainConfig {
    /// Every key in serialization order.
    pub const KEYS: &'static [&'static str] = &[
        "steps",
        "batch_size",
        "accumulation_steps",
        "lr_base",
        "weight_decay",
        "momentum",
        "optimizer",
        "lars_trust",
        "lars_eps",
        "lambda",
        "loss_mode",
        "alignment",
        "normalize_offset",
        "self_attention",
        "residual",
        "dense",
        "K",
        "kmeans_metric",
        "kmeans_iters",
        "iou_threshold",
        "min_scale",
        "max_scale",
        "flip_prob",
        "augment",
        "tau_base",
        "temperature",
        "queue_len",
        "symmetrize",
        "seed",
        "image_size",
        "corpus_size",
        "eval_size",
        "min_instances",
        "max_instances",
        "proj2d_hidden",
        "proj2d_out",
        "proj1d_hidden",
        "proj1d_out",
    ];

    /// Parses `key=value` text on top of the defaults and validates the result.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies assignments without validating, so several sources can be layered.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected key=value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "accumulation_steps" => self.accumulation_steps = parse(key, value)?,
            "lr_base" => self.lr_base = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "lars_trust" => self.lars_trust = parse(key, value)?,
            "lars_eps" => self.lars_eps = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "loss_mode" => self.loss_mode = value.parse()?,
            "alignment" => self.alignment = value.parse()?,
            "normalize_offset" => self.normalize_offset = parse_bool(key, value)?,
            "self_attention" => self.self_attention = parse_bool(key, value)?,
            "residual" => {
                self.residual = match value {
                    "auto" => None,
                    v => Some(parse_bool(key, v)?),
                }
            }
            "dense" => self.dense = parse_bool(key, value)?,
            "K" | "k" => self.k = parse(key, value)?,
            "kmeans_metric" => self.kmeans_metric = value.parse()?,
            "kmeans_iters" => self.kmeans_iters = parse(key, value)?,
            "iou_threshold" => self.iou_threshold = parse(key, value)?,
            "min_scale" => self.min_scale = parse(key, value)?,
            "max_scale" => self.max_scale = parse(key, value)?,
            "flip_prob" => self.flip_prob = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "tau_base" => self.tau_base = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "queue_len" => self.queue_len = parse(key, value)?,
            "symmetrize" => self.symmetrize = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "corpus_size" => self.corpus_size = parse(key, value)?,
            "eval_size" => self.eval_size = parse(key, value)?,
            "min_instances" => self.min_instances = parse(key, value)?,
            "max_instances" => self.max_instances = parse(key, value)?,
            "proj2d_hidden" => self.proj2d_hidden = parse(key, value)?,
            "proj2d_out" => self.proj2d_out = parse(key, value)?,
            "proj1d_hidden" => self.proj1d_hidden = parse(key, value)?,
            "proj1d_out" => self.proj1d_out = parse(key, value)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Current value of `key` in the same syntax [`TrainConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "accumulation_steps" => self.accumulation_steps.to_string(),
            "lr_base" => self.lr_base.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "momentum" => self.momentum.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "lars_trust" => self.lars_trust.to_string(),
            "lars_eps" => self.lars_eps.to_string(),
            "lambda" => self.lambda.to_string(),
            "loss_mode" => self.loss_mode.to_string(),
            "alignment" => self.alignment.to_string(),
            "normalize_offset" => self.normalize_offset.to_string(),
            "self_attention" => self.self_attention.to_string(),
            "residual" => self.residual.map_or("auto".to_string(), |r| r.to_string()),
            "dense" => self.dense.to_string(),
            "K" => self.k.to_string(),
            "kmeans_metric" => self.kmeans_metric.to_string(),
            "kmeans_iters" => self.kmeans_iters.to_string(),
            "iou_threshold" => self.iou_threshold.to_string(),
            "min_scale" => self.min_scale.to_string(),
            "max_scale" => self.max_scale.to_string(),
            "flip_prob" => self.flip_prob.to_string(),
            "augment" => self.augment.to_string(),
            "tau_base" => self.tau_base.to_string(),
            "temperature" => self.temperature.to_string(),
            "queue_len" => self.queue_len.to_string(),
            "symmetrize" => self.symmetrize.to_string(),
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "corpus_size" => self.corpus_size.to_string(),
            "eval_size" => self.eval_size.to_string(),
            "min_instances" => self.min_instances.to_string(),
            "max_instances" => self.max_instances.to_string(),
            "proj2d_hidden" => self.proj2d_hidden.to_string(),
            "proj2d_out" => self.proj2d_out.to_string(),
            "proj1d_hidden" => self.proj1d_hidden.to_string(),
            "proj1d_out" => self.proj1d_out.to_string(),
            _ => return None,
        })
    }

    /// All keys as `key=value` lines; parses back to an equal config.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(key, msg)) };
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        check(self.steps >= 1, "steps", "must be at least 1")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(self.accumulation_steps >= 1, "accumulation_steps", "must be at least 1")?;
        check(self.lr_base.is_finite() && self.lr_base >= 0.0, "lr_base", "must be non-negative")?;
        check(self.weight_decay >= 0.0, "weight_decay", "must be non-negative")?;
        check(unit(self.momentum), "momentum", "must lie in [0, 1]")?;
        check(self.lars_trust > 0.0, "lars_trust", "must be positive")?;
        check(self.lars_eps >= 0.0, "lars_eps", "must be non-negative")?;
        check(unit(self.lambda), "lambda", "must lie in [0, 1]")?;
        check(self.k >= 1, "K", "must be at least 1")?;
        check(self.kmeans_iters >= 1, "kmeans_iters", "must be at least 1")?;
        check(unit(self.iou_threshold), "iou_threshold", "must lie in [0, 1]")?;
        check(self.min_scale > 0.0 && self.min_scale <= 1.0, "min_scale", "must lie in (0, 1]")?;
        check(
            self.max_scale >= self.min_scale && self.max_scale <= 1.0,
            "max_scale",
            "must lie in [min_scale, 1]",
        )?;
        check(unit(self.flip_prob), "flip_prob", "must lie in [0, 1]")?;
        check(unit(self.tau_base), "tau_base", "must lie in [0, 1]")?;
        check(self.temperature > 0.0, "temperature", "must be positive")?;
        check(self.corpus_size >= 1, "corpus_size", "must be at least 1")?;
        check(self.eval_size >= 1, "eval_size", "must be at least 1")?;
        check(self.min_instances >= 1, "min_instances", "must be at least 1")?;
        check(
            self.max_instances >= self.min_instances && self.max_instances <= 255,
            "max_instances",
            "must lie in [min_instances, 255]",
        )?;
        for (key, v) in [
            ("proj2d_hidden", self.proj2d_hidden),
            ("proj2d_out", self.proj2d_out),
            ("proj1d_hidden", self.proj1d_hidden),
            ("proj1d_out", self.proj1d_out),
        ] {
            check(v >= 1, key, "must be at least 1")?;
        }
        let stride = self.model_config().total_stride();
        check(
            self.image_size >= stride && self.image_size.is_multiple_of(stride) && self.image_size <= u16::MAX as usize,
            "image_size",
            &format!("must be a positive multiple of {stride}"),
        )?;
        let cells = (self.image_size / stride).pow(2);
        check(
            self.k <= cells,
            "K",
            &format!("cannot exceed the {cells} feature-map cells"),
        )?;
        Ok(())
    }

    /// Residual connection after resolving the alignment-dependent default.
    pub fn residual(&self) -> bool {
        self.residual.unwrap_or(self.effective_alignment() == AlignMode::Roi)
    }

    /// The alignment actually used; the contrastive variant always aligns by RoI.
    pub fn effective_alignment(&self) -> AlignMode {
        if self.loss_mode == LossMode::Moco {
            AlignMode::Roi
        } else {
            self.alignment
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let offset = self.effective_alignment() == AlignMode::Offset && self.loss_mode != LossMode::Moco;
        ModelConfig {
            proj2d_hidden: self.proj2d_hidden,
            proj2d_out: self.proj2d_out,
            pred2d_hidden: self.proj2d_hidden,
            pred2d_extra_in: if offset { 2 } else { 0 },
            proj1d_hidden: self.proj1d_hidden,
            proj1d_out: self.proj1d_out,
            pred1d_hidden: self.proj1d_hidden,
            ..ModelConfig::default()
        }
    }

    /// Synthetic corpus generator. Training uses the first `corpus_size`
    /// images of this stream and evaluation the `eval_size` images after them.
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            instances: (self.min_instances, self.max_instances),
            ..SceneSpec::new(self.image_size, self.seed)
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            iou_threshold: self.iou_threshold,
            min_scale: self.min_scale,
            max_scale: self.max_scale,
            out_size: (self.image_size, self.image_size),
            flip_prob: self.flip_prob,
            photo: if self.augment {
                PhotoConfig::byol(self.image_size)
            } else {
                PhotoConfig::disabled()
            },
            ..SamplerConfig::default()
        }
    }
}
