//! `multisiam` command-line entry point.
//!
//! ```text
//! multisiam gen|train|eval|viz|gradcheck --config <path> [--key=value ...] --out <dir>
//! ```
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 runtime failure,
//! 3 verification failure.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use multisiam::corpus::{generate, generate_range, write_image};
use multisiam::network::Network;
use multisiam::probe::{
    backbone_features, colorize, full_resolution_clusters, image_rgb, probe_backbone, side_by_side, write_ppm,
    ProbeReport,
};
use multisiam::rng::{stream, Stream};
use multisiam::trainer::{load_checkpoint, save_checkpoint, Checkpoint, Trainer};
use multisiam::verify::{gradient_suite, GRADCHECK_TOL};
use multisiam::{Error, TrainConfig};

const SEED_ENV: &str = "MULTISIAM_SEED";

#[derive(Parser)]
#[command(name = "multisiam", version, about = "Multi-instance Siamese self-supervised learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus as .msim files.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of images (defaults to corpus_size).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train, writing metrics.jsonl, checkpoints and manifest.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also save a checkpoint every N steps (0 = only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Cluster held-out images with the trained and the random-init backbone.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Option<PathBuf>,
    },
    /// Write side-by-side cluster maps as viz_<idx>.ppm.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

/// Flags clap knows about; every other `--key=value` is a config override.
const FLAGS: &[&str] = &["config", "out", "checkpoint", "checkpoint-every", "count", "seeds", "help", "version"];

fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut keep = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some((key, value)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            if !FLAGS.contains(&key) {
                overrides.push((key.to_string(), value.to_string()));
                continue;
            }
        }
        keep.push(a);
    }
    (keep, overrides)
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Verification(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let config = e
            .chain()
            .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config { .. })));
        if config {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

/// Defaults (or `base`), then the file, then the seed variable, then flags.
fn resolve_config(base: Option<&str>, file: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(text) = base {
        cfg.apply_text(text)?;
    }
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.set("seed", seed.trim())?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> anyhow::Result<PathBuf> {
    let dir = common.out.clone().ok_or_else(|| anyhow!("--out is required"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn require_out(common: &Common) -> Result<PathBuf, Failure> {
    if common.out.is_none() {
        return Err(Failure::Usage(anyhow!("--out <dir> is required")));
    }
    Ok(out_dir(common)?)
}

fn cmd_gen(common: &Common, count: Option<usize>, overrides: &[(String, String)]) -> CmdResult {
    let cfg = resolve_config(None, common.config.as_deref(), overrides)?;
    let dir = require_out(common)?;
    let n = count.unwrap_or(cfg.corpus_size);
    for (i, img) in generate(&cfg.scene_spec(), n).iter().enumerate() {
        let path = dir.join(format!("img_{i:05}.msim"));
        write_image(&path, img).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {n} images to {}", dir.display());
    Ok(())
}

fn cmd_train(
    common: &Common,
    resume: Option<&Path>,
    every: usize,
    overrides: &[(String, String)],
) -> CmdResult {
    let dir = require_out(common)?;
    let (mut trainer, resumed) = match resume {
        Some(path) => {
            let mut ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let cfg = resolve_config(Some(&ckpt.config_text), common.config.as_deref(), overrides)?;
            ckpt.config_text = cfg.to_text();
            let images = training_images(&cfg);
            (Trainer::from_checkpoint(&ckpt, images).context("restoring checkpoint")?, true)
        }
        None => {
            let cfg = resolve_config(None, common.config.as_deref(), overrides)?;
            let images = training_images(&cfg);
            (Trainer::new(cfg, images)?, false)
        }
    };
    let metrics_path = dir.join("metrics.jsonl");
    let file = if resumed {
        OpenOptions::new().create(true).append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut metrics = BufWriter::new(file);
    let mut checkpoints = Vec::new();
    while !trainer.is_finished() {
        let m = trainer.step()?;
        writeln!(metrics, "{}", serde_json::to_string(&m).context("encoding metrics")?).context("writing metrics")?;
        if m.step % 50 == 0 {
            eprintln!("step {:>5}  loss {:+.4}  feature_std {:.4}", m.step, m.loss, m.feature_std);
        }
        let done = trainer.state().step;
        if every > 0 && done % every == 0 && !trainer.is_finished() {
            let p = dir.join(format!("checkpoint_{done:06}.msia"));
            save_checkpoint(&trainer.checkpoint(), &p).with_context(|| format!("writing {}", p.display()))?;
            checkpoints.push(p);
        }
    }
    metrics.flush().context("writing metrics")?;
    let last = dir.join("checkpoint.msia");
    save_checkpoint(&trainer.checkpoint(), &last).with_context(|| format!("writing {}", last.display()))?;
    checkpoints.push(last);
    write_manifest(&dir, trainer.config(), &metrics_path, &checkpoints, resume)?;
    println!("trained {} steps; outputs in {}", trainer.state().step, dir.display());
    Ok(())
}

fn training_images(cfg: &TrainConfig) -> Vec<multisiam::Tensor> {
    generate(&cfg.scene_spec(), cfg.corpus_size).into_iter().map(|i| i.image).collect()
}

fn write_manifest(
    dir: &Path,
    cfg: &TrainConfig,
    metrics: &Path,
    checkpoints: &[PathBuf],
    resumed_from: Option<&Path>,
) -> anyhow::Result<()> {
    let config: serde_json::Map<String, serde_json::Value> = TrainConfig::KEYS
        .iter()
        .map(|k| (k.to_string(), json!(cfg.get(k).expect("listed key"))))
        .collect();
    let manifest = json!({
        "config": config,
        "seed": cfg.seed,
        "code_version": env!("CARGO_PKG_VERSION"),
        "metrics": metrics.display().to_string(),
        "checkpoints": checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "resumed_from": resumed_from.map(|p| p.display().to_string()),
    });
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Checkpointed config with file and flag overrides, plus the checkpoint itself.
fn checkpointed(common: &Common, path: &Path, overrides: &[(String, String)]) -> anyhow::Result<(TrainConfig, Checkpoint)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = resolve_config(Some(&ckpt.config_text), common.config.as_deref(), overrides)?;
    Ok((cfg, ckpt))
}

fn cmd_eval(common: &Common, checkpoint: &Path, overrides: &[(String, String)]) -> CmdResult {
    let (cfg, ckpt) = checkpointed(common, checkpoint, overrides)?;
    let net = Network::new(cfg.model_config());
    let trained = ckpt.params("online.");
    let random = net.init_params(&mut stream(cfg.seed, Stream::ParamInit, &[]));
    let held_out = generate_range(&cfg.scene_spec(), cfg.corpus_size, cfg.eval_size);
    let report = ProbeReport::new(
        probe_backbone(&net, &trained, &held_out, cfg.k, cfg.kmeans_metric, cfg.seed)?,
        probe_backbone(&net, &random, &held_out, cfg.k, cfg.kmeans_metric, cfg.seed)?,
    );
    let text = serde_json::to_string_pretty(&report).context("encoding report")?;
    if common.out.is_some() {
        let path = out_dir(common)?.join("probe.json");
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_viz(common: &Common, checkpoint: &Path, count: usize, overrides: &[(String, String)]) -> CmdResult {
    let dir = require_out(common)?;
    let (cfg, ckpt) = checkpointed(common, checkpoint, overrides)?;
    let net = Network::new(cfg.model_config());
    let trained = ckpt.params("online.");
    let random = net.init_params(&mut stream(cfg.seed, Stream::ParamInit, &[]));
    let held_out = generate_range(&cfg.scene_spec(), cfg.corpus_size, count.min(cfg.eval_size));
    for (i, img) in held_out.iter().enumerate() {
        let (h, w) = (img.height(), img.width());
        let mut panels = vec![image_rgb(&img.image)];
        for params in [&random, &trained] {
            let f = backbone_features(&net, params, &img.image)?;
            panels.push(colorize(&full_resolution_clusters(&f, h, w, cfg.k, cfg.kmeans_metric, cfg.seed)?));
        }
        let path = dir.join(format!("viz_{i}.ppm"));
        write_ppm(&path, w * panels.len(), h, &side_by_side(&panels, h, w))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} cluster maps to {}", held_out.len(), dir.display());
    Ok(())
}

fn cmd_gradcheck(common: &Common, seeds: u64) -> CmdResult {
    let t = std::time::Instant::now();
    let seeds: Vec<u64> = (0..seeds).collect();
    let reports = gradient_suite(&seeds).map_err(|e| Failure::Runtime(e.into()))?;
    let mut lines = Vec::new();
    let mut failed = 0;
    for r in &reports {
        let ok = r.passes(GRADCHECK_TOL);
        failed += usize::from(!ok);
        lines.push(format!(
            "{} {:<40} max_rel_err {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            r.op_name,
            r.max_relative_error
        ));
    }
    let summary = format!(
        "{} checks, {failed} failed, tolerance {GRADCHECK_TOL:e}, {:.2}s",
        reports.len(),
        t.elapsed().as_secs_f64()
    );
    lines.push(summary.clone());
    if common.out.is_some() {
        let path = out_dir(common)?.join("gradcheck.txt");
        fs::write(&path, lines.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    for l in &lines {
        println!("{l}");
    }
    if failed > 0 {
        return Err(Failure::Verification(summary));
    }
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> CmdResult {
    match &cli.command {
        Command::Gen { common, count } => cmd_gen(common, *count, overrides),
        Command::Train {
            common,
            checkpoint,
            checkpoint_every,
        } => cmd_train(common, checkpoint.as_deref(), *checkpoint_every, overrides),
        Command::Eval { common, checkpoint } => {
            let path = checkpoint.as_deref().ok_or_else(|| Failure::Usage(anyhow!("--checkpoint is required")))?;
            cmd_eval(common, path, overrides)
        }
        Command::Viz {
            common,
            checkpoint,
            count,
        } => {
            let path = checkpoint.as_deref().ok_or_else(|| Failure::Usage(anyhow!("--checkpoint is required")))?;
            cmd_viz(common, path, *count, overrides)
        }
        Command::Gradcheck { common, seeds } => {
            if !overrides.is_empty() {
                bail_usage(format!("gradcheck takes no config overrides, got --{}", overrides[0].0))?;
            }
            cmd_gradcheck(common, *seeds)
        }
    }
}

fn bail_usage(msg: String) -> CmdResult {
    Err(Failure::Usage(anyhow::Error::msg(msg)))
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}
