//! Command-line surface: scenario generation, training, evaluation, raster
//! previews, and checkpoint inspection. Every command is deterministic
//! given its flags and input files; all randomness flows from explicit
//! seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use capmotion::config::{mix_seed, RunConfig};
use capmotion::map::sample::StandardizationStats;
use capmotion::map::scenario::{load_scenario, save_scenario};
use capmotion::map::synth::{generate_scenario, ScenarioKind};
use capmotion::model::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, TrainSummary};
use capmotion::model::ModelConfig;
use capmotion::raster::pgm::write_pgm;
use capmotion::raster::rasterize_chunk_stack;
use capmotion::train::baselines::{ConstantVelocityBaseline, PhysicsOracle};
use capmotion::train::dataset::{build_samples_with_stats, load_scenario_dir, LoadedScenario};
use capmotion::train::metrics::{evaluate, render_table, MetricsReport, ModelPredictor, Predictor};
use capmotion::train::{train_model, EpochLog};

#[derive(Parser)]
#[command(name = "capmotion", version, about = "Capsule-based short-term vehicle trajectory prediction")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic scenario files and a manifest.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated subset of: straight, curve, intersection.
        #[arg(long, default_value = "straight,curve,intersection")]
        kinds: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a predictor on a scenario directory.
    Train {
        /// Run configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the epoch log goes to the same path with a
        /// `.log` extension.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint and/or baselines over a scenario directory.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Baseline to include: cvh or oracle. Repeatable.
        #[arg(long)]
        baseline: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export the five raster layers around one agent as PGM images.
    Rasterize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        agent: String,
        /// Frame time in seconds.
        #[arg(long)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print checkpoint metadata, tensor shapes, and parameter counts.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("setting up the worker pool")?;
    }
    match cli.cmd {
        Cmd::Generate { seed, kinds, count, out } => cmd_generate(seed, &kinds, count, &out),
        Cmd::Train {
            config,
            data,
            out,
            epochs,
        } => cmd_train(config.as_deref(), &data, &out, epochs),
        Cmd::Eval {
            ckpt,
            baseline,
            data,
            report,
            config,
        } => cmd_eval(ckpt.as_deref(), &baseline, &data, report.as_deref(), config.as_deref()),
        Cmd::Rasterize {
            data,
            scenario,
            agent,
            t,
            out,
            config,
        } => cmd_rasterize(&data, &scenario, &agent, t, &out, config.as_deref()),
        Cmd::Inspect { ckpt } => cmd_inspect(&ckpt),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_kinds(kinds: &str) -> Result<Vec<ScenarioKind>> {
    let parsed: Result<Vec<ScenarioKind>> = kinds
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<ScenarioKind>().map_err(|e| anyhow!(e)))
        .collect();
    let parsed = parsed?;
    if parsed.is_empty() {
        bail!("--kinds selects no scenario kind");
    }
    Ok(parsed)
}

fn cmd_generate(seed: u64, kinds: &str, count: usize, out: &Path) -> Result<()> {
    let kinds = parse_kinds(kinds)?;
    if count == 0 {
        bail!("--count must be at least 1");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut manifest = Vec::with_capacity(count);
    for i in 0..count {
        let kind = kinds[i % kinds.len()];
        let file_seed = mix_seed(seed, &[i as u64]);
        // Two to three tracks per scenario, derived from the file seed.
        let n_agents = 2 + (mix_seed(file_seed, &[1]) % 2) as usize;
        let (map, tracks) = generate_scenario(file_seed, kind, n_agents);
        let name = format!("scenario_{i:04}.json");
        save_scenario(&map, &tracks, &out.join(&name))?;
        manifest.push(serde_json::json!({
            "file": name,
            "kind": kind.name(),
            "seed": file_seed,
            "agents": n_agents,
        }));
    }
    let manifest = serde_json::json!({
        "seed": seed,
        "count": count,
        "kinds": kinds.iter().map(|k| k.name()).collect::<Vec<_>>(),
        "scenarios": manifest,
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out.join("manifest.json"), text)
        .with_context(|| format!("writing manifest to {}", out.display()))?;
    println!("wrote {count} scenarios and manifest.json to {}", out.display());
    Ok(())
}

fn epoch_line(log: &EpochLog) -> String {
    format!(
        "epoch {:4}  lr {:>10.3e}  train_loss {:<12.6}  val_loss {:<12.6}  val_ade {:<12.6}",
        log.epoch, log.lr, log.train_loss, log.val_loss, log.val_ade
    )
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, epochs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.validate()?;
    }
    let scenarios = load_scenario_dir(data)?;
    if scenarios.is_empty() {
        bail!("no scenario files under {}", data.display());
    }
    let ds = capmotion::train::dataset::build_dataset(&scenarios, &cfg)?;
    println!(
        "{} scenarios -> {} training and {} validation samples",
        scenarios.len(),
        ds.train.len(),
        ds.val.len()
    );

    let model_cfg = ModelConfig::from_run(&cfg);
    let mut log_text = String::new();
    let outcome = train_model(&model_cfg, &cfg.train, &ds.train, &ds.val, cfg.seed, |entry| {
        let line = epoch_line(entry);
        println!("{line}");
        let _ = writeln!(log_text, "{line}");
    })?;

    let meta = CheckpointMeta {
        model: model_cfg,
        stats: ds.stats,
        train: TrainSummary {
            epochs_run: cfg.train.epochs,
            best_epoch: outcome.best_epoch,
            best_val_ade: (!outcome.best_val_ade.is_nan()).then_some(outcome.best_val_ade),
            final_train_loss: outcome.log.last().map_or(0.0, |l| l.train_loss),
        },
    };
    save_checkpoint(out, &meta, &outcome.params)?;
    let log_path = out.with_extension("log");
    fs::write(&log_path, log_text).with_context(|| format!("writing {}", log_path.display()))?;
    let best = if outcome.best_val_ade.is_nan() {
        "no validation split".to_string()
    } else {
        format!("best epoch {}, val ade {:.6}", outcome.best_epoch, outcome.best_val_ade)
    };
    println!("checkpoint written to {} ({best}), log to {}", out.display(), log_path.display());
    Ok(())
}

fn make_baseline(name: &str) -> Result<Box<dyn Predictor>> {
    match name {
        "cvh" => Ok(Box::new(ConstantVelocityBaseline)),
        "oracle" => Ok(Box::new(PhysicsOracle)),
        other => bail!("unknown baseline '{other}', expected cvh or oracle"),
    }
}

fn cmd_eval(
    ckpt: Option<&Path>,
    baselines: &[String],
    data: &Path,
    report: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    if ckpt.is_none() && baselines.is_empty() {
        bail!("nothing to evaluate: pass --ckpt and/or --baseline");
    }
    let cfg = load_config(config)?;
    let scenarios = load_scenario_dir(data)?;
    if scenarios.is_empty() {
        bail!("no scenario files under {}", data.display());
    }

    let mut predictors: Vec<Box<dyn Predictor>> = Vec::new();
    let stats = match ckpt {
        Some(path) => {
            let (meta, params, layout) = load_checkpoint(path)?;
            for (field, have, want) in [
                ("rho", cfg.rho, meta.model.rho),
                ("tau", cfg.tau, meta.model.tau),
                ("raster.out_px", cfg.raster.out_px, meta.model.caps.in_px),
            ] {
                if have != want {
                    bail!("config {field} {have} does not match checkpoint {field} {want}");
                }
            }
            predictors.push(Box::new(ModelPredictor {
                cfg: meta.model.clone(),
                layout,
                params,
            }));
            meta.stats
        }
        None => StandardizationStats::identity(),
    };
    for name in baselines {
        predictors.push(make_baseline(name)?);
    }

    let samples = build_samples_with_stats(&scenarios, &cfg, &stats)?;
    if samples.is_empty() {
        bail!("no complete samples in {}", data.display());
    }
    let horizons: Vec<usize> = capmotion::train::metrics::REPORT_HORIZONS_S
        .iter()
        .copied()
        .filter(|h| 2 * h <= cfg.tau)
        .collect();
    if horizons.is_empty() {
        bail!("tau {} is too short for even the 1 s horizon", cfg.tau);
    }

    let reports: Vec<MetricsReport> = predictors
        .iter()
        .map(|p| evaluate(p.as_ref(), &samples, &horizons))
        .collect::<capmotion::Result<_>>()?;
    print!("{}", render_table(&reports));
    println!("({} samples)", samples.len());
    if let Some(path) = report {
        let mut text = serde_json::to_string_pretty(&reports)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_rasterize(
    data: &Path,
    scenario_id: &str,
    agent_id: &str,
    t: f64,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let path = data.join(format!("{scenario_id}.json"));
    let (map, tracks) = if path.is_file() {
        load_scenario(&path)?
    } else {
        // Allow a directory of arbitrary file names by matching the stem.
        let scenarios = load_scenario_dir(data)?;
        let found: Vec<LoadedScenario> = scenarios.into_iter().filter(|s| s.id == scenario_id).collect();
        match found.into_iter().next() {
            Some(s) => (s.map, s.tracks),
            None => bail!("no scenario '{scenario_id}' under {}", data.display()),
        }
    };
    let track = tracks
        .iter()
        .find(|tr| tr.agent_id == agent_id)
        .ok_or_else(|| anyhow!("scenario '{scenario_id}' has no agent '{agent_id}'"))?;
    let state = track
        .states
        .iter()
        .find(|s| (s.t - t).abs() <= 1e-9)
        .ok_or_else(|| {
            anyhow!(
                "agent '{agent_id}' has no frame at t = {t}; frames run {} to {}",
                track.states.first().map_or(f64::NAN, |s| s.t),
                track.states.last().map_or(f64::NAN, |s| s.t)
            )
        })?;

    let stack = rasterize_chunk_stack(&map, state, track.length_m, track.width_m, &cfg.raster)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for layer in capmotion::map::SemanticLayerType::ALL {
        let img = stack.layer(layer);
        let name = format!("{scenario_id}_{agent_id}_t{t:.1}_{}.pgm", layer.name());
        let path = out.join(&name);
        write_pgm(&path, stack.out_px, stack.out_px, img)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_inspect(ckpt: &Path) -> Result<()> {
    let (meta, params, _) = load_checkpoint(ckpt)?;
    println!("checkpoint {}", ckpt.display());
    println!("format version: {}", capmotion::model::checkpoint::CHECKPOINT_VERSION);
    println!("model config:");
    let cfg_json = serde_json::to_string_pretty(&meta.model)?;
    for line in cfg_json.lines() {
        println!("  {line}");
    }
    let best_ade = meta
        .train
        .best_val_ade
        .map_or("-".to_string(), |v| format!("{v:.6}"));
    println!(
        "training: epochs_run {}, best_epoch {}, best_val_ade {}, final_train_loss {:.6}",
        meta.train.epochs_run, meta.train.best_epoch, best_ade, meta.train.final_train_loss
    );
    println!("standardization mean: {:?}", meta.stats.mean);
    println!("standardization std:  {:?}", meta.stats.std);
    println!("tensors:");
    for (name, tensor) in params.iter() {
        println!("  {:<20} {:?} = {}", name, tensor.shape, tensor.numel());
    }
    println!("backbone parameters: {}", meta.model.caps.param_count());
    println!("total parameters: {}", params.total_len());
    Ok(())
}
