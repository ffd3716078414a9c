//! `trunctl`: inspect backbones, run transfer experiments, search and
//! detect truncation points, correlate activations, and emit reports.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use trunctl_core::config::ExperimentConfig;
use trunctl_core::experiment::{self, run_experiment};
use trunctl_core::graph::TruncationPoint;
use trunctl_core::ndarray::Ix2;
use trunctl_core::report::{emit_report, LayerCorrelation};
use trunctl_core::search::{detect_truncation, two_stage_search, SearchResult, TrainingRunner};
use trunctl_core::surgery::Strategy;
use trunctl_core::svcca::{correlation_report, SvccaOptions};
use trunctl_core::synth::{write_dataset, SyntheticTaskSpec, TaskKind};
use trunctl_core::training::make_split;
use trunctl_core::{actv, zoo};

#[derive(Parser)]
#[command(name = "trunctl", version, about = "Truncated transfer learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a backbone's truncation points and complexity counts.
    Inspect {
        #[arg(long, default_value = "micro")]
        model: String,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Also write points.json under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment from a config file into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage truncation search; each candidate runs in its own subdir.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Low-cost cutoff detection: exactly two finetuning runs.
    Detect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate two activation dumps (.actv files or run directories).
    Svcca {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.99)]
        variance_keep: f64,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset and its manifest.
    Synth {
        /// texture, shape, or source.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble tables and plots from finished run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Exit zero even when records are missing fields.
        #[arg(long)]
        allow_gaps: bool,
    },
}

fn main() -> anyhow::Result<()> {
    if let Ok(device) = std::env::var("TRUNCTL_DEVICE") {
        if device != "cpu" {
            bail!("device `{device}` is not available; only `cpu` is supported");
        }
    }
    match Cli::parse().command {
        Command::Inspect {
            model,
            channels,
            size,
            json,
            out,
        } => inspect(&model, channels, size, json, out.as_deref()),
        Command::Train { config, out } => train(&config, &out),
        Command::Search { config, out } => search(&config, &out),
        Command::Detect { config, out } => detect(&config, &out),
        Command::Svcca {
            before,
            after,
            out,
            variance_keep,
            reps,
            seed,
        } => svcca(&before, &after, &out, variance_keep, reps, seed),
        Command::Synth {
            kind,
            size,
            per_class,
            noise,
            seed,
            out,
        } => synth(&kind, size, per_class, noise, seed, &out),
        Command::Report {
            inputs,
            out,
            allow_gaps,
        } => report(&inputs, &out, allow_gaps),
    }
}

fn point_row(p: &TruncationPoint) -> String {
    let spatial = p
        .spatial
        .map(|(h, w)| format!("{h}x{w}"))
        .unwrap_or_else(|| "?".into());
    let macs = p.cum_macs.map(|m| m.to_string()).unwrap_or_else(|| "?".into());
    format!(
        "{:>5}  {:<18} {:>5}  {:>8}  {:>7}  {:>12}  {:>14}",
        p.index, p.layer, p.block, p.out_channels, spatial, p.cum_params, macs
    )
}

fn inspect(
    model: &str,
    channels: usize,
    size: usize,
    json: bool,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let graph = zoo::by_name(model, (channels, size, size))?;
    let points = graph.enumerate_truncation_points();
    if json {
        println!("{}", serde_json::to_string_pretty(&points)?);
    } else {
        println!(
            "{model}: {} layers, {} blocks, {} truncation points",
            graph.len(),
            graph.blocks.len(),
            points.len()
        );
        println!(
            "{:>5}  {:<18} {:>5}  {:>8}  {:>7}  {:>12}  {:>14}",
            "index", "layer", "block", "channels", "spatial", "params", "macs"
        );
        for p in &points {
            println!("{}", point_row(p));
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("points.json"), serde_json::to_string_pretty(&points)?)?;
    }
    Ok(())
}

fn train(config: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let outcome = run_experiment(&cfg, out)?;
    let s = &outcome.summary;
    println!(
        "{} {} done: best val AUPRC {:.4} (epoch {}), test AUPRC {:.4}, test AUROC {:.4}, {} params",
        s.model,
        s.strategy,
        s.record.best_val_auprc,
        s.record.best_epoch,
        s.record.test_auprc,
        s.record.test_auroc,
        s.params
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn search(config: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let graph = cfg.model.graph()?;
    fs::create_dir_all(out)?;
    let result = two_stage_search(&graph, |cutoff| {
        let mut candidate = cfg.clone();
        candidate.strategy.strategy = Strategy::Ttl;
        candidate.strategy.cutoff = Some(cutoff);
        candidate.dump_activations = false;
        let dir = out.join(format!("candidates/k{cutoff:03}"));
        let outcome = run_experiment(&candidate, &dir)?;
        println!(
            "cutoff {cutoff:>3}: val AUPRC {:.4}",
            outcome.summary.record.best_val_auprc
        );
        Ok(outcome.summary.record.best_val_auprc)
    })?;
    print_search(&result);
    fs::write(out.join("search.json"), serde_json::to_string_pretty(&result)?)?;
    Ok(())
}

fn print_search(result: &SearchResult) {
    println!(
        "chosen cutoff {} ({}) after {} trainings ({} boundary, {} refined, {} skipped)",
        result.chosen.index,
        result.chosen.layer,
        result.total_trainings,
        result.stage1_scores.len(),
        result.stage2_scores.len(),
        result.skipped.len()
    );
}

fn detect(config: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = experiment::load_data(&cfg)?;
    let mut pretrained = experiment::load_init(&cfg)?
        .context("detect needs an [init] section pointing at a pretrained checkpoint")?;
    let split = make_split(&data.labels, cfg.data.split_seed)?;
    let mut runner = TrainingRunner {
        data: &data,
        split: &split,
        cfg: cfg.training.clone(),
        head: cfg.strategy.head.clone(),
        seed: cfg.training.seed,
    };
    let result = detect_truncation(&mut pretrained, &data, &split.test, &mut runner, &cfg.svcca)?;
    for ((k, gap), (_, dim)) in result.gaps.iter().zip(&result.dims) {
        let mark = if *k == result.detected.index { "  <- detected" } else { "" };
        println!("cutoff {k:>3} ({dim:>4} dims): gap {gap:.4}{mark}");
    }
    if result.fallback_used {
        println!("no cutoff overlapped the baseline; falling back to the deepest point");
    }
    println!(
        "detected cutoff {} ({}) with {} finetuning runs",
        result.detected.index, result.detected.layer, result.finetunes
    );
    fs::create_dir_all(out)?;
    fs::write(out.join("detection.json"), serde_json::to_string_pretty(&result)?)?;
    Ok(())
}

fn actv_files(path: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    if path.is_file() {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        return Ok(vec![(name, path.to_path_buf())]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("reading {}", path.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "actv") {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            files.push((name, p));
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("no .actv files under {}", path.display());
    }
    Ok(files)
}

fn svcca(
    before: &Path,
    after: &Path,
    out: &Path,
    variance_keep: f64,
    reps: usize,
    seed: u64,
) -> anyhow::Result<()> {
    let a = actv_files(before)?;
    let b = actv_files(after)?;
    let opts = SvccaOptions {
        variance_keep,
        ..SvccaOptions::default()
    };
    let mut layers = Vec::new();
    for (name, pa) in &a {
        let Some((_, pb)) = b.iter().find(|(n, _)| n == name) else {
            continue;
        };
        let x = actv::read(pa)?
            .into_dimensionality::<Ix2>()
            .map_err(|_| anyhow::anyhow!("{name}: activation dump is not a matrix"))?;
        let y = actv::read(pb)?
            .into_dimensionality::<Ix2>()
            .map_err(|_| anyhow::anyhow!("{name}: activation dump is not a matrix"))?;
        let report = correlation_report(&x, &y, &opts, reps, seed)?;
        println!(
            "{name}: mean {:.4} over {} coefficients, gap to baseline {:.4}",
            report.cca.mean,
            report.cca.coeffs.len(),
            report.auc_gap
        );
        layers.push(LayerCorrelation {
            layer: name.clone(),
            report,
        });
    }
    if layers.is_empty() {
        bail!("no layer names in common between the two dumps");
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("svcca.json"), serde_json::to_string_pretty(&layers)?)?;
    Ok(())
}

fn synth(
    kind: &str,
    size: usize,
    per_class: usize,
    noise: f64,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let kind = match kind {
        "texture" => TaskKind::Texture,
        "shape" => TaskKind::Shape,
        "source" => TaskKind::Source,
        other => bail!("unknown task kind `{other}` (expected texture, shape, or source)"),
    };
    let spec = SyntheticTaskSpec {
        kind,
        size,
        per_class,
        noise,
        seed,
    };
    let manifest = write_dataset(&spec, out)?;
    println!(
        "wrote {} images and {}",
        spec.classes() * per_class,
        manifest.display()
    );
    Ok(())
}

fn report(inputs: &[PathBuf], out: &Path, allow_gaps: bool) -> anyhow::Result<()> {
    let files = emit_report(inputs, out)?;
    print!("{}", fs::read_to_string(&files.table)?);
    println!(
        "wrote {}, {} and {} plot(s)",
        files.csv.display(),
        files.table.display(),
        files.plots.len()
    );
    if files.gaps > 0 {
        println!("{} record field(s) missing; cells flagged with -", files.gaps);
        if !allow_gaps {
            bail!("report has gaps");
        }
    }
    Ok(())
}
