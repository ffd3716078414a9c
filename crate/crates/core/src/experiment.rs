//! Experiment orchestration and on-disk artifacts.
//!
//! A run directory holds `config.snapshot` (full TOML, defaults included),
//! `metrics.jsonl` (one epoch record per line, appended live), `best.ckpt`
//! (binary named-tensor checkpoint of the selected model),
//! `summary.json` (final record plus complexity counts), and optionally
//! `activations/*.actv` matrices for correlation analysis.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actv;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::graph::HeadSpec;
use crate::nn::Model;
use crate::scalar::Float;
use crate::surgery::build_ftl;
use crate::training::{
    extract_activations, finetune, make_split, Dataset, ExperimentRecord,
};
use crate::{synth, TrainScalar};

/// Well-known file names inside a run directory.
#[derive(Clone, Debug)]
pub struct ExperimentPaths {
    pub dir: PathBuf,
}

impl ExperimentPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ExperimentPaths { dir: dir.into() }
    }

    pub fn snapshot(&self) -> PathBuf {
        self.dir.join("config.snapshot")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }

    pub fn activations(&self) -> PathBuf {
        self.dir.join("activations")
    }
}

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;

/// Write named tensors as little-endian f64 payloads, which round-trips
/// both scalar widths exactly.
pub fn save_checkpoint<S: Float>(
    path: &Path,
    entries: &[(String, Vec<usize>, Vec<S>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, shape, data) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Float>(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<S>)>> {
    let bad = |reason: &str| Error::format(path.display().to_string(), "checkpoint", reason);
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != CKPT_VERSION {
        return Err(bad("unsupported version"));
    }
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut entries = Vec::with_capacity(count);
    let mut u64buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let mut name = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf)?;
            data.push(S::cast(f64::from_le_bytes(u64buf)));
        }
        entries.push((name, shape, data));
    }
    Ok(entries)
}

/// Everything a report needs about one finished run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub model: String,
    pub strategy: String,
    pub cutoff: Option<usize>,
    pub unfreeze: Option<usize>,
    pub params: u64,
    pub macs: u64,
    pub classes: usize,
    pub record: ExperimentRecord,
}

pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub paths: ExperimentPaths,
    pub model: Model<TrainScalar>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::stage(name, e))
}

/// Materialize the configured dataset.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset<TrainScalar>> {
    if let Some(manifest) = &cfg.data.manifest {
        Dataset::from_manifest(manifest, cfg.model.channels, cfg.data.resize)
    } else if let Some(spec) = &cfg.data.synthetic {
        synth::generate(spec)
    } else {
        Err(Error::Config("no data source configured".into()))
    }
}

/// Reconstruct the warm-start model a config points at.
pub fn load_init(cfg: &ExperimentConfig) -> Result<Option<Model<TrainScalar>>> {
    let Some(init) = &cfg.init else {
        return Ok(None);
    };
    let graph = cfg.model.graph()?;
    let plan = build_ftl(&graph, HeadSpec::linear(init.classes))?;
    let mut model = Model::from_plan(&plan, 0)?;
    model.load_state_dict(&load_checkpoint(&init.ckpt)?)?;
    Ok(Some(model))
}

/// Run one experiment into `dir`: snapshot the config, build and optionally
/// warm-start the model, finetune with live epoch logging, then persist the
/// checkpoint, summary, and optional activation dumps. Partial artifacts
/// stay on disk when a stage fails, and the error names the stage.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    let paths = ExperimentPaths::new(dir);
    fs::create_dir_all(dir)?;
    stage("config", cfg.validate())?;
    fs::write(paths.snapshot(), stage("config", cfg.to_toml())?)?;

    let data = stage("data", load_data(cfg))?;
    let graph = stage("model", cfg.model.graph())?;
    let plan = stage("surgery", cfg.strategy.build(&graph))?;
    let mut model = stage(
        "surgery",
        Model::<TrainScalar>::from_plan(&plan, cfg.training.seed),
    )?;
    if let Some(pretrained) = stage("init", load_init(cfg))? {
        model.transfer_from(&pretrained, plan.fresh_above);
    }
    let split = stage("split", make_split(&data.labels, cfg.data.split_seed))?;

    let mut log = BufWriter::new(File::create(paths.metrics())?);
    let mut log_err = None;
    let record = stage(
        "training",
        finetune(&mut model, &data, &split, &cfg.training, |epoch| {
            let line = serde_json::to_string(epoch).expect("epoch records serialize");
            if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                log_err.get_or_insert(e);
            }
        }),
    )?;
    if let Some(e) = log_err {
        return Err(Error::stage("training", e.into()));
    }

    stage(
        "persistence",
        save_checkpoint(&paths.checkpoint(), &model.state_dict()),
    )?;
    if cfg.dump_activations {
        stage("persistence", dump_activations(cfg, &mut model, &data, &split.test, &paths))?;
    }
    let summary = ExperimentSummary {
        model: cfg.model.name.clone(),
        strategy: cfg.strategy.strategy.to_string(),
        cutoff: cfg.strategy.cutoff,
        unfreeze: cfg.strategy.unfreeze,
        params: plan.params()?,
        macs: plan.macs()?,
        classes: cfg.strategy.head.classes,
        record,
    };
    stage(
        "persistence",
        fs::write(paths.summary(), serde_json::to_string_pretty(&summary)?).map_err(Error::from),
    )?;
    Ok(ExperimentOutcome {
        summary,
        paths,
        model,
    })
}

/// One `.actv` matrix per valid cutoff, from up to `svcca.probe` held-out
/// images.
fn dump_activations(
    cfg: &ExperimentConfig,
    model: &mut Model<TrainScalar>,
    data: &Dataset<TrainScalar>,
    test: &[usize],
    paths: &ExperimentPaths,
) -> Result<()> {
    let dir = paths.activations();
    fs::create_dir_all(&dir)?;
    let cutoffs: Vec<usize> = model
        .graph
        .enumerate_truncation_points()
        .iter()
        .map(|p| p.index)
        .collect();
    let take: Vec<usize> = test.iter().copied().take(cfg.svcca.probe).collect();
    let mats = extract_activations(model, &cutoffs, data, &take, cfg.svcca.batch, None)?;
    for m in mats {
        let file = dir.join(format!("{}.actv", m.layer));
        actv::write_f32(&file, &m.data.into_dyn())?;
    }
    Ok(())
}

/// Load the epoch records a run wrote.
pub fn read_metrics(path: &Path) -> Result<Vec<crate::training::EpochRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Load a run's summary.
pub fn read_summary(path: &Path) -> Result<ExperimentSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::synth::{SyntheticTaskSpec, TaskKind};
    use crate::training::TrainConfig;

    fn quick_config(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                synthetic: Some(SyntheticTaskSpec {
                    kind: TaskKind::Texture,
                    per_class: 16,
                    seed,
                    ..SyntheticTaskSpec::default()
                }),
                split_seed: seed,
                ..DataConfig::default()
            },
            training: TrainConfig {
                batch: 8,
                max_epochs: 2,
                augment: false,
                seed,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn checkpoints_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let entries = vec![
            ("a.w".to_string(), vec![2, 3], vec![1.5f32, -2.25, 0.1, 4.0, -0.0, 3.25]),
            ("b.gamma".to_string(), vec![2], vec![0.125f32, 9.75]),
        ];
        save_checkpoint(&path, &entries).unwrap();
        let back: Vec<(String, Vec<usize>, Vec<f32>)> = load_checkpoint(&path).unwrap();
        assert_eq!(back, entries);
        let wide: Vec<(String, Vec<usize>, Vec<f64>)> = load_checkpoint(&path).unwrap();
        assert_eq!(wide[0].2, vec![1.5, -2.25, 0.10000000149011612, 4.0, 0.0, 3.25]);
    }

    #[test]
    fn run_writes_all_artifacts_and_reruns_identically() {
        let cfg = quick_config(5);
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a");
        let second = dir.path().join("b");
        let out = run_experiment(&cfg, &first).unwrap();
        run_experiment(&cfg, &second).unwrap();
        for name in ["config.snapshot", "metrics.jsonl", "best.ckpt", "summary.json"] {
            assert!(first.join(name).exists(), "{name} missing");
        }
        let snap = ExperimentConfig::load(&first.join("config.snapshot")).unwrap();
        assert_eq!(snap, cfg, "snapshot reproduces the run parameters");
        assert_eq!(
            fs::read(first.join("metrics.jsonl")).unwrap(),
            fs::read(second.join("metrics.jsonl")).unwrap(),
            "same seed must reproduce metrics bitwise"
        );
        assert_eq!(
            fs::read(first.join("best.ckpt")).unwrap(),
            fs::read(second.join("best.ckpt")).unwrap()
        );
        let epochs = read_metrics(&first.join("metrics.jsonl")).unwrap();
        assert_eq!(epochs.len(), out.summary.record.epochs.len());
        let summary = read_summary(&first.join("summary.json")).unwrap();
        assert_eq!(summary.params, out.summary.params);
        assert!(summary.record.best_val_auprc > 0.0);
    }

    #[test]
    fn failures_name_their_stage_and_keep_artifacts() {
        let mut cfg = quick_config(6);
        cfg.data.synthetic.as_mut().unwrap().per_class = 2;
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r");
        let err = match run_experiment(&cfg, &run) {
            Err(e) => e,
            Ok(_) => panic!("a 2-per-class dataset cannot split"),
        };
        match err {
            Error::Stage { stage, .. } => assert_eq!(stage, "split"),
            other => panic!("expected a stage error, got {other}"),
        }
        assert!(run.join("config.snapshot").exists(), "partial artifacts retained");
    }

    #[test]
    fn warm_start_transfers_backbone_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let source = dir.path().join("src");
        let mut src_cfg = quick_config(7);
        src_cfg.strategy.head = HeadSpec::linear(2);
        let out = run_experiment(&src_cfg, &source).unwrap();

        let mut tgt_cfg = quick_config(8);
        tgt_cfg.init = Some(crate::config::InitConfig {
            ckpt: out.paths.checkpoint(),
            classes: 2,
        });
        tgt_cfg.training.max_epochs = 1;
        let graph = tgt_cfg.model.graph().unwrap();
        let plan = tgt_cfg.strategy.build(&graph).unwrap();
        let mut fresh = Model::<TrainScalar>::from_plan(&plan, tgt_cfg.training.seed).unwrap();
        let pretrained = load_init(&tgt_cfg).unwrap().unwrap();
        fresh.transfer_from(&pretrained, plan.fresh_above);
        let names: Vec<String> = fresh.state_dict().iter().map(|e| e.0.clone()).collect();
        let pre: std::collections::HashMap<String, Vec<f32>> = pretrained
            .state_dict()
            .into_iter()
            .map(|(n, _, d)| (n, d))
            .collect();
        let mut copied = 0;
        for (name, _, d) in fresh.state_dict() {
            if !name.starts_with("head.") {
                assert_eq!(d, pre[&name], "{name} should be transferred");
                copied += 1;
            }
        }
        assert!(copied > 0);
        assert!(names.iter().any(|n| n.starts_with("head.")));
    }

    #[test]
    fn activation_dumps_cover_every_cutoff() {
        let mut cfg = quick_config(9);
        cfg.dump_activations = true;
        cfg.svcca.probe = 6;
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r");
        let out = run_experiment(&cfg, &run).unwrap();
        let points = out.model.graph.enumerate_truncation_points();
        let files: Vec<_> = fs::read_dir(run.join("activations"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(files.len(), points.len());
        for p in &points {
            assert!(
                files.contains(&format!("{}.actv", p.layer)),
                "missing dump for {}",
                p.layer
            );
        }
        let any = actv::read(&run.join("activations").join(&files[0])).unwrap();
        assert_eq!(any.ndim(), 2);
        assert_eq!(any.shape()[0] % 6, 0, "rows are probe images times positions");
    }
}
