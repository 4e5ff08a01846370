use std::fs;
use std::path::{Path, PathBuf};

use mshift_core::dataset::{save_vectors, DatasetBundle};
use mshift_core::eval::{dump_embeddings, evaluate, save_report, DumpOptions, EvalOptions, EvalReport};
use mshift_core::losses::{verify_gradients, GradSuiteConfig, LossCheck};
use mshift_core::model::{load_checkpoint, save_checkpoint, DaNet};
use mshift_core::trainer::{fit_source_stats, split_sources, TrainLog, Trainer};
use serde_json::json;

use crate::config::{Overrides, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAINLOG_FILE: &str = "trainlog.json";
pub const EVALREPORT_FILE: &str = "evalreport.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn load_config(path: &Path, o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(o);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub num_sources: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub source_counts: Vec<usize>,
    pub target_train: usize,
    pub target_test: usize,
}

impl GenSummary {
    fn of(b: &DatasetBundle) -> Self {
        Self {
            num_sources: b.num_sources(),
            num_classes: b.num_classes,
            dim: b.dim,
            source_counts: b.sources.iter().map(Vec::len).collect(),
            target_train: b.target_train.len(),
            target_test: b.target_test.len(),
        }
    }
}

/// Writes the config's synthetic dataset to a vector file.
pub fn gen_data(config: &Path, out: &Path, o: &Overrides) -> Result<GenSummary, CliError> {
    let cfg = load_config(config, o)?;
    if cfg.dataset.synthetic.is_none() {
        return Err(CliError::Config("gen-data needs a [dataset.synthetic] section".into()));
    }
    let bundle = cfg.load_dataset()?;
    save_vectors(&bundle, out)?;
    Ok(GenSummary::of(&bundle))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub log: TrainLog,
    pub report: EvalReport,
}

fn echo(cfg: &RunConfig, status: &str, error: Option<String>) -> serde_json::Value {
    json!({
        "label": cfg.label(),
        "status": status,
        "error": error,
        "run": cfg,
    })
}

/// Trains, evaluates and writes the run artifacts into the output directory.
/// When training aborts the last finite parameters are still checkpointed.
pub fn train(config: &Path, o: &Overrides) -> Result<TrainOutcome, CliError> {
    let cfg = load_config(config, o)?;
    let bundle = cfg.load_dataset()?;
    let net = DaNet::new(cfg.model_for(&bundle)?)?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;

    let mut trainer = Trainer::new(net, &bundle, cfg.train.clone())?;
    if let Err(e) = trainer.run() {
        save_checkpoint(&trainer.net, &echo(&cfg, "aborted", Some(e.to_string())), dir.join(CHECKPOINT_FILE))?;
        write_json(&trainer.log, &dir.join(TRAINLOG_FILE))?;
        return Err(e.into());
    }
    let out = trainer.into_output();
    let report = evaluate(
        &out.net,
        &bundle,
        &out.validation,
        &out.stats,
        &EvalOptions {
            label: Some(cfg.label()),
            seed: cfg.train.seed,
            ..EvalOptions::default()
        },
    )?;
    save_checkpoint(&out.net, &echo(&cfg, "complete", None), dir.join(CHECKPOINT_FILE))?;
    write_json(&out.log, &dir.join(TRAINLOG_FILE))?;
    save_report(&report, dir.join(EVALREPORT_FILE))?;
    let emb = dir.join(EMBEDDINGS_FILE);
    if cfg.emit_embeddings {
        dump_embeddings(
            &out.net,
            &bundle,
            &out.stats,
            &emb,
            &DumpOptions {
                seed: cfg.train.seed,
                ..DumpOptions::default()
            },
        )?;
    } else if emb.exists() {
        fs::remove_file(&emb).map_err(|e| CliError::io(&emb, e))?;
    }
    Ok(TrainOutcome {
        output_dir: dir,
        log: out.log,
        report,
    })
}

/// Re-evaluates the checkpoint in the output directory. The statistics are
/// refitted on the same training split the run used.
pub fn eval(config: &Path, o: &Overrides, out: Option<&Path>) -> Result<(PathBuf, EvalReport), CliError> {
    let cfg = load_config(config, o)?;
    let bundle = cfg.load_dataset()?;
    let ckpt = load_checkpoint(cfg.output_dir.join(CHECKPOINT_FILE))?;
    let (train, validation) = split_sources(&bundle.sources, cfg.train.validation_fraction, cfg.train.seed)?;
    let stats = fit_source_stats(&ckpt.net, &train, cfg.train.shrinkage)?;
    let report = evaluate(
        &ckpt.net,
        &bundle,
        &validation,
        &stats,
        &EvalOptions {
            label: Some(cfg.label()),
            seed: cfg.train.seed,
            ..EvalOptions::default()
        },
    )?;
    let path = out.map_or_else(|| cfg.output_dir.join(EVALREPORT_FILE), Path::to_path_buf);
    save_report(&report, &path)?;
    Ok((path, report))
}

pub fn gradcheck(seed: Option<u64>, corrupt: Option<String>) -> Result<Vec<LossCheck>, CliError> {
    let mut cfg = GradSuiteConfig {
        corrupt,
        ..GradSuiteConfig::default()
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(verify_gradients(&cfg)?)
}
