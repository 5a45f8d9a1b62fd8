pub mod eval;
pub mod gradcheck;
pub mod prep;
pub mod search;
pub mod split;
pub mod synth;
pub mod train;

use serde::Serialize;
use std::path::{Path, PathBuf};

use pecl_core::dataset::io;
use pecl_core::experiment::{ExperimentData, RunSettings};

use crate::args::{DataArgs, GlobalArgs};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Resolved global options shared by every subcommand.
pub struct Context {
    pub config: ExperimentConfig,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl Context {
    pub fn new(global: &GlobalArgs) -> CliResult<Self> {
        let config = match &global.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let out_dir = global
            .out_dir
            .clone()
            .or_else(|| config.paths.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let workers = match global.workers {
            Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
            Some(w) => w,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(Self {
            config,
            seed: global.seed,
            out_dir,
            workers,
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Flag value, then config value, else a usage error naming the flag.
pub fn require_path(flag: &Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| config.clone())
        .ok_or_else(|| CliError::Usage(format!("no {name} file: pass --{name} or set paths.{name}")))
}

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

/// Features, labels and splits aligned on the label file's location ids.
pub fn load_experiment(ctx: &Context, data: &DataArgs) -> CliResult<ExperimentData> {
    let paths = &ctx.config.paths;
    let features_path = require_path(&data.features, &paths.features, "features")?;
    let labels_path = require_path(&data.labels, &paths.labels, "labels")?;
    let splits_path = require_path(&data.splits, &paths.splits, "splits")?;
    for p in [&features_path, &labels_path, &splits_path] {
        require_file(p)?;
    }
    let labels = io::read_labels(io::open(&labels_path)?)?;
    let features = io::read_features(&features_path)?;
    let splits = io::read_splits(io::open(&splits_path)?)?;
    let rows = features.select(&labels.ids, "features")?;
    let matrix = io::Table::new(labels.ids.clone(), features.columns.clone(), rows)?.matrix()?;
    Ok(ExperimentData::from_assignment(
        &labels.ids,
        &matrix,
        &labels.rows,
        &splits,
    )?)
}

/// Seeds from `--seeds`, then `--seed`, then the config.
pub fn resolve_seeds(ctx: &Context, flag: &Option<Vec<u64>>) -> Vec<u64> {
    flag.clone()
        .or_else(|| ctx.seed.map(|s| vec![s]))
        .unwrap_or_else(|| ctx.config.training.seeds.clone())
}

pub fn run_settings(
    ctx: &Context,
    data: &ExperimentData,
    seeds: Vec<u64>,
    epochs: Option<usize>,
) -> CliResult<RunSettings> {
    let cfg = &ctx.config;
    let mut training = cfg.training.train_config();
    if let Some(e) = epochs {
        training.epochs = e;
    }
    let settings = RunSettings {
        model: cfg.model.build(data.feature_dim(), data.species()),
        training,
        loss: cfg.loss,
        seeds,
    };
    settings.validate()?;
    Ok(settings)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    use std::io::Write;
    let mut out = io::create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}
