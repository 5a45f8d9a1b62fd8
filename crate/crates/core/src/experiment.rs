//! Multi-seed training runs with validation/test metrics and the mean-rate
//! baseline alongside.

use serde::{Deserialize, Serialize};

use crate::dataset::{SplitAssignment, SplitKind};
use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;
use crate::metrics::{aggregate_seeds, summarize, EvalSummary, MetricReport, SeedAggregate};
use crate::model::{fit, DataSplit, MeanRateModel, ModelConfig, SpeciesModel, TrainConfig, TrainReport};
use crate::numeric::Matrix;

/// Train, validation and test splits of one dataset.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: DataSplit,
    pub val: DataSplit,
    pub test: DataSplit,
}

impl ExperimentData {
    /// Partitions row-aligned `ids`/`features`/`labels` by split membership,
    /// keeping input order within each split.
    pub fn from_assignment(
        ids: &[String],
        features: &Matrix,
        labels: &[Vec<f64>],
        splits: &SplitAssignment,
    ) -> Result<Self> {
        if features.rows() != ids.len() || labels.len() != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids, {} feature rows, {} label rows",
                ids.len(),
                features.rows(),
                labels.len()
            )));
        }
        let mut parts: [Vec<usize>; 3] = Default::default();
        for (i, id) in ids.iter().enumerate() {
            let kind = splits
                .get(id)
                .ok_or_else(|| Error::MissingLocation(id.clone(), "splits".into()))?;
            parts[kind as usize].push(i);
        }
        let build = |kind: SplitKind| -> Result<DataSplit> {
            let idx = &parts[kind as usize];
            if idx.is_empty() {
                return Err(Error::EmptySplit(kind.to_string()));
            }
            DataSplit::new(
                idx.iter().map(|&i| ids[i].clone()).collect(),
                features.select_rows(idx),
                idx.iter().map(|&i| labels[i].clone()).collect(),
            )
        };
        Ok(Self {
            train: build(SplitKind::Train)?,
            val: build(SplitKind::Val)?,
            test: build(SplitKind::Test)?,
        })
    }

    pub fn species(&self) -> usize {
        self.train.species()
    }

    pub fn feature_dim(&self) -> usize {
        self.train.features.cols()
    }
}

/// Everything needed to train one configuration over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub loss: ContrastiveConfig,
    pub seeds: Vec<u64>,
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds list is empty".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub report: TrainReport,
    pub model: SpeciesModel,
    pub val: EvalSummary,
    pub test: EvalSummary,
}

/// Mean and SEM of each metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mse: SeedAggregate,
    pub top5: Option<SeedAggregate>,
    pub top10: Option<SeedAggregate>,
}

pub fn aggregate_summaries(summaries: &[EvalSummary]) -> MetricAggregate {
    let collect = |f: fn(&EvalSummary) -> Option<f64>| -> Option<SeedAggregate> {
        let values: Option<Vec<f64>> = summaries.iter().map(f).collect();
        values.filter(|v| !v.is_empty()).map(|v| aggregate_seeds(&v))
    };
    MetricAggregate {
        mse: aggregate_seeds(&summaries.iter().map(|s| s.mse).collect::<Vec<_>>()),
        top5: collect(|s| s.top5),
        top10: collect(|s| s.top10),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub model: MeanRateModel,
    pub val: EvalSummary,
    pub test: EvalSummary,
}

/// Fits the mean-rate model on the training split and scores it.
pub fn baseline(data: &ExperimentData) -> Result<Baseline> {
    let model = MeanRateModel::fit(&data.train.labels)?;
    Ok(Baseline {
        val: summarize(&data.val.labels, &model.predict(data.val.len()))?,
        test: summarize(&data.test.labels, &model.predict(data.test.len()))?,
        model,
    })
}

pub fn run_seed(data: &ExperimentData, settings: &RunSettings, seed: u64) -> Result<SeedRun> {
    let training = TrainConfig {
        seed,
        ..settings.training.clone()
    };
    let outcome = fit(&settings.model, &data.train, &data.val, &training, &settings.loss)?;
    let test_preds = outcome.model.predict(&data.test.features)?.preds;
    Ok(SeedRun {
        val: outcome.report.validation,
        test: summarize(&data.test.labels, &test_preds)?,
        report: outcome.report,
        model: outcome.model,
    })
}

/// Per-seed rows plus their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seeds: Vec<u64>,
    pub val: Vec<EvalSummary>,
    pub test: Vec<EvalSummary>,
    pub val_aggregate: MetricAggregate,
    pub test_aggregate: MetricAggregate,
}

impl ExperimentSummary {
    pub fn from_runs(runs: &[SeedRun]) -> Self {
        let val: Vec<EvalSummary> = runs.iter().map(|r| r.val).collect();
        let test: Vec<EvalSummary> = runs.iter().map(|r| r.test).collect();
        Self {
            seeds: runs.iter().map(|r| r.report.seed).collect(),
            val_aggregate: aggregate_summaries(&val),
            test_aggregate: aggregate_summaries(&test),
            val,
            test,
        }
    }
}

/// Runs every seed in order.
pub fn run_seeds(data: &ExperimentData, settings: &RunSettings) -> Result<Vec<SeedRun>> {
    settings.validate()?;
    settings
        .seeds
        .iter()
        .map(|&s| run_seed(data, settings, s))
        .collect()
}

/// Test-split metric report of a trained model against the baseline.
pub fn test_report(
    data: &ExperimentData,
    model: &SpeciesModel,
    baseline: &MeanRateModel,
) -> Result<MetricReport> {
    let preds = model.predict(&data.test.features)?.preds;
    MetricReport::compute(&data.test.labels, &preds, &baseline.predict(data.test.len()))
}

/// Rows of a metrics table: `model,split,seed,mse,top5,top10` with the
/// baseline first and aggregate rows (`mean`, `sem`) after the seeds.
pub fn write_metrics_csv<W: std::io::Write>(
    out: W,
    baseline: &Baseline,
    summary: Option<&ExperimentSummary>,
) -> Result<()> {
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "split", "seed", "mse", "top5", "top10"])?;
    for (split, s) in [("val", &baseline.val), ("test", &baseline.test)] {
        w.write_record([
            "mean_rate",
            split,
            "",
            &s.mse.to_string(),
            &fmt(s.top5),
            &fmt(s.top10),
        ])?;
    }
    if let Some(summary) = summary {
        for (split, rows, agg) in [
            ("val", &summary.val, &summary.val_aggregate),
            ("test", &summary.test, &summary.test_aggregate),
        ] {
            for (seed, s) in summary.seeds.iter().zip(rows) {
                w.write_record([
                    "model",
                    split,
                    &seed.to_string(),
                    &s.mse.to_string(),
                    &fmt(s.top5),
                    &fmt(s.top10),
                ])?;
            }
            let pick = |a: &Option<SeedAggregate>, f: fn(&SeedAggregate) -> f64| fmt(a.as_ref().map(f));
            w.write_record([
                "model",
                split,
                "mean",
                &agg.mse.mean.to_string(),
                &pick(&agg.top5, |a| a.mean),
                &pick(&agg.top10, |a| a.mean),
            ])?;
            w.write_record([
                "model",
                split,
                "sem",
                &agg.mse.sem.to_string(),
                &pick(&agg.top5, |a| a.sem),
                &pick(&agg.top10, |a| a.sem),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
