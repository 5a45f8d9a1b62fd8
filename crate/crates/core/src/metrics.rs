//! Evaluation metrics: MSE, top-k species overlap, per-unit MSE improvement
//! factors, Pearson correlation and multi-seed aggregation.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};

fn check_aligned<L: AsRef<[f64]>, P: AsRef<[f64]>>(labels: &[L], preds: &[P]) -> Result<usize> {
    if labels.len() != preds.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} label rows vs {} prediction rows",
            labels.len(),
            preds.len()
        )));
    }
    let s = labels[0].as_ref().len();
    for (y, p) in labels.iter().zip(preds) {
        if y.as_ref().len() != s || p.as_ref().len() != s {
            return Err(Error::ShapeMismatch("species dimensions differ".into()));
        }
    }
    if s == 0 {
        return Err(Error::ShapeMismatch("zero species".into()));
    }
    Ok(s)
}

/// Mean of all `N * S` squared errors.
pub fn mse<L: AsRef<[f64]>, P: AsRef<[f64]>>(labels: &[L], preds: &[P]) -> Result<f64> {
    let s = check_aligned(labels, preds)?;
    let total: f64 = labels
        .iter()
        .zip(preds)
        .map(|(y, p)| squared_error(y.as_ref(), p.as_ref()))
        .sum();
    Ok(total / (labels.len() * s) as f64)
}

fn squared_error(y: &[f64], p: &[f64]) -> f64 {
    y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Percentage overlap between the predicted and true top-`k` species,
/// averaged over locations.
pub fn topk_accuracy<L: AsRef<[f64]>, P: AsRef<[f64]>>(labels: &[L], preds: &[P], k: usize) -> Result<f64> {
    let s = check_aligned(labels, preds)?;
    if k == 0 || k > s {
        return Err(Error::KTooLarge { k, available: s });
    }
    let mut mask = vec![false; s];
    let mut total = 0.0;
    for (y, p) in labels.iter().zip(preds) {
        mask.iter_mut().for_each(|m| *m = false);
        for i in top_k_indices(y.as_ref(), k) {
            mask[i] = true;
        }
        let hits = top_k_indices(p.as_ref(), k)
            .into_iter()
            .filter(|&i| mask[i])
            .count();
        total += hits as f64 / k as f64;
    }
    Ok(100.0 * total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmseAxis {
    PerLocation,
    PerSpecies,
}

impl FmseAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerLocation => "per_location",
            Self::PerSpecies => "per_species",
        }
    }
}

/// Baseline-over-model MSE ratio per unit (location or species).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmseReport {
    pub axis: FmseAxis,
    pub baseline_mse: Vec<f64>,
    pub model_mse: Vec<f64>,
    /// `+inf` where the model error is exactly zero (see `infinite`).
    pub ratios: Vec<f64>,
    pub infinite: Vec<bool>,
}

impl FmseReport {
    /// Ratios recombined with the model errors as weights. Equals the overall
    /// baseline/model MSE ratio when no unit is infinite.
    pub fn weighted_ratio(&self) -> f64 {
        let num: f64 = self
            .ratios
            .iter()
            .zip(&self.model_mse)
            .filter(|(r, _)| r.is_finite())
            .map(|(r, m)| r * m)
            .sum();
        num / self.model_mse.iter().sum::<f64>()
    }
}

pub fn fmse<L: AsRef<[f64]>, B: AsRef<[f64]>, P: AsRef<[f64]>>(
    baseline_preds: &[B],
    model_preds: &[P],
    labels: &[L],
    axis: FmseAxis,
) -> Result<FmseReport> {
    let s = check_aligned(labels, model_preds)?;
    check_aligned(labels, baseline_preds)?;
    let n = labels.len();
    let (baseline_mse, model_mse) = match axis {
        FmseAxis::PerLocation => labels
            .iter()
            .zip(baseline_preds.iter().zip(model_preds))
            .map(|(y, (b, p))| {
                (
                    squared_error(y.as_ref(), b.as_ref()) / s as f64,
                    squared_error(y.as_ref(), p.as_ref()) / s as f64,
                )
            })
            .unzip(),
        FmseAxis::PerSpecies => {
            let mut base = vec![0.0; s];
            let mut model = vec![0.0; s];
            for (y, (b, p)) in labels.iter().zip(baseline_preds.iter().zip(model_preds)) {
                for j in 0..s {
                    let yv = y.as_ref()[j];
                    base[j] += (yv - b.as_ref()[j]).powi(2);
                    model[j] += (yv - p.as_ref()[j]).powi(2);
                }
            }
            base.iter_mut().for_each(|v| *v /= n as f64);
            model.iter_mut().for_each(|v| *v /= n as f64);
            (base, model)
        }
    };
    let (ratios, infinite): (Vec<f64>, Vec<bool>) = baseline_mse
        .iter()
        .zip(&model_mse)
        .map(|(b, m): (&f64, &f64)| {
            if *m == 0.0 {
                (f64::INFINITY, true)
            } else {
                (b / m, false)
            }
        })
        .unzip();
    Ok(FmseReport {
        axis,
        baseline_mse,
        model_mse,
        ratios,
        infinite,
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::ShapeMismatch("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1) over sqrt(n); zero for one seed.
    pub sem: f64,
}

pub fn aggregate_seeds(values: &[f64]) -> SeedAggregate {
    let n = values.len();
    let mean = if n == 0 {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / n as f64
    };
    let sem = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt() / (n as f64).sqrt()
    };
    SeedAggregate {
        values: values.to_vec(),
        mean,
        sem,
    }
}

/// MSE and top-k accuracies of one prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mse: f64,
    /// `None` when fewer than 5 (or 10) species exist.
    pub top5: Option<f64>,
    pub top10: Option<f64>,
}

pub fn summarize<L: AsRef<[f64]>, P: AsRef<[f64]>>(labels: &[L], preds: &[P]) -> Result<EvalSummary> {
    let mse = mse(labels, preds)?;
    let top = |k| match topk_accuracy(labels, preds, k) {
        Ok(v) => Ok(Some(v)),
        Err(Error::KTooLarge { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(EvalSummary {
        mse,
        top5: top(5)?,
        top10: top(10)?,
    })
}

/// Number of species with a non-zero encounter rate, per location.
pub fn species_richness<L: AsRef<[f64]>>(labels: &[L]) -> Vec<f64> {
    labels
        .iter()
        .map(|y| y.as_ref().iter().filter(|&&v| v > 0.0).count() as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub summary: EvalSummary,
    pub baseline: EvalSummary,
    pub per_location_fmse: FmseReport,
    pub per_species_fmse: FmseReport,
    /// Correlation of per-location f_MSE with species richness; `None` when
    /// either side has zero variance or an infinite ratio is present.
    pub pearson_r_species_count: Option<f64>,
}

impl MetricReport {
    pub fn compute<L: AsRef<[f64]>, P: AsRef<[f64]>, B: AsRef<[f64]>>(
        labels: &[L],
        preds: &[P],
        baseline_preds: &[B],
    ) -> Result<Self> {
        let per_location_fmse = fmse(baseline_preds, preds, labels, FmseAxis::PerLocation)?;
        let per_species_fmse = fmse(baseline_preds, preds, labels, FmseAxis::PerSpecies)?;
        let richness = species_richness(labels);
        let pearson_r_species_count = if per_location_fmse.infinite.iter().any(|&f| f) {
            None
        } else {
            pearson(&per_location_fmse.ratios, &richness).ok()
        };
        Ok(Self {
            summary: summarize(labels, preds)?,
            baseline: summarize(labels, baseline_preds)?,
            per_location_fmse,
            per_species_fmse,
            pearson_r_species_count,
        })
    }

    /// Long-format rows `unit_id,axis,value` for both f_MSE axes.
    pub fn write_fmse_csv<W: Write>(&self, location_ids: &[String], out: W) -> Result<()> {
        write_fmse_long(
            &[
                (
                    FmseAxis::PerLocation,
                    location_ids.to_vec(),
                    self.per_location_fmse.ratios.clone(),
                ),
                (
                    FmseAxis::PerSpecies,
                    (0..self.per_species_fmse.ratios.len())
                        .map(|s| s.to_string())
                        .collect(),
                    self.per_species_fmse.ratios.clone(),
                ),
            ],
            out,
        )
    }
}

/// Writes `unit_id,axis,value` rows for each `(axis, ids, values)` group.
pub fn write_fmse_long<W: Write>(groups: &[(FmseAxis, Vec<String>, Vec<f64>)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit_id", "axis", "value"])?;
    for (axis, ids, values) in groups {
        for (id, v) in ids.iter().zip(values) {
            w.write_record([id.as_str(), axis.as_str(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
