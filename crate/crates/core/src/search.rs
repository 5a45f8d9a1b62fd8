//! Hyperparameter search: explicit grids, the seeded random sampler, and a
//! driver that trains every candidate over all seeds and streams results.

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::experiment::{run_seeds, ExperimentData, ExperimentSummary, RunSettings};
use crate::numeric::SeededRng;

/// One point in hyperparameter space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub k: usize,
    pub alpha: f64,
    pub tau: f64,
}

impl Candidate {
    /// Stable content hash used to skip finished candidates on resume.
    pub fn hash(&self) -> String {
        let canonical = format!(
            "lr={};batch={};k={};alpha={};tau={}",
            self.learning_rate, self.batch_size, self.k, self.alpha, self.tau
        );
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }

    pub fn apply(&self, base: &RunSettings) -> RunSettings {
        let mut s = base.clone();
        s.training.learning_rate = self.learning_rate;
        s.training.batch_size = self.batch_size;
        s.loss.k = self.k;
        s.loss.alpha = self.alpha;
        s.loss.tau = self.tau;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpace {
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub k: Vec<usize>,
    pub alpha: Vec<f64>,
    pub tau: Vec<f64>,
}

impl Default for GridSpace {
    fn default() -> Self {
        Self {
            learning_rate: vec![1e-3],
            batch_size: vec![32],
            k: vec![1, 2, 5],
            alpha: vec![0.1, 0.3],
            tau: vec![0.5],
        }
    }
}

impl GridSpace {
    /// Cartesian product, varying `tau` fastest and `learning_rate` slowest.
    pub fn candidates(&self) -> Result<Vec<Candidate>> {
        if [
            self.learning_rate.len(),
            self.batch_size.len(),
            self.k.len(),
            self.alpha.len(),
            self.tau.len(),
        ]
        .contains(&0)
        {
            return Err(Error::InvalidConfig(
                "every grid axis needs at least one value".into(),
            ));
        }
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rate {
            for &batch_size in &self.batch_size {
                for &k in &self.k {
                    for &alpha in &self.alpha {
                        for &tau in &self.tau {
                            let c = Candidate {
                                learning_rate,
                                batch_size,
                                k,
                                alpha,
                                tau,
                            };
                            validate_candidate(&c)?;
                            out.push(c);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn validate_candidate(c: &Candidate) -> Result<()> {
    if !(c.learning_rate > 0.0) || c.batch_size == 0 || c.k == 0 || !(c.alpha >= 0.0) || !(c.tau > 0.0) {
        return Err(Error::InvalidConfig(format!("invalid search candidate {c:?}")));
    }
    Ok(())
}

/// Distributions of the random search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomSpace {
    /// `log10(lr)` is uniform on this interval.
    pub log10_learning_rate: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub k_max: usize,
    /// `log10(alpha)` is uniform on this interval.
    pub log10_alpha: (f64, f64),
    pub tau: (f64, f64),
    pub n_samples: usize,
}

impl Default for RandomSpace {
    fn default() -> Self {
        Self {
            log10_learning_rate: (-5.0, -3.0),
            batch_sizes: vec![8, 16, 32, 64],
            k_max: 10,
            log10_alpha: (-1.5, 0.0),
            tau: (0.1, 1.0),
            n_samples: 30,
        }
    }
}

fn log_uniform(rng: &mut SeededRng, (lo, hi): (f64, f64)) -> f64 {
    let v = 10f64.powf(rng.random_range(lo..=hi));
    v.clamp(10f64.powf(lo), 10f64.powf(hi))
}

impl RandomSpace {
    fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !ordered(self.log10_learning_rate)
            || !ordered(self.log10_alpha)
            || !ordered(self.tau)
            || !(self.tau.0 > 0.0)
            || self.batch_sizes.is_empty()
            || self.batch_sizes.contains(&0)
            || self.k_max == 0
        {
            return Err(Error::InvalidConfig(format!(
                "invalid random search space {self:?}"
            )));
        }
        Ok(())
    }

    /// Largest usable `k` for a batch: every anchor has `batch - 1` others.
    pub fn k_limit(&self, batch_size: usize) -> usize {
        self.k_max.min(batch_size.saturating_sub(1)).max(1)
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Candidate {
        let learning_rate = log_uniform(rng, self.log10_learning_rate);
        let batch_size = *self.batch_sizes.choose(rng).expect("non-empty batch sizes");
        let k = rng.random_range(1..=self.k_limit(batch_size));
        let alpha = log_uniform(rng, self.log10_alpha);
        let tau = rng.random_range(self.tau.0..=self.tau.1);
        Candidate {
            learning_rate,
            batch_size,
            k,
            alpha,
            tau,
        }
    }

    pub fn candidates(&self, seed: u64) -> Result<Vec<Candidate>> {
        self.validate()?;
        let mut rng = SeededRng::new(seed);
        Ok((0..self.n_samples).map(|_| self.sample(&mut rng)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SearchSpace {
    Grid(GridSpace),
    Random(RandomSpace),
}

impl SearchSpace {
    pub fn candidates(&self, seed: u64) -> Result<Vec<Candidate>> {
        match self {
            Self::Grid(g) => g.candidates(),
            Self::Random(r) => r.candidates(seed),
        }
    }
}

/// Outcome of one candidate over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub index: usize,
    pub hash: String,
    pub candidate: Candidate,
    pub summary: ExperimentSummary,
}

impl SearchRecord {
    pub fn val_mse(&self) -> f64 {
        self.summary.val_aggregate.mse.mean
    }
}

/// Parses previously flushed JSON lines; a truncated final line is ignored.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<SearchRecord>> {
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => {
                log::warn!("ignoring truncated search record on line {}", i + 1)
            }
            Err(e) => {
                return Err(Error::Parse {
                    line: i as u64 + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Trains every candidate not already in `done` (matched by hash).
///
/// Up to `workers` candidates train concurrently; finished records are
/// passed to `sink` in candidate order, one batch of `workers` at a time.
/// Returns all records, `done` included, ranked by mean validation MSE.
pub fn run_search<F>(
    data: &ExperimentData,
    base: &RunSettings,
    candidates: &[Candidate],
    done: Vec<SearchRecord>,
    workers: usize,
    mut sink: F,
) -> Result<Vec<SearchRecord>>
where
    F: FnMut(&SearchRecord) -> Result<()>,
{
    base.validate()?;
    let finished: HashMap<String, SearchRecord> = done.into_iter().map(|r| (r.hash.clone(), r)).collect();
    let mut records = Vec::with_capacity(candidates.len());
    let pending: Vec<(usize, Candidate)> = candidates
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, c)| match finished.get(&c.hash()) {
            Some(prev) => {
                records.push(SearchRecord {
                    index: *i,
                    ..prev.clone()
                });
                false
            }
            None => true,
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    for chunk in pending.chunks(workers.max(1)) {
        let batch: Vec<Result<SearchRecord>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&(index, candidate)| {
                    let runs = run_seeds(data, &candidate.apply(base))?;
                    Ok(SearchRecord {
                        index,
                        hash: candidate.hash(),
                        candidate,
                        summary: ExperimentSummary::from_runs(&runs),
                    })
                })
                .collect()
        });
        for r in batch {
            let r = r?;
            sink(&r)?;
            records.push(r);
        }
    }
    rank(&mut records);
    Ok(records)
}

/// Sorts by mean validation MSE, then candidate index.
pub fn rank(records: &mut [SearchRecord]) {
    records.sort_by(|a, b| a.val_mse().total_cmp(&b.val_mse()).then(a.index.cmp(&b.index)));
}

/// Appends one record as a JSON line and flushes.
pub fn append_record<W: Write>(mut out: W, record: &SearchRecord) -> Result<()> {
    serde_json::to_writer(&mut out, record)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Ranked results table.
pub fn write_table<W: Write>(out: W, ranked: &[SearchRecord]) -> Result<()> {
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rank",
        "index",
        "hash",
        "learning_rate",
        "batch_size",
        "k",
        "alpha",
        "tau",
        "val_mse_mean",
        "val_mse_sem",
        "val_top10_mean",
        "val_top10_sem",
        "test_mse_mean",
        "test_mse_sem",
        "test_top10_mean",
        "test_top10_sem",
    ])?;
    for (rank, r) in ranked.iter().enumerate() {
        let c = &r.candidate;
        let (v, t) = (&r.summary.val_aggregate, &r.summary.test_aggregate);
        w.write_record([
            (rank + 1).to_string(),
            r.index.to_string(),
            r.hash.clone(),
            c.learning_rate.to_string(),
            c.batch_size.to_string(),
            c.k.to_string(),
            c.alpha.to_string(),
            c.tau.to_string(),
            v.mse.mean.to_string(),
            v.mse.sem.to_string(),
            fmt(v.top10.as_ref().map(|a| a.mean)),
            fmt(v.top10.as_ref().map(|a| a.sem)),
            t.mse.mean.to_string(),
            t.mse.sem.to_string(),
            fmt(t.top10.as_ref().map(|a| a.mean)),
            fmt(t.top10.as_ref().map(|a| a.sem)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::ExperimentData;
    use crate::losses::ContrastiveConfig;
    use crate::model::{DataSplit, ModelConfig, TrainConfig};
    use crate::numeric::Matrix;

    #[test]
    fn default_grid_has_six_candidates() {
        let c = GridSpace::default().candidates().unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!((c[0].k, c[0].alpha), (1, 0.1));
        assert_eq!((c[1].k, c[1].alpha), (1, 0.3));
        assert_eq!((c[5].k, c[5].alpha), (5, 0.3));
        assert!(c
            .iter()
            .all(|c| c.batch_size == 32 && c.learning_rate == 1e-3 && c.tau == 0.5));
    }

    #[test]
    fn empty_grid_axis_rejected() {
        let g = GridSpace {
            k: vec![],
            ..Default::default()
        };
        assert!(g.candidates().is_err());
    }

    #[test]
    fn batch_eight_caps_k() {
        let space = RandomSpace {
            batch_sizes: vec![8],
            ..Default::default()
        };
        let c = space.candidates(3).unwrap();
        assert!(c.iter().all(|c| (1..=7).contains(&c.k)));
        assert!(c.iter().any(|c| c.k == 7));
    }

    #[test]
    fn random_candidates_reproducible() {
        let space = RandomSpace::default();
        assert_eq!(space.candidates(9).unwrap(), space.candidates(9).unwrap());
        assert_ne!(space.candidates(9).unwrap(), space.candidates(10).unwrap());
        assert_eq!(space.candidates(0).unwrap().len(), 30);
    }

    #[test]
    fn hash_is_stable_and_distinguishing() {
        let a = GridSpace::default().candidates().unwrap();
        assert_eq!(a[0].hash(), a[0].hash());
        assert_eq!(a[0].hash().len(), 16);
        assert_ne!(a[0].hash(), a[1].hash());
    }

    #[test]
    fn search_space_serde_tag() {
        let json = r#"{"mode":"random","n_samples":1}"#;
        let space: SearchSpace = serde_json::from_str(json).unwrap();
        assert_eq!(space.candidates(0).unwrap().len(), 1);
    }

    fn tiny() -> (ExperimentData, RunSettings) {
        let rows = |n: usize, off: f64| -> DataSplit {
            let features: Vec<Vec<f64>> = (0..n)
                .map(|i| vec![(i as f64 + off).sin(), (i as f64).cos() + 1.5])
                .collect();
            let labels = (0..n).map(|i| vec![(i % 3) as f64 / 2.0, 0.5, 0.1]).collect();
            DataSplit::new(
                (0..n).map(|i| format!("{off}-{i}")).collect(),
                Matrix::from_rows(&features).unwrap(),
                labels,
            )
            .unwrap()
        };
        let mut model = ModelConfig::new(2, 3);
        model.embedding_dim = 2;
        model.hidden = 4;
        let settings = RunSettings {
            model,
            training: TrainConfig {
                epochs: 2,
                ..Default::default()
            },
            loss: ContrastiveConfig::default(),
            seeds: vec![0, 1],
        };
        (
            ExperimentData {
                train: rows(12, 0.0),
                val: rows(4, 0.5),
                test: rows(4, 0.25),
            },
            settings,
        )
    }

    #[test]
    fn search_streams_in_order_and_resumes() {
        let (data, base) = tiny();
        let space = RandomSpace {
            n_samples: 5,
            batch_sizes: vec![4, 8],
            ..Default::default()
        };
        let candidates = space.candidates(1).unwrap();
        let mut streamed = Vec::new();
        let all = run_search(&data, &base, &candidates, vec![], 2, |r| {
            streamed.push(r.index);
            Ok(())
        })
        .unwrap();
        assert_eq!(streamed, [0, 1, 2, 3, 4]);
        assert_eq!(all.len(), 5);
        assert!(all.windows(2).all(|w| w[0].val_mse() <= w[1].val_mse()));

        let serial = run_search(&data, &base, &candidates, vec![], 1, |_| Ok(())).unwrap();
        assert_eq!(serial, all);

        // resume: the first two are skipped
        let mut by_index = all.clone();
        by_index.sort_by_key(|r| r.index);
        let mut rerun = Vec::new();
        let resumed = run_search(&data, &base, &candidates, by_index[..2].to_vec(), 3, |r| {
            rerun.push(r.index);
            Ok(())
        })
        .unwrap();
        assert_eq!(rerun, [2, 3, 4]);
        assert_eq!(resumed, all);
    }

    #[test]
    fn records_round_trip_and_truncation() {
        let (data, base) = tiny();
        let candidates = GridSpace {
            k: vec![1],
            alpha: vec![0.0],
            batch_size: vec![4],
            ..Default::default()
        }
        .candidates()
        .unwrap();
        let records = run_search(&data, &base, &candidates, vec![], 1, |_| Ok(())).unwrap();
        let mut buf = Vec::new();
        append_record(&mut buf, &records[0]).unwrap();
        buf.extend_from_slice(b"{\"index\":");
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back, records);

        let mut table = Vec::new();
        write_table(&mut table, &records).unwrap();
        let text = String::from_utf8(table).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("1,0,"));
    }
}
