//! Finite-difference verification of every analytic gradient: the four
//! losses and the full model backward pass.
//!
//! Each suite draws random instances, evaluates the analytic gradient and a
//! central difference, and counts coordinates outside tolerance. The
//! analytic side is a parameter so tests can inject a broken gradient and
//! confirm the harness notices.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{bce_loss, combined_loss, infonce_loss, pecl_loss, supcon_loss, ContrastiveConfig};
use crate::model::{EncoderKind, ModelConfig, SpeciesModel};
use crate::numeric::{finite_diff_grad, l2_normalize, SeededRng, FD_STEP};
use crate::pairing::SoftLabelSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub batch: (usize, usize),
    pub dim: (usize, usize),
    pub species: (usize, usize),
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            batch: (2, 16),
            dim: (4, 32),
            species: (3, 62),
            rel_tol: 1e-5,
            abs_tol: 1e-8,
            step: FD_STEP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Bce,
    Infonce,
    Supcon,
    Pecl,
    Mlp,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Bce, Suite::Infonce, Suite::Supcon, Suite::Pecl, Suite::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bce => "bce_loss",
            Self::Infonce => "infonce_loss",
            Self::Supcon => "supcon_loss",
            Self::Pecl => "pecl_loss",
            Self::Mlp => "mlp_backward",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub failed_trials: usize,
    pub coordinates: usize,
    /// Largest `|analytic - numeric| / max(abs_tol, rel_tol * scale)`; a
    /// value above 1 is a failure.
    pub worst_ratio: f64,
    pub first_failure: Option<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failed_trials == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub suites: Vec<SuiteReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }
}

/// Shape of one random instance.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub n: usize,
    pub d: usize,
    pub s: usize,
}

fn draw_dims(rng: &mut SeededRng, cfg: &GradcheckConfig) -> Dims {
    Dims {
        n: rng.random_range(cfg.batch.0.max(2)..=cfg.batch.1.max(2)),
        d: rng.random_range(cfg.dim.0.max(1)..=cfg.dim.1.max(1)),
        s: rng.random_range(cfg.species.0.max(1)..=cfg.species.1.max(1)),
    }
}

fn unit_rows(rng: &mut SeededRng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(u) = l2_normalize(&v) {
                break u;
            }
        })
        .collect()
}

fn uniform_rows(rng: &mut SeededRng, n: usize, s: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..s).map(|_| rng.random_range(lo..hi)).collect())
        .collect()
}

fn unflatten(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Ratio of the error to the allowed error for one coordinate.
pub fn tolerance_ratio(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) -> f64 {
    let err = (analytic - numeric).abs();
    let allowed = abs_tol.max(rel_tol * analytic.abs().max(numeric.abs()));
    if err.is_nan() {
        f64::INFINITY
    } else {
        err / allowed
    }
}

struct Tally {
    report: SuiteReport,
}

impl Tally {
    fn new(suite: Suite) -> Self {
        Self {
            report: SuiteReport {
                suite,
                trials: 0,
                failed_trials: 0,
                coordinates: 0,
                worst_ratio: 0.0,
                first_failure: None,
            },
        }
    }

    fn record(&mut self, cfg: &GradcheckConfig, dims: Dims, analytic: &[f64], numeric: &[f64]) {
        let r = &mut self.report;
        r.trials += 1;
        r.coordinates += analytic.len();
        let mut failed = analytic.len() != numeric.len();
        for (m, (a, b)) in analytic.iter().zip(numeric).enumerate() {
            let ratio = tolerance_ratio(*a, *b, cfg.rel_tol, cfg.abs_tol);
            r.worst_ratio = r.worst_ratio.max(ratio);
            if ratio > 1.0 && !failed {
                failed = true;
                if r.first_failure.is_none() {
                    r.first_failure = Some(format!(
                        "trial {} (N={}, D={}, S={}) coordinate {m}: analytic {a:e}, numeric {b:e}",
                        r.trials - 1,
                        dims.n,
                        dims.d,
                        dims.s
                    ));
                }
            }
        }
        if failed {
            r.failed_trials += 1;
        }
    }
}

/// BCE gradient w.r.t. predictions, with the analytic side supplied.
pub fn bce_suite_with<G>(cfg: &GradcheckConfig, analytic: G) -> Result<SuiteReport>
where
    G: Fn(&[Vec<f64>], &[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    let mut rng = SeededRng::new(cfg.seed).fork(Suite::Bce as u64);
    let mut tally = Tally::new(Suite::Bce);
    for _ in 0..cfg.trials {
        let dims = draw_dims(&mut rng, cfg);
        let y = uniform_rows(&mut rng, dims.n, dims.s, 0.0, 1.0);
        // away from the clamp so the central difference sees a smooth function
        let p = uniform_rows(&mut rng, dims.n, dims.s, 0.05, 0.95);
        let grad = analytic(&y, &p)?.concat();
        let numeric = finite_diff_grad(
            |flat| bce_loss(&y, &unflatten(flat, dims.s)).map_or(f64::NAN, |o| o.value),
            &p.concat(),
            cfg.step,
        );
        tally.record(cfg, dims, &grad, &numeric);
    }
    Ok(tally.report)
}

fn bce_analytic(y: &[Vec<f64>], p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(bce_loss(y, p)?.grad_predictions.unwrap_or_default())
}

/// Embedding-gradient suite for one contrastive loss. `loss` draws the
/// loss-specific inputs and returns an evaluator of (value, gradient).
fn contrastive_suite<F>(cfg: &GradcheckConfig, suite: Suite, mut loss: F) -> Result<SuiteReport>
where
    F: FnMut(&mut SeededRng, Dims) -> Box<dyn Fn(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>>,
{
    let mut rng = SeededRng::new(cfg.seed).fork(suite as u64);
    let mut tally = Tally::new(suite);
    for _ in 0..cfg.trials {
        let dims = draw_dims(&mut rng, cfg);
        let z = unit_rows(&mut rng, dims.n, dims.d);
        let eval = loss(&mut rng, dims);
        let (_, grad) = eval(&z)?;
        let numeric = finite_diff_grad(
            |flat| eval(&unflatten(flat, dims.d)).map_or(f64::NAN, |o| o.0),
            &z.concat(),
            cfg.step,
        );
        tally.record(cfg, dims, &grad.concat(), &numeric);
    }
    Ok(tally.report)
}

fn split_output(o: crate::losses::LossOutput) -> (f64, Vec<Vec<f64>>) {
    (o.value, o.grad_embeddings.unwrap_or_default())
}

fn random_tau(rng: &mut SeededRng) -> f64 {
    rng.random_range(0.1..=1.0)
}

pub fn infonce_suite(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    contrastive_suite(cfg, Suite::Infonce, |rng, dims| {
        let tau = random_tau(rng);
        let positives: Vec<usize> = (0..dims.n)
            .map(|i| (i + rng.random_range(1..dims.n)) % dims.n)
            .collect();
        Box::new(move |z| Ok(split_output(infonce_loss(z, &positives, tau)?)))
    })
}

pub fn supcon_suite(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    contrastive_suite(cfg, Suite::Supcon, |rng, dims| {
        let tau = random_tau(rng);
        let sets: Vec<Vec<usize>> = (0..dims.n)
            .map(|i| {
                let mut others: Vec<usize> = (0..dims.n).filter(|&j| j != i).collect();
                others.shuffle(rng);
                let take = rng.random_range(1..=others.len());
                others.truncate(take);
                others
            })
            .collect();
        Box::new(move |z| Ok(split_output(supcon_loss(z, &sets, tau)?)))
    })
}

pub fn pecl_suite(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    // embedding-cosine soft labels are treated as constants by the analytic
    // gradient, so a finite difference would disagree by construction
    const SOURCES: [SoftLabelSource; 3] = [
        SoftLabelSource::LabelCosineSquared,
        SoftLabelSource::LabelCosine,
        SoftLabelSource::ConstantOne,
    ];
    contrastive_suite(cfg, Suite::Pecl, |rng, dims| {
        let config = ContrastiveConfig {
            k: rng.random_range(1..dims.n),
            tau: random_tau(rng),
            alpha: 1.0,
            soft_label_source: SOURCES[rng.random_range(0..SOURCES.len())],
        };
        let labels = uniform_rows(rng, dims.n, dims.s, 0.0, 1.0);
        Box::new(move |z| Ok(split_output(pecl_loss(z, &labels, &config)?)))
    })
}

/// Smallest |pre-activation| of any hidden ReLU unit over the batch.
fn relu_margin(model: &SpeciesModel, x: &crate::numeric::Matrix) -> Result<f64> {
    let z = model.predict(x)?.embeddings;
    let hidden = model.projector.layers.len() - 1;
    let mut margin = f64::INFINITY;
    for row in z {
        let mut a = row;
        for layer in &model.projector.layers[..hidden] {
            let pre = layer.apply(&a);
            margin = pre.iter().fold(margin, |m, v| m.min(v.abs()));
            a = pre.iter().map(|v| v.max(0.0)).collect();
        }
    }
    Ok(margin)
}

/// Parameter gradient of the combined loss through the whole model.
pub fn mlp_suite(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let mut rng = SeededRng::new(cfg.seed).fork(Suite::Mlp as u64);
    let mut tally = Tally::new(Suite::Mlp);
    for _ in 0..cfg.trials {
        let dims = draw_dims(&mut rng, cfg);
        let model_config = ModelConfig {
            input_dim: dims.d,
            embedding_dim: dims.d,
            hidden: rng.random_range(4..=16),
            layers: 3,
            species: dims.s,
            adapter: true,
            encoder: EncoderKind::Identity,
            encoder_seed: 0,
        };
        let loss = ContrastiveConfig {
            k: rng.random_range(1..dims.n),
            tau: random_tau(&mut rng),
            alpha: rng.random_range(0.1..=1.0),
            soft_label_source: SoftLabelSource::LabelCosineSquared,
        };
        let x = crate::numeric::Matrix::from_rows(&uniform_rows(&mut rng, dims.n, dims.d, -1.0, 1.0))?;
        let y = uniform_rows(&mut rng, dims.n, dims.s, 0.0, 1.0);

        // Zero-initialised biases can sit exactly on a ReLU kink, where the
        // one-sided derivatives differ; jitter until every unit is clear.
        let base = SpeciesModel::new(&model_config, &mut rng)?;
        let mut model = base.clone();
        for _ in 0..20 {
            let jittered: Vec<f64> = base
                .flat_parameters()
                .iter()
                .map(|p| p + rng.random_range(-0.1..0.1))
                .collect();
            model.set_flat_parameters(&jittered)?;
            if relu_margin(&model, &x)? > 1e3 * cfg.step {
                break;
            }
        }

        let pass = model.forward(&x)?;
        let out = combined_loss(&y, &pass.preds, &pass.embeddings, &loss)?;
        let analytic = model
            .backward(
                &pass,
                out.total.grad_predictions.as_deref().unwrap_or_default(),
                out.total.grad_embeddings.as_deref(),
            )?
            .flatten();
        let mut probe = model.clone();
        let numeric = finite_diff_grad(
            |theta| {
                if probe.set_flat_parameters(theta).is_err() {
                    return f64::NAN;
                }
                probe
                    .predict(&x)
                    .and_then(|p| combined_loss(&y, &p.preds, &p.embeddings, &loss))
                    .map_or(f64::NAN, |o| o.total.value)
            },
            &model.flat_parameters(),
            cfg.step,
        );
        tally.record(cfg, dims, &analytic, &numeric);
    }
    Ok(tally.report)
}

pub fn run_suite(suite: Suite, cfg: &GradcheckConfig) -> Result<SuiteReport> {
    match suite {
        Suite::Bce => bce_suite_with(cfg, bce_analytic),
        Suite::Infonce => infonce_suite(cfg),
        Suite::Supcon => supcon_suite(cfg),
        Suite::Pecl => pecl_suite(cfg),
        Suite::Mlp => mlp_suite(cfg),
    }
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.trials == 0 {
        warn!("gradcheck with zero trials checks nothing");
    }
    Ok(GradcheckReport {
        config: cfg.clone(),
        suites: Suite::ALL
            .iter()
            .map(|&s| run_suite(s, cfg))
            .collect::<Result<_>>()?,
    })
}
