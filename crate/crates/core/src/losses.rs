//! Prediction and contrastive losses with analytic gradients.
//!
//! Every contrastive loss here is an instance of one weighted cross-entropy
//! over the per-anchor softmax
//!
//! ```text
//! w_ij = exp(z_i . z_j / tau) / sum_{k != i} exp(z_i . z_k / tau)
//! L    = -(1/N) sum_i sum_j c_ij log w_ij
//! ```
//!
//! and they differ only in the target weights `c_ij`:
//!
//! | loss     | c_ij                           |
//! |----------|--------------------------------|
//! | InfoNCE  | 1 at the single positive       |
//! | SupCon   | 1 / \|P_i\| over `P_i`          |
//! | PECL     | s_ij / \|N_i^k\| over the kNN set |
//!
//! The denominator runs over every other batch member, positives included.
//! Gradients are taken with respect to the embeddings as given (no
//! renormalisation); pairing and soft labels are constants of the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, log_sum_exp, Matrix};
use crate::pairing::{knn_neighbors, label_similarity_matrix, soft_labels, SoftLabelSource};

/// Predictions are clamped to `[PRED_EPS, 1 - PRED_EPS]` before taking logs.
pub const PRED_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Per-sample (or per-anchor) contribution; `value` is their mean.
    pub per_sample: Vec<f64>,
    pub grad_embeddings: Option<Vec<Vec<f64>>>,
    pub grad_predictions: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub k: usize,
    pub tau: f64,
    pub alpha: f64,
    pub soft_label_source: SoftLabelSource,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            k: 5,
            tau: 0.5,
            alpha: 0.1,
            soft_label_source: SoftLabelSource::LabelCosineSquared,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_rows<R: AsRef<[f64]>>(rows: &[R], what: &str) -> Result<usize> {
    let dim = rows.first().map_or(0, |r| r.as_ref().len());
    for r in rows {
        if r.as_ref().len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "{what}: rows of length {dim} and {}",
                r.as_ref().len()
            )));
        }
    }
    Ok(dim)
}

/// Mean binary cross-entropy over all `N * S` entries.
pub fn bce_loss<L: AsRef<[f64]>, P: AsRef<[f64]>>(labels: &[L], preds: &[P]) -> Result<LossOutput> {
    if labels.len() != preds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} label rows vs {} prediction rows",
            labels.len(),
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let s = check_rows(labels, "labels")?;
    if check_rows(preds, "predictions")? != s || s == 0 {
        return Err(Error::ShapeMismatch("species dimensions differ".into()));
    }
    let n = labels.len();
    let scale = 1.0 / (n * s) as f64;
    let mut per_sample = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    for (y, p) in labels.iter().zip(preds) {
        let mut row_loss = 0.0;
        let mut g = Vec::with_capacity(s);
        for (&y, &p) in y.as_ref().iter().zip(p.as_ref()) {
            let p = p.clamp(PRED_EPS, 1.0 - PRED_EPS);
            row_loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            g.push(scale * (p - y) / (p * (1.0 - p)));
        }
        per_sample.push(row_loss / s as f64);
        grads.push(g);
    }
    let value = per_sample.iter().sum::<f64>() / n as f64;
    Ok(LossOutput {
        value,
        per_sample,
        grad_embeddings: None,
        grad_predictions: Some(grads),
    })
}

fn gram<E: AsRef<[f64]>>(z: &[E]) -> Matrix {
    let n = z.len();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(z[i].as_ref(), z[j].as_ref());
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

fn check_embeddings<E: AsRef<[f64]>>(z: &[E], tau: f64) -> Result<usize> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if z.len() < 2 {
        return Err(Error::EmptyBatch(z.len()));
    }
    check_rows(z, "embeddings")
}

/// Row-wise contrastive softmax: `w_ij` for `j != i`, zero on the diagonal.
pub fn softmax_weights<E: AsRef<[f64]>>(z: &[E], tau: f64) -> Result<Matrix> {
    check_embeddings(z, tau)?;
    let n = z.len();
    let g = gram(z);
    let mut w = Matrix::zeros(n, n);
    let mut logits = Vec::with_capacity(n - 1);
    for i in 0..n {
        logits.clear();
        logits.extend((0..n).filter(|&k| k != i).map(|k| g.get(i, k) / tau));
        let lse = log_sum_exp(&logits);
        for k in (0..n).filter(|&k| k != i) {
            w.set(i, k, (g.get(i, k) / tau - lse).exp());
        }
    }
    Ok(w)
}

/// `-(1/N) sum_i sum_{(j, c)} c log w_ij`, with gradient w.r.t. every `z`.
///
/// `targets[i]` lists `(j, c_ij)` pairs for anchor `i`, summed in the given order.
fn weighted_contrastive<E: AsRef<[f64]>>(z: &[E], targets: &[Vec<(usize, f64)>], tau: f64) -> LossOutput {
    let n = z.len();
    let dim = z[0].as_ref().len();
    let g = gram(z);
    let inv_n = 1.0 / n as f64;
    let mut per_sample = Vec::with_capacity(n);
    let mut grads = vec![vec![0.0; dim]; n];
    let mut logits = vec![0.0; n];
    let mut others = Vec::with_capacity(n - 1);

    for (i, anchor_targets) in targets.iter().enumerate() {
        others.clear();
        for (k, l) in logits.iter_mut().enumerate() {
            *l = g.get(i, k) / tau;
            if k != i {
                others.push(*l);
            }
        }
        let lse = log_sum_exp(&others);

        let mut term = 0.0;
        let mut total_weight = 0.0;
        let mut dlogit = vec![0.0; n];
        for &(j, c) in anchor_targets {
            term -= c * (logits[j] - lse);
            total_weight += c;
            dlogit[j] -= c;
        }
        per_sample.push(term);
        if total_weight == 0.0 {
            continue;
        }
        // dL/dlogit_ik = -(1/N) (c_ik - C_i w_ik)
        for k in (0..n).filter(|&k| k != i) {
            let w = (logits[k] - lse).exp();
            let d = inv_n * (dlogit[k] + total_weight * w) / tau;
            if d == 0.0 {
                continue;
            }
            let (zi, zk) = (z[i].as_ref(), z[k].as_ref());
            for m in 0..dim {
                grads[i][m] += d * zk[m];
                grads[k][m] += d * zi[m];
            }
        }
    }

    let value = per_sample.iter().sum::<f64>() * inv_n;
    LossOutput {
        value,
        per_sample,
        grad_embeddings: Some(grads),
        grad_predictions: None,
    }
}

/// Contrastive loss with exactly one positive `positives[i]` per anchor.
pub fn infonce_loss<E: AsRef<[f64]>>(z: &[E], positives: &[usize], tau: f64) -> Result<LossOutput> {
    check_embeddings(z, tau)?;
    let n = z.len();
    if positives.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: positives.len(),
        });
    }
    let mut targets = Vec::with_capacity(n);
    for (i, &p) in positives.iter().enumerate() {
        if p == i || p >= n {
            return Err(Error::InvalidPositiveIndex {
                anchor: i,
                positive: p,
                batch: n,
            });
        }
        targets.push(vec![(p, 1.0)]);
    }
    Ok(weighted_contrastive(z, &targets, tau))
}

/// Supervised contrastive loss averaging over each anchor's positive set.
pub fn supcon_loss<E: AsRef<[f64]>, P: AsRef<[usize]>>(
    z: &[E],
    positive_sets: &[P],
    tau: f64,
) -> Result<LossOutput> {
    check_embeddings(z, tau)?;
    let n = z.len();
    if positive_sets.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: positive_sets.len(),
        });
    }
    let mut targets = Vec::with_capacity(n);
    for (i, set) in positive_sets.iter().enumerate() {
        let set = set.as_ref();
        if set.is_empty() {
            return Err(Error::EmptyPositiveSet(i));
        }
        let weight = 1.0 / set.len() as f64;
        let mut t = Vec::with_capacity(set.len());
        for &j in set {
            if j == i || j >= n {
                return Err(Error::InvalidPositiveIndex {
                    anchor: i,
                    positive: j,
                    batch: n,
                });
            }
            t.push((j, weight));
        }
        targets.push(t);
    }
    Ok(weighted_contrastive(z, &targets, tau))
}

/// Paired-embeddings contrastive loss: kNN positives over label similarity,
/// each weighted by its soft label.
pub fn pecl_loss<E: AsRef<[f64]>, L: AsRef<[f64]>>(
    z: &[E],
    labels: &[L],
    config: &ContrastiveConfig,
) -> Result<LossOutput> {
    config.validate()?;
    check_embeddings(z, config.tau)?;
    if labels.len() != z.len() {
        return Err(Error::LengthMismatch {
            expected: z.len(),
            actual: labels.len(),
        });
    }
    let sim = label_similarity_matrix(labels)?;
    let neighbors = knn_neighbors(&sim, config.k)?;
    let soft = soft_labels(&sim, config.soft_label_source, Some(z))?;
    let targets: Vec<Vec<(usize, f64)>> = neighbors
        .iter()
        .map(|set| {
            let inv = 1.0 / set.len() as f64;
            set.neighbors
                .iter()
                .map(|&j| (j, soft.get(set.anchor, j) * inv))
                .collect()
        })
        .collect();
    Ok(weighted_contrastive(z, &targets, config.tau))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    /// `bce + alpha * pecl`, with gradients for predictions and embeddings.
    pub total: LossOutput,
    pub bce: f64,
    /// Zero when the contrastive term was skipped (alpha = 0 or a batch of one).
    pub pecl: f64,
}

/// Prediction loss plus `alpha`-weighted contrastive regularisation.
pub fn combined_loss<L: AsRef<[f64]>, P: AsRef<[f64]>, E: AsRef<[f64]>>(
    labels: &[L],
    preds: &[P],
    z: &[E],
    config: &ContrastiveConfig,
) -> Result<CombinedLoss> {
    config.validate()?;
    let bce = bce_loss(labels, preds)?;
    if z.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: z.len(),
        });
    }
    let dim = check_rows(z, "embeddings")?;
    let pecl = if config.alpha != 0.0 && z.len() >= 2 {
        Some(pecl_loss(z, labels, config)?)
    } else {
        None
    };

    let (pecl_value, grad_embeddings, per_sample) = match &pecl {
        Some(p) => {
            let grads = p
                .grad_embeddings
                .as_ref()
                .map(|g| {
                    g.iter()
                        .map(|row| row.iter().map(|v| config.alpha * v).collect())
                        .collect()
                })
                .unwrap_or_default();
            let per_sample = bce
                .per_sample
                .iter()
                .zip(&p.per_sample)
                .map(|(b, c)| b + config.alpha * c)
                .collect();
            (p.value, grads, per_sample)
        }
        None => (0.0, vec![vec![0.0; dim]; z.len()], bce.per_sample.clone()),
    };

    let value = if pecl.is_some() {
        bce.value + config.alpha * pecl_value
    } else {
        bce.value
    };
    Ok(CombinedLoss {
        total: LossOutput {
            value,
            per_sample,
            grad_embeddings: Some(grad_embeddings),
            grad_predictions: bce.grad_predictions,
        },
        bce: bce.value,
        pecl: pecl_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, l2_normalize, SeededRng, FD_STEP};
    use proptest::prelude::*;
    use rand::Rng;

    // -ln(e^2 / (e^2 + 1)), evaluated to 30 digits
    const NEG_LOG_W: f64 = 0.126_928_011_042_972_5;

    fn three_points() -> Vec<Vec<f64>> {
        // z0.z1 = 1, z0.z2 = 0
        vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]
    }

    #[test]
    fn bce_examples() {
        let out = bce_loss(&[vec![0.5]], &[vec![0.5]]).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-15);
        let out = bce_loss(&[vec![1.0]], &[vec![1.0 - 1e-12]]).unwrap();
        assert!(out.value < 1e-6);
        // -(0.2 ln 0.4 + 0.8 ln 0.6) = 0.591918645387623559601116719397
        let out = bce_loss(&[vec![0.2, 0.8]], &[vec![0.4, 0.6]]).unwrap();
        assert!((out.value - 0.591_918_645_387_623_6).abs() < 1e-14);
    }

    #[test]
    fn bce_shape_errors() {
        assert!(matches!(
            bce_loss(&[vec![0.5]], &[vec![0.5, 0.5]]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(bce_loss(&[vec![0.5]], &[vec![0.5], vec![0.5]]).is_err());
        let empty: [Vec<f64>; 0] = [];
        assert!(bce_loss(&empty, &empty).is_err());
    }

    #[test]
    fn bce_gradient_formula() {
        let y = [vec![0.2, 0.8, 0.0]];
        let p = [vec![0.4, 0.6, 0.3]];
        let out = bce_loss(&y, &p).unwrap();
        let g = out.grad_predictions.unwrap();
        let num = finite_diff_grad(|x| bce_loss(&y, &[x.to_vec()]).unwrap().value, &p[0], FD_STEP);
        for (a, b) in g[0].iter().zip(&num) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn infonce_examples() {
        let z = [vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(infonce_loss(&z, &[1, 0], 0.5).unwrap().value, 0.0);

        // all pairwise similarities equal -> uniform over 2 candidates
        let a = 2.0 * std::f64::consts::PI / 3.0;
        let z = [
            vec![1.0, 0.0],
            vec![a.cos(), a.sin()],
            vec![(2.0 * a).cos(), (2.0 * a).sin()],
        ];
        let out = infonce_loss(&z, &[1, 2, 0], 0.3).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-12);

        let out = infonce_loss(&three_points(), &[1, 0, 0], 0.5).unwrap();
        assert!((out.per_sample[0] - NEG_LOG_W).abs() < 1e-14);
    }

    #[test]
    fn infonce_errors() {
        let z = three_points();
        assert!(matches!(
            infonce_loss(&z, &[0, 0, 0], 0.5),
            Err(Error::InvalidPositiveIndex { anchor: 0, .. })
        ));
        assert!(infonce_loss(&z, &[1, 5, 0], 0.5).is_err());
        assert!(infonce_loss(&z[..1], &[0], 0.5).is_err());
        assert!(infonce_loss(&z, &[1, 0, 0], 0.0).is_err());
    }

    #[test]
    fn supcon_examples() {
        let z = three_points();
        let a = supcon_loss(&z, &[vec![1], vec![0], vec![0]], 0.5).unwrap();
        let b = infonce_loss(&z, &[1, 0, 0], 0.5).unwrap();
        assert_eq!(a.value, b.value);

        let z2 = [vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(supcon_loss(&z2, &[vec![1], vec![0]], 0.5).unwrap().value, 0.0);

        // orthonormal embeddings: every off-diagonal similarity is 0
        let z4: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let out = supcon_loss(&z4, &[vec![1, 2], vec![0], vec![0], vec![0]], 0.5).unwrap();
        // ln 3 = 1.09861228866810969139524523692
        assert!((out.per_sample[0] - 1.098_612_288_668_109_7).abs() < 1e-14);

        let empty: Vec<usize> = vec![];
        assert!(matches!(
            supcon_loss(&z, &[vec![1], empty.clone(), vec![0]], 0.5),
            Err(Error::EmptyPositiveSet(1))
        ));
    }

    #[test]
    fn pecl_examples() {
        let cfg = ContrastiveConfig {
            k: 1,
            tau: 0.5,
            alpha: 0.1,
            soft_label_source: SoftLabelSource::LabelCosineSquared,
        };
        let z = [vec![0.6, 0.8], vec![1.0, 0.0]];
        let out = pecl_loss(&z, &[vec![0.3, 0.1], vec![0.9, 0.0]], &cfg).unwrap();
        assert_eq!(out.value, 0.0);

        // s01 = (1/sqrt 2)^2 = 0.5, neighbour 1 by tie-break; 0.5 * 0.12692801...
        let labels = [vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = pecl_loss(&three_points(), &labels, &cfg).unwrap();
        assert!((out.per_sample[0] - 0.063_464_005_521_486_25).abs() < 1e-14);

        assert!(matches!(
            pecl_loss(&z[..1], &labels[..1], &cfg),
            Err(Error::EmptyBatch(1))
        ));
    }

    #[test]
    fn pecl_constant_one_is_supcon_over_knn() {
        let mut rng = SeededRng::new(3);
        let (z, y) = random_batch(&mut rng, 9, 6, 5);
        let cfg = ContrastiveConfig {
            k: 3,
            tau: 0.4,
            alpha: 1.0,
            soft_label_source: SoftLabelSource::ConstantOne,
        };
        let sets: Vec<Vec<usize>> = knn_neighbors(&label_similarity_matrix(&y).unwrap(), 3)
            .unwrap()
            .into_iter()
            .map(|s| s.neighbors)
            .collect();
        let a = pecl_loss(&z, &y, &cfg).unwrap();
        let b = supcon_loss(&z, &sets, 0.4).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn combined_examples() {
        let mut rng = SeededRng::new(11);
        let (z, y) = random_batch(&mut rng, 6, 5, 4);
        let p: Vec<Vec<f64>> = y
            .iter()
            .map(|r| r.iter().map(|v| 0.25 + 0.5 * v).collect())
            .collect();
        let bce = bce_loss(&y, &p).unwrap();

        let mut cfg = ContrastiveConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(combined_loss(&y, &p, &z, &cfg).unwrap().total.value, bce.value);

        cfg.alpha = 0.1;
        let pecl = pecl_loss(&z, &y, &cfg).unwrap();
        let c = combined_loss(&y, &p, &z, &cfg).unwrap();
        assert_eq!(c.total.value, bce.value + 0.1 * pecl.value);
        assert_eq!(c.pecl, pecl.value);

        for alpha in [0.0, 0.3, 7.0] {
            cfg.alpha = alpha;
            let c = combined_loss(&y[..2], &p[..2], &z[..2], &cfg).unwrap();
            assert_eq!(c.total.value, bce_loss(&y[..2], &p[..2]).unwrap().value);
        }
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(5);
        for trial in 0..10 {
            let n = rng.random_range(2..8);
            let (z, y) = random_batch(&mut rng, n, 5, 4);
            let cfg = ContrastiveConfig {
                k: 1 + trial % 3,
                tau: 0.3 + 0.1 * trial as f64,
                alpha: 1.0,
                soft_label_source: SoftLabelSource::LabelCosineSquared,
            };
            let analytic = pecl_loss(&z, &y, &cfg).unwrap().grad_embeddings.unwrap();
            let flat: Vec<f64> = z.concat();
            let numeric = finite_diff_grad(
                |x| {
                    let rows: Vec<&[f64]> = x.chunks(5).collect();
                    pecl_loss(&rows, &y, &cfg).unwrap().value
                },
                &flat,
                FD_STEP,
            );
            for (a, b) in analytic.concat().iter().zip(&numeric) {
                assert!((a - b).abs() <= 1e-8 || (a - b).abs() <= 1e-5 * a.abs().max(b.abs()));
            }
        }
    }

    #[test]
    fn mutual_neighbour_similarity_lowers_loss() {
        // 0 and 1 are each other's 1-NN; raising z0.z1 must strictly lower the loss.
        let labels = [vec![1.0, 0.1], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]];
        let cfg = ContrastiveConfig {
            k: 1,
            tau: 0.5,
            alpha: 1.0,
            soft_label_source: SoftLabelSource::LabelCosineSquared,
        };
        let at = |theta: f64| {
            let z = [
                vec![1.0, 0.0, 0.0, 0.0],
                vec![theta.cos(), theta.sin(), 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ];
            pecl_loss(&z, &labels, &cfg).unwrap().value
        };
        let mut prev = f64::INFINITY;
        for step in (0..=10).rev() {
            let v = at(step as f64 * 0.15);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn saturated_positive_stops_lowering_pecl_for_k_above_one() {
        // Anchor 0 has positives 1 and 2 with equal weight. Once the softmax
        // puts more than half its mass on 1, pulling 1 closer starves 2 and
        // the anchor term rises: the gradient is C_0 p_01 - c_01.
        let labels = [vec![1.0, 1.0], vec![1.0, 0.9], vec![0.9, 1.0], vec![0.0, 1.0]];
        let cfg = ContrastiveConfig {
            k: 2,
            tau: 0.1,
            alpha: 1.0,
            soft_label_source: SoftLabelSource::ConstantOne,
        };
        let at = |theta: f64| {
            let z = [
                vec![1.0, 0.0, 0.0],
                vec![theta.cos(), theta.sin(), 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, -1.0, 0.0],
            ];
            pecl_loss(&z, &labels, &cfg).unwrap().value
        };
        assert!(at(0.0) > at(0.3));
    }

    pub(crate) fn random_batch(
        rng: &mut SeededRng,
        n: usize,
        dim: usize,
        species: usize,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let z = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                l2_normalize(&v).unwrap()
            })
            .collect();
        let y = (0..n)
            .map(|_| (0..species).map(|_| rng.random::<f64>()).collect())
            .collect();
        (z, y)
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_permutation_invariant(
            seed in any::<u64>(),
            n in 2usize..10,
            k in 1usize..5,
            source in prop_oneof![
                Just(SoftLabelSource::LabelCosineSquared),
                Just(SoftLabelSource::LabelCosine),
                Just(SoftLabelSource::ConstantOne),
                Just(SoftLabelSource::EmbeddingCosine),
            ],
        ) {
            use rand::seq::SliceRandom;
            let mut rng = SeededRng::new(seed);
            let (z, y) = random_batch(&mut rng, n, 4, 5);
            let cfg = ContrastiveConfig { k, tau: 0.5, alpha: 1.0, soft_label_source: source };
            let base = pecl_loss(&z, &y, &cfg).unwrap();
            prop_assert!(base.value >= 0.0);

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let zp: Vec<Vec<f64>> = perm.iter().map(|&i| z[i].clone()).collect();
            let yp: Vec<Vec<f64>> = perm.iter().map(|&i| y[i].clone()).collect();
            let permuted = pecl_loss(&zp, &yp, &cfg).unwrap();
            // random continuous labels are tie-free with probability one
            prop_assert!((base.value - permuted.value).abs() < 1e-12);

            let pos: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
            let info = infonce_loss(&z, &pos, 0.5).unwrap();
            prop_assert!(info.value >= 0.0);
            let pos_p: Vec<usize> = {
                // position of each original index after permutation
                let mut inv = vec![0; n];
                for (p, &i) in perm.iter().enumerate() { inv[i] = p; }
                perm.iter().map(|&i| inv[pos[i]]).collect()
            };
            let info_p = infonce_loss(&zp, &pos_p, 0.5).unwrap();
            prop_assert!((info.value - info_p.value).abs() < 1e-12);
        }

        /// Two spare coordinates let z_a.z_b move while every other dot
        /// product stays put. The most label-similar pair is each other's
        /// first neighbour, so with k = 1 each is the other's only positive
        /// and the anchor gradient s_ab (p_ab - 1) is strictly negative.
        #[test]
        fn raising_a_mutual_positive_dot_lowers_pecl(
            seed in any::<u64>(),
            n in 3usize..10,
            source in prop_oneof![
                Just(SoftLabelSource::LabelCosineSquared),
                Just(SoftLabelSource::LabelCosine),
                Just(SoftLabelSource::ConstantOne),
            ],
            theta in 0.2f64..3.0,
        ) {
            let mut rng = SeededRng::new(seed);
            let (base, y) = random_batch(&mut rng, n, 4, 5);
            let sim = crate::pairing::label_similarity_matrix(&y).unwrap();
            let (mut a, mut b) = (0, 1);
            for i in 0..n {
                for j in i + 1..n {
                    if sim.get(i, j) > sim.get(a, b) {
                        (a, b) = (i, j);
                    }
                }
            }
            let r = 0.6f64;
            let shrink = (1.0 - r * r).sqrt();
            let at = |angle: f64| {
                let z: Vec<Vec<f64>> = base
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let (scale, extra) = if i == a {
                            (shrink, [r, 0.0])
                        } else if i == b {
                            (shrink, [r * angle.cos(), r * angle.sin()])
                        } else {
                            (1.0, [0.0, 0.0])
                        };
                        v.iter().map(|x| x * scale).chain(extra).collect()
                    })
                    .collect();
                let cfg = ContrastiveConfig { k: 1, tau: 0.5, alpha: 1.0, soft_label_source: source };
                pecl_loss(&z, &y, &cfg).unwrap().value
            };
            prop_assert!(at(theta - 0.2) < at(theta));
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), n in 2usize..12, tau in 0.05f64..2.0) {
            let mut rng = SeededRng::new(seed);
            let (z, _) = random_batch(&mut rng, n, 6, 2);
            let w = softmax_weights(&z, tau).unwrap();
            for i in 0..n {
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert_eq!(w.get(i, i), 0.0);
            }
        }
    }
}
