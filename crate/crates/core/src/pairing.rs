//! Positive-pair structure over label similarity.
//!
//! Each anchor's positives are its `k` most label-similar batch members
//! (ties broken by ascending index), and each positive pair carries a soft
//! weight derived from the similarity of the two species vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, Matrix};

/// Where the soft weight `s_ij` of a positive pair comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftLabelSource {
    /// Squared cosine similarity of the two label vectors.
    #[default]
    LabelCosineSquared,
    /// Plain cosine similarity of the two label vectors.
    LabelCosine,
    /// Every positive weighs 1, which turns the loss into SupCon over kNN positives.
    ConstantOne,
    /// Cosine similarity of the two embeddings, negatives clamped to 0.
    EmbeddingCosine,
}

impl std::str::FromStr for SoftLabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label_cosine_squared" => Ok(Self::LabelCosineSquared),
            "label_cosine" => Ok(Self::LabelCosine),
            "constant_one" => Ok(Self::ConstantOne),
            "embedding_cosine" => Ok(Self::EmbeddingCosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown soft label source `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub anchor: usize,
    /// Sorted by similarity descending, then index ascending.
    pub neighbors: Vec<usize>,
    pub similarities: Vec<f64>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.neighbors.contains(&j)
    }
}

/// Pairwise cosine similarity of label vectors.
pub fn label_similarity_matrix<L: AsRef<[f64]>>(labels: &[L]) -> Result<Matrix> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::EmptyBatch(n));
    }
    let dim = labels[0].as_ref().len();
    for l in labels {
        if l.as_ref().len() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                actual: l.as_ref().len(),
            });
        }
    }
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = cosine_similarity(labels[i].as_ref(), labels[j].as_ref());
            m.set(i, j, s);
            m.set(j, i, s);
        }
    }
    Ok(m)
}

/// The `k` most similar other members of the batch, per anchor.
///
/// `k` is clamped to `batch_size - 1`.
pub fn knn_neighbors(sim: &Matrix, k: usize) -> Result<Vec<NeighborSet>> {
    if !sim.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrix is {}x{}",
            sim.rows(),
            sim.cols()
        )));
    }
    let n = sim.rows();
    if n < 2 {
        return Err(Error::EmptyBatch(n));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let k = k.min(n - 1);
    let sets = (0..n)
        .map(|i| {
            let row = sim.row(i);
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.truncate(k);
            NeighborSet {
                anchor: i,
                similarities: order.iter().map(|&j| row[j]).collect(),
                neighbors: order,
            }
        })
        .collect();
    Ok(sets)
}

/// Soft weights `s_ij` in `[0, 1]`; the diagonal is zero.
pub fn soft_labels<E: AsRef<[f64]>>(
    sim: &Matrix,
    source: SoftLabelSource,
    embeddings: Option<&[E]>,
) -> Result<Matrix> {
    let n = sim.rows();
    let emb_sim = match source {
        SoftLabelSource::EmbeddingCosine => {
            let z = embeddings.ok_or(Error::MissingEmbeddings)?;
            if z.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    actual: z.len(),
                });
            }
            Some(label_similarity_matrix(z)?)
        }
        _ => None,
    };
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = match source {
                SoftLabelSource::LabelCosineSquared => sim.get(i, j).powi(2),
                SoftLabelSource::LabelCosine => sim.get(i, j),
                SoftLabelSource::ConstantOne => 1.0,
                SoftLabelSource::EmbeddingCosine => emb_sim.as_ref().map_or(0.0, |m| m.get(i, j)),
            };
            out.set(i, j, s.clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const INV_SQRT2: f64 = 0.707_106_781_186_547_5;

    fn no_emb() -> Option<&'static [Vec<f64>]> {
        None
    }

    #[test]
    fn similarity_matrix_examples() {
        let m = label_similarity_matrix(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        let m = label_similarity_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(m.get(0, 1), 0.0);

        let labels = [vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let m = label_similarity_matrix(&labels).unwrap();
        // per-pair oracle: dot / (|a| |b|)
        for i in 0..3 {
            for j in 0..3 {
                let a = &labels[i];
                let b = &labels[j];
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((m.get(i, j) - d / (na * nb)).abs() < 1e-15);
            }
        }
        assert!((m.get(0, 1) - INV_SQRT2).abs() < 1e-15);
        assert!((m.get(0, 2) - INV_SQRT2).abs() < 1e-15);
        assert_eq!(m.get(1, 2), 0.0);
        assert!((m.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_label_has_zero_diagonal() {
        let m = label_similarity_matrix(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(1, 1), 1.0);
    }

    #[test]
    fn similarity_errors() {
        assert!(matches!(
            label_similarity_matrix(&[vec![1.0], vec![1.0, 0.0]]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            label_similarity_matrix(&[vec![1.0]]),
            Err(Error::EmptyBatch(1))
        ));
    }

    #[test]
    fn knn_examples() {
        let m = label_similarity_matrix(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let sets = knn_neighbors(&m, 1).unwrap();
        assert_eq!(sets[0].neighbors, vec![1]);

        let sets = knn_neighbors(&m, 2).unwrap();
        for s in &sets {
            assert_eq!(s.len(), 2);
            assert!(!s.contains(s.anchor));
        }

        // sims 0.7071 to both 1 and 2: lower index wins
        let m = label_similarity_matrix(&[vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let sets = knn_neighbors(&m, 1).unwrap();
        assert_eq!(sets[0].neighbors, vec![1]);
        assert!((sets[0].similarities[0] - INV_SQRT2).abs() < 1e-15);
    }

    #[test]
    fn knn_clamps_and_rejects() {
        let m = label_similarity_matrix(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let sets = knn_neighbors(&m, 10).unwrap();
        assert_eq!(sets[0].neighbors, vec![1]);
        assert!(knn_neighbors(&Matrix::zeros(1, 1), 1).is_err());
        assert!(knn_neighbors(&Matrix::zeros(2, 3), 1).is_err());
        assert!(knn_neighbors(&m, 0).is_err());
    }

    #[test]
    fn soft_label_examples() {
        let m = label_similarity_matrix(&[vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let s = soft_labels(&m, SoftLabelSource::LabelCosineSquared, no_emb()).unwrap();
        assert!((s.get(0, 1) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(s.get(0, 0), 0.0);
        let s = soft_labels(&m, SoftLabelSource::ConstantOne, no_emb()).unwrap();
        assert_eq!(s.get(1, 2), 1.0);
        let s = soft_labels(&m, SoftLabelSource::LabelCosine, no_emb()).unwrap();
        assert!((s.get(0, 1) - INV_SQRT2).abs() < 1e-15);
    }

    #[test]
    fn embedding_soft_labels() {
        let m = Matrix::zeros(2, 2);
        assert!(matches!(
            soft_labels(&m, SoftLabelSource::EmbeddingCosine, no_emb()),
            Err(Error::MissingEmbeddings)
        ));
        let z = [vec![1.0, 0.0], vec![-1.0, 0.0]];
        let s = soft_labels(&m, SoftLabelSource::EmbeddingCosine, Some(&z[..])).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        let z = [vec![1.0, 0.0], vec![0.6, 0.8]];
        let s = soft_labels(&m, SoftLabelSource::EmbeddingCosine, Some(&z[..])).unwrap();
        assert!((s.get(0, 1) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn one_hot_soft_labels_match_hard_labels() {
        let labels = [
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ];
        let m = label_similarity_matrix(&labels).unwrap();
        let s = soft_labels(&m, SoftLabelSource::LabelCosineSquared, no_emb()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let hard = if labels[i] == labels[j] { 1.0 } else { 0.0 };
                    assert_eq!(s.get(i, j), hard);
                }
            }
        }
    }

    #[test]
    fn source_parses() {
        assert_eq!(
            "constant_one".parse::<SoftLabelSource>().unwrap(),
            SoftLabelSource::ConstantOne
        );
        assert!("nope".parse::<SoftLabelSource>().is_err());
    }

    fn label_batch() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..12, 2usize..10)
            .prop_flat_map(|(n, s)| prop::collection::vec(prop::collection::vec(0.0f64..1.0, s), n))
    }

    proptest! {
        #[test]
        fn squared_below_plain(labels in label_batch()) {
            let m = label_similarity_matrix(&labels).unwrap();
            let sq = soft_labels(&m, SoftLabelSource::LabelCosineSquared, no_emb()).unwrap();
            let pl = soft_labels(&m, SoftLabelSource::LabelCosine, no_emb()).unwrap();
            let n = labels.len();
            let (mut sum_sq, mut sum_pl, mut interior) = (0.0, 0.0, false);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!(sq.get(i, j) <= pl.get(i, j));
                    prop_assert!((0.0..=1.0).contains(&sq.get(i, j)));
                    prop_assert_eq!(sq.get(i, j), sq.get(j, i));
                    if i != j {
                        sum_sq += sq.get(i, j);
                        sum_pl += pl.get(i, j);
                        interior |= pl.get(i, j) > 0.0 && pl.get(i, j) < 1.0;
                    }
                }
            }
            if interior {
                prop_assert!(sum_sq < sum_pl);
            }
        }

        #[test]
        fn knn_permutation_equivariant(
            labels in label_batch(),
            k in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let n = labels.len();
            let m = label_similarity_matrix(&labels).unwrap();
            // Tie-breaking depends on index order; only tie-free rows are compared.
            let tie_free = (0..n).all(|i| {
                let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| m.get(i, j)).collect();
                row.sort_by(f64::total_cmp);
                row.windows(2).all(|w| w[1] - w[0] > 1e-12)
            });
            prop_assume!(tie_free);

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut crate::numeric::SeededRng::new(seed));
            // permuted[p] = labels[perm[p]]
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| labels[i].clone()).collect();
            let mp = label_similarity_matrix(&permuted).unwrap();
            let orig = knn_neighbors(&m, k).unwrap();
            let new = knn_neighbors(&mp, k).unwrap();
            for (p, set) in new.iter().enumerate() {
                let mapped: Vec<usize> = set.neighbors.iter().map(|&q| perm[q]).collect();
                prop_assert_eq!(&mapped, &orig[perm[p]].neighbors);
            }
        }
    }
}
