//! Do patients that sit close in embedding space also share diagnoses?
//! Compares diagnosis similarity of nearest-neighbor pairs against random
//! pairs with a Mann–Whitney U test.

use std::collections::BTreeSet;

use rand::Rng as _;

use crate::metrics::{mann_whitney_u, MetricsError};
use crate::ontology::OntologyTree;
use crate::rng;
use crate::similarity::{patient_similarity, DiagnosisSet, SimilarityError};

#[derive(Debug, thiserror::Error)]
pub enum NeighborError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("{0} embeddings but {1} diagnosis sets")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborAnalysis {
    pub k: usize,
    pub knn_mean: f64,
    pub random_mean: f64,
    pub n_knn_pairs: usize,
    pub n_random_pairs: usize,
    pub u: f64,
    pub z: f64,
    pub p_value: f64,
    pub effect_size_r: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Unordered nearest-neighbor pairs: each patient contributes its `k`
/// most cosine-similar others (lower index wins ties) and mutual
/// neighbors are counted once.
pub fn knn_pairs(embeddings: &[Vec<f64>], k: usize) -> Result<Vec<(usize, usize)>, NeighborError> {
    let n = embeddings.len();
    if k == 0 || k >= n {
        return Err(MetricsError::KTooLarge { k, n }.into());
    }
    let mut pairs = BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (cosine(&embeddings[i], &embeddings[j]), j))
            .collect();
        others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &others[..k] {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    Ok(pairs.into_iter().collect())
}

/// `count` distinct unordered pairs drawn uniformly (capped at the number
/// of available pairs).
pub fn random_pairs(n: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let available = n * n.saturating_sub(1) / 2;
    let count = count.min(available);
    let mut r = rng::stream(seed, &[rng::TAG_PAIRS]);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = r.random_range(0..n);
        let j = r.random_range(0..n);
        if i != j && seen.insert((i.min(j), i.max(j))) {
            out.push((i.min(j), i.max(j)));
        }
    }
    out
}

/// Runs the comparison. `n_random_pairs = None` matches the size of the
/// nearest-neighbor population.
pub fn neighbor_analysis(
    embeddings: &[Vec<f64>],
    sets: &[DiagnosisSet],
    tree: &OntologyTree,
    k: usize,
    n_random_pairs: Option<usize>,
    seed: u64,
) -> Result<NeighborAnalysis, NeighborError> {
    if embeddings.len() != sets.len() {
        return Err(NeighborError::LengthMismatch(embeddings.len(), sets.len()));
    }
    let knn = knn_pairs(embeddings, k)?;
    let random = random_pairs(sets.len(), n_random_pairs.unwrap_or(knn.len()), seed);
    let sims = |pairs: &[(usize, usize)]| -> Result<Vec<f64>, SimilarityError> {
        pairs
            .iter()
            .map(|&(i, j)| patient_similarity(tree, &sets[i], &sets[j]))
            .collect()
    };
    let a = sims(&knn)?;
    let b = sims(&random)?;
    let test = mann_whitney_u(&a, &b)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(NeighborAnalysis {
        k,
        knn_mean: mean(&a),
        random_mean: mean(&b),
        n_knn_pairs: a.len(),
        n_random_pairs: b.len(),
        u: test.u,
        z: test.z,
        p_value: test.p_two_sided,
        effect_size_r: test.z.abs() / ((a.len() + b.len()) as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthConfig};

    fn cohort(seed: u64) -> (Vec<DiagnosisSet>, OntologyTree, Vec<usize>) {
        let cfg = SynthConfig {
            n_patients: 120,
            seed,
            ..SynthConfig::default()
        };
        let (b, tree, truth) = synthesize(&cfg, None).unwrap();
        let sets = b
            .patients
            .iter()
            .map(|p| DiagnosisSet::resolve_strict(&tree, p.id.clone(), &p.codes).unwrap())
            .collect();
        (sets, tree, truth.cluster)
    }

    #[test]
    fn cluster_embeddings_find_similar_neighbors() {
        let (sets, tree, cluster) = cohort(1);
        let emb: Vec<Vec<f64>> = cluster
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut v = vec![0.0; 4];
                v[c] = 1.0;
                // break exact ties without mixing clusters
                v.push(1e-3 * (i % 5) as f64);
                v
            })
            .collect();
        let res = neighbor_analysis(&emb, &sets, &tree, 5, None, 3).unwrap();
        assert!(res.knn_mean > res.random_mean);
        assert!(res.p_value < 0.01);
        assert_eq!(res.n_random_pairs, res.n_knn_pairs);
    }

    #[test]
    fn noise_embeddings_show_no_effect() {
        let (sets, tree, _) = cohort(2);
        let mut r = rng::stream(77, &[]);
        let emb: Vec<Vec<f64>> = (0..sets.len())
            .map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let res = neighbor_analysis(&emb, &sets, &tree, 5, None, 3).unwrap();
        assert!(res.p_value > 1e-4, "{res:?}");
    }

    #[test]
    fn k_must_be_smaller_than_cohort() {
        let (sets, tree, _) = cohort(3);
        let emb = vec![vec![1.0]; sets.len()];
        assert!(matches!(
            neighbor_analysis(&emb, &sets, &tree, sets.len(), None, 0),
            Err(NeighborError::Metrics(MetricsError::KTooLarge { .. }))
        ));
    }

    #[test]
    fn pairs_are_unordered_and_distinct() {
        let emb: Vec<Vec<f64>> = (0..6).map(|i| vec![(i / 2) as f64 + 1.0, 1.0]).collect();
        let knn = knn_pairs(&emb, 1).unwrap();
        assert!(knn.iter().all(|&(i, j)| i < j));
        // mutual nearest neighbors appear once
        assert!(knn.len() < 6);
        let rp = random_pairs(6, 100, 1);
        assert_eq!(rp.len(), 15);
    }
}
