//! Independent oracles shared by the integration tests. None of these call
//! into the code under test beyond building inputs.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ocdistill_core::ontology::{EdgeRecord, NodeIdx, OntologyTree};

/// Tree with node 0 as root and node `i + 1` hanging under `parents[i]`
/// (reduced modulo `i + 1` so every parent precedes its child).
pub fn tree_from_parents(parents: &[usize]) -> OntologyTree {
    let mut records = vec![EdgeRecord {
        child: "n0".into(),
        parent: None,
        label: String::new(),
    }];
    for (i, &p) in parents.iter().enumerate() {
        records.push(EdgeRecord {
            child: format!("n{}", i + 1),
            parent: Some(format!("n{}", p % (i + 1))),
            label: String::new(),
        });
    }
    OntologyTree::from_records(records).expect("valid generated tree")
}

/// Root-excluded ancestor set of `node`, walked with `parent` only.
pub fn path_set(tree: &OntologyTree, node: NodeIdx) -> BTreeSet<NodeIdx> {
    let mut out = BTreeSet::new();
    let mut cur = node;
    while let Some(p) = tree.parent(cur) {
        out.insert(cur);
        cur = p;
    }
    out
}

/// Path-set Jaccard as an exact ratio of integer counts.
pub fn brute_similarity(tree: &OntologyTree, a: NodeIdx, b: NodeIdx) -> (usize, usize) {
    if a == b {
        return (1, 1);
    }
    let pa = path_set(tree, a);
    let pb = path_set(tree, b);
    let inter = pa.intersection(&pb).count();
    let union = pa.union(&pb).count();
    (inter, union)
}

pub fn ratio((num, den): (usize, usize)) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Plain NT-Xent over `2B` rows (positive of `a` is `(a + B) mod 2B`),
/// averaged over every anchor.
pub fn plain_ntxent(rows: &[Vec<f64>], tau: f64) -> f64 {
    let n = rows.len();
    let b = n / 2;
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let dot = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for a in 0..n {
        let pos = (a + b) % n;
        let logits: Vec<f64> = (0..n).filter(|&c| c != a).map(|c| dot(a, c)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - dot(a, pos);
    }
    total / n as f64
}

/// Probability a random positive outscores a random negative, ties 1/2.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision by sweeping every distinct score as a threshold
/// (predict positive when `score >= t`) and summing precision times the
/// recall gained.
pub fn sweep_average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l).count() as f64;
        let predicted = scores.iter().filter(|s| **s >= t).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    ap
}
