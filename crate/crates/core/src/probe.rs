//! Linear probing of frozen embeddings: L2-regularized logistic (binary)
//! or softmax (multiclass) regression fitted by full-batch gradient descent.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::metrics::{evaluate, MetricReport, MetricsError};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub n_resamples: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            learning_rate: 0.5,
            iterations: 500,
            n_resamples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub report: MetricReport,
    /// Training rows used after label-fraction subsampling, ascending.
    pub train_indices: Vec<usize>,
}

/// Class-stratified subsample keeping `ceil(fraction · n_c)` examples of
/// every class `c`.
pub fn stratified_subsample(
    labels: &[usize],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>, MetricsError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MetricsError::InsufficientLabels(format!("label fraction {fraction}")));
    }
    let mut keep = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if fraction < 1.0 {
            members.shuffle(&mut rng::stream(seed, &[rng::TAG_SUBSAMPLE, c as u64]));
            members.truncate((fraction * members.len() as f64).ceil() as usize);
        }
        keep.extend(members);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Fitted probe: standardization plus a `dim × outputs` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    mean: Vec<f64>,
    std: Vec<f64>,
    weights: Vec<f64>,
    bias: Vec<f64>,
    outputs: usize,
}

impl LinearModel {
    pub fn fit(x: &[Vec<f64>], y: &[usize], kind: TaskKind, cfg: &ProbeConfig) -> Self {
        let n = x.len();
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        for row in x {
            for j in 0..d {
                std[j] += (row[j] - mean[j]).powi(2) / n as f64;
            }
        }
        for s in &mut std {
            *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
        }
        let xs: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect())
            .collect();

        let k = kind.outputs();
        let mut w = vec![0.0; d * k];
        let mut b = vec![0.0; k];
        let mut gw = vec![0.0; d * k];
        let mut gb = vec![0.0; k];
        let mut logits = vec![0.0; k];
        for _ in 0..cfg.iterations {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            for (row, &label) in xs.iter().zip(y) {
                for o in 0..k {
                    logits[o] = b[o] + (0..d).map(|j| row[j] * w[j * k + o]).sum::<f64>();
                }
                // dL/dlogit for the mean cross-entropy
                let resid: Vec<f64> = match kind {
                    TaskKind::Binary => {
                        let p = 1.0 / (1.0 + (-logits[0]).exp());
                        vec![p - label as f64]
                    }
                    TaskKind::Multiclass(_) => {
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        (0..k).map(|o| e[o] / z - f64::from(u8::from(o == label))).collect()
                    }
                };
                for o in 0..k {
                    gb[o] += resid[o] / n as f64;
                    for j in 0..d {
                        gw[j * k + o] += resid[o] * row[j] / n as f64;
                    }
                }
            }
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= cfg.learning_rate * (gi + cfg.l2 * *wi);
            }
            for (bi, gi) in b.iter_mut().zip(&gb) {
                *bi -= cfg.learning_rate * gi;
            }
        }
        Self {
            mean,
            std,
            weights: w,
            bias: b,
            outputs: k,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let k = self.outputs;
        (0..k)
            .map(|o| {
                self.bias[o]
                    + x.iter()
                        .enumerate()
                        .map(|(j, v)| (v - self.mean[j]) / self.std[j] * self.weights[j * k + o])
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Trains on a label-fraction subsample of the training embeddings and
/// reports metrics on the test embeddings.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    kind: TaskKind,
    label_fraction: f64,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome, MetricsError> {
    if train_x.len() != train_y.len() {
        return Err(MetricsError::LengthMismatch(train_x.len(), train_y.len()));
    }
    if test_x.len() != test_y.len() {
        return Err(MetricsError::LengthMismatch(test_x.len(), test_y.len()));
    }
    let idx = stratified_subsample(train_y, kind.classes(), label_fraction, cfg.seed)?;
    let present: std::collections::BTreeSet<usize> = idx.iter().map(|&i| train_y[i]).collect();
    if present.len() < 2 {
        return Err(MetricsError::InsufficientLabels(format!(
            "subsample of {} examples covers {} class(es)",
            idx.len(),
            present.len()
        )));
    }
    let x: Vec<Vec<f64>> = idx.iter().map(|&i| train_x[i].clone()).collect();
    let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
    let model = LinearModel::fit(&x, &y, kind, cfg);
    let outputs: Vec<Vec<f64>> = test_x.iter().map(|r| model.logits(r)).collect();
    let report = evaluate(kind, &outputs, test_y, cfg.n_resamples, cfg.seed)?;
    Ok(ProbeOutcome {
        report,
        train_indices: idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut r = rng::stream(seed, &[]);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let shift = if c == 1 { 3.0 } else { -3.0 };
            x.push(vec![shift + r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_are_solved() {
        let (x, y) = blobs(200, 1);
        let (tx, ty) = blobs(100, 2);
        let cfg = ProbeConfig {
            n_resamples: 0,
            ..ProbeConfig::default()
        };
        let out = linear_probe(&x, &y, &tx, &ty, TaskKind::Binary, 1.0, &cfg).unwrap();
        assert!(out.report.auroc > 0.99);
        assert_eq!(out.train_indices.len(), 200);
    }

    #[test]
    fn subsample_is_stratified_and_reproducible() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i % 4 == 0)).collect();
        let a = stratified_subsample(&labels, 2, 0.1, 5).unwrap();
        assert_eq!(a, stratified_subsample(&labels, 2, 0.1, 5).unwrap());
        assert_eq!(a.iter().filter(|&&i| labels[i] == 1).count(), 3);
        assert_eq!(a.iter().filter(|&&i| labels[i] == 0).count(), 8);
        assert!(stratified_subsample(&labels, 2, 0.0, 5).is_err());
    }

    #[test]
    fn multiclass_probe_beats_chance() {
        let mut r = rng::stream(3, &[]);
        let make = |r: &mut rng::Rng, n: usize| {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for i in 0..n {
                let c = i % 3;
                x.push(vec![
                    c as f64 * 2.0 + r.random_range(-0.5..0.5),
                    r.random_range(-1.0..1.0),
                ]);
                y.push(c);
            }
            (x, y)
        };
        let (x, y) = make(&mut r, 90);
        let (tx, ty) = make(&mut r, 60);
        let cfg = ProbeConfig {
            n_resamples: 20,
            ..ProbeConfig::default()
        };
        let out = linear_probe(&x, &y, &tx, &ty, TaskKind::Multiclass(3), 0.5, &cfg).unwrap();
        assert!(out.report.auroc > 0.9);
        assert_eq!(out.report.per_class.as_ref().unwrap().len(), 3);
        let (lo, hi) = out.report.auroc_ci.unwrap();
        assert!(lo <= hi);
    }
}
