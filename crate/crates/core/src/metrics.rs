//! Ranking metrics, bootstrap intervals and the Mann–Whitney U test.

use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::data::TaskKind;
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("only one class present")]
    SingleClass,
    #[error("no positive examples")]
    NoPositives,
    #[error("class {0} has no examples")]
    MissingClass(usize),
    #[error("empty sample")]
    EmptySample,
    #[error("K = {k} must be smaller than the cohort size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("insufficient labels: {0}")]
    InsufficientLabels(String),
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("non-finite score")]
    NonFinite,
    #[error("every bootstrap resample was degenerate")]
    DegenerateBootstrap,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

/// 1-based ranks with ties sharing the average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Rank-based AUROC; tied scores count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_inputs(scores, labels)?;
    let n1 = labels.iter().filter(|&&y| y).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(MetricsError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let r1: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n0 as f64))
}

/// Average precision: precision summed at each distinct-score threshold,
/// weighted by the recall gained there.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_inputs(scores, labels)?;
    let total_pos = labels.iter().filter(|&&y| y).count();
    if total_pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut group_pos = 0;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                group_pos += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += group_pos;
        if group_pos > 0 {
            ap += group_pos as f64 / total_pos as f64 * tp as f64 / (tp + fp) as f64;
        }
        i = j;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OvrMetrics {
    pub per_class_auroc: Vec<f64>,
    pub per_class_auprc: Vec<f64>,
    pub macro_auroc: f64,
    pub macro_auprc: f64,
}

/// Macro one-vs-rest over `k` score columns.
pub fn macro_ovr(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<OvrMetrics, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if k < 2 {
        return Err(MetricsError::SingleClass);
    }
    let mut per_class_auroc = Vec::with_capacity(k);
    let mut per_class_auprc = Vec::with_capacity(k);
    for c in 0..k {
        let y: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if !y.iter().any(|&v| v) {
            return Err(MetricsError::MissingClass(c));
        }
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        per_class_auroc.push(auroc(&col, &y)?);
        per_class_auprc.push(auprc(&col, &y)?);
    }
    Ok(OvrMetrics {
        macro_auroc: per_class_auroc.iter().sum::<f64>() / k as f64,
        macro_auprc: per_class_auprc.iter().sum::<f64>() / k as f64,
        per_class_auroc,
        per_class_auprc,
    })
}

/// Linear-interpolated empirical quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    /// Resamples that had to be drawn again because the metric was undefined.
    pub redraws: usize,
}

const MAX_REDRAWS: usize = 1000;

/// Percentile bootstrap over `n` examples. `metric` receives the resampled
/// example indices; an `Err` marks the resample degenerate and it is drawn
/// again from the next sub-stream.
pub fn bootstrap_ci<F>(n: usize, metric: F, n_resamples: usize, level: f64, seed: u64) -> Result<Interval, MetricsError>
where
    F: Fn(&[usize]) -> Result<f64, MetricsError> + Sync,
{
    use rand::Rng as _;
    if n == 0 || n_resamples == 0 {
        return Err(MetricsError::EmptySample);
    }
    let draws: Vec<Result<(f64, usize), MetricsError>> = (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            for attempt in 0..MAX_REDRAWS {
                let mut r = rng::stream(seed, &[rng::TAG_BOOTSTRAP, b as u64, attempt as u64]);
                let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
                if let Ok(v) = metric(&idx) {
                    return Ok((v, attempt));
                }
            }
            Err(MetricsError::DegenerateBootstrap)
        })
        .collect();
    let mut values = Vec::with_capacity(n_resamples);
    let mut redraws = 0;
    for d in draws {
        let (v, extra) = d?;
        values.push(v);
        redraws += extra;
    }
    if redraws > 0 {
        log::info!("bootstrap redrew {redraws} degenerate resamples");
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(Interval {
        low: quantile(&values, alpha),
        high: quantile(&values, 1.0 - alpha),
        redraws,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub auroc: f64,
    pub auprc: f64,
    pub auroc_ci: Option<(f64, f64)>,
    pub auprc_ci: Option<(f64, f64)>,
    pub n_resamples: usize,
    pub n_examples: usize,
    /// Per-class (AUROC, AUPRC) for multiclass tasks.
    pub per_class: Option<Vec<(f64, f64)>>,
}

fn softmax_rows(outputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    outputs
        .iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

fn point_metrics(
    kind: TaskKind,
    scores: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, f64, Option<Vec<(f64, f64)>>), MetricsError> {
    match kind {
        TaskKind::Binary => {
            let s: Vec<f64> = scores.iter().map(|r| r[0]).collect();
            let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            Ok((auroc(&s, &y)?, auprc(&s, &y)?, None))
        }
        TaskKind::Multiclass(k) => {
            let m = macro_ovr(scores, labels, k)?;
            let per = m
                .per_class_auroc
                .iter()
                .copied()
                .zip(m.per_class_auprc.iter().copied())
                .collect();
            Ok((m.macro_auroc, m.macro_auprc, Some(per)))
        }
    }
}

/// Scores model outputs (one logit for binary, `k` logits for multiclass).
/// With `n_resamples > 0` both metrics get percentile intervals.
pub fn evaluate(
    kind: TaskKind,
    outputs: &[Vec<f64>],
    labels: &[usize],
    n_resamples: usize,
    seed: u64,
) -> Result<MetricReport, MetricsError> {
    if outputs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(outputs.len(), labels.len()));
    }
    let scores = match kind {
        TaskKind::Binary => outputs.to_vec(),
        TaskKind::Multiclass(_) => softmax_rows(outputs),
    };
    let (auroc, auprc, per_class) = point_metrics(kind, &scores, labels)?;
    let (mut auroc_ci, mut auprc_ci) = (None, None);
    if n_resamples > 0 {
        let resampled = |idx: &[usize]| {
            let s: Vec<Vec<f64>> = idx.iter().map(|&i| scores[i].clone()).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            point_metrics(kind, &s, &y)
        };
        let a = bootstrap_ci(labels.len(), |idx| resampled(idx).map(|m| m.0), n_resamples, 0.95, seed)?;
        let p = bootstrap_ci(labels.len(), |idx| resampled(idx).map(|m| m.1), n_resamples, 0.95, seed)?;
        auroc_ci = Some((a.low, a.high));
        auprc_ci = Some((p.low, p.high));
    }
    Ok(MetricReport {
        auroc,
        auprc,
        auroc_ci,
        auprc_ci,
        n_resamples,
        n_examples: labels.len(),
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// U statistic for the first sample.
    pub u: f64,
    /// Normal-approximation Z with tie and continuity corrections.
    pub z: f64,
    pub p_two_sided: f64,
    pub exact: bool,
}

fn normal_two_sided(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Exact two-sided p-value by enumerating every assignment of the pooled
/// (mid)ranks to the smaller sample.
fn exact_p(doubled_ranks: &[u64], m: usize, observed: u64) -> f64 {
    let max_sum: u64 = {
        let mut r = doubled_ranks.to_vec();
        r.sort_unstable_by(|a, b| b.cmp(a));
        r[..m].iter().sum()
    };
    let width = max_sum as usize + 1;
    // counts[k][s]: subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0.0f64; width]; m + 1];
    counts[0][0] = 1.0;
    for &r in doubled_ranks {
        let r = r as usize;
        for k in (1..=m).rev() {
            let (lower, upper) = counts.split_at_mut(k);
            let (prev, cur) = (&lower[k - 1], &mut upper[0]);
            for s in (r..width).rev() {
                if prev[s - r] != 0.0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    let total: f64 = counts[m].iter().sum();
    let mean: f64 = counts[m].iter().enumerate().map(|(s, c)| s as f64 * c).sum::<f64>() / total;
    let dist = (observed as f64 - mean).abs();
    let extreme: f64 = counts[m]
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as f64 - mean).abs() >= dist - 1e-9)
        .map(|(_, c)| c)
        .sum();
    (extreme / total).min(1.0)
}

/// Two-sample Mann–Whitney U. Exact enumeration is used when
/// `n1·n2 ≤ 400`, or when one sample has fewer than 8 values and the
/// pooled size is at most 2000.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney, MetricsError> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let (n1, n2) = (x.len(), y.len());
    let n = n1 + n2;
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = average_ranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;

    let mu = (n1 * n2) as f64 / 2.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let nf = n as f64;
    let var = (n1 * n2) as f64 / 12.0 * ((nf + 1.0) - if n > 1 { tie_term / (nf * (nf - 1.0)) } else { 0.0 });
    let diff = u - mu;
    let z = if var <= 0.0 || diff.abs() <= 0.5 {
        0.0
    } else {
        (diff - 0.5 * diff.signum()) / var.sqrt()
    };

    let m = n1.min(n2);
    let exact = n1 * n2 <= 400 || (m < 8 && n <= 2000);
    let p_two_sided = if exact {
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let observed: u64 = if n1 <= n2 {
            doubled[..n1].iter().sum()
        } else {
            doubled[n1..].iter().sum()
        };
        exact_p(&doubled, m, observed)
    } else {
        normal_two_sided(z)
    };
    Ok(MannWhitney {
        u,
        z,
        p_two_sided,
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &y).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &y).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), Err(MetricsError::SingleClass));
    }

    #[test]
    fn auprc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auprc(&[0.1, 0.2, 0.3, 0.4], &y).unwrap(), 1.0);
        let y = [true, false, false, false, false];
        assert!((auprc(&[0.0, 1.0, 2.0, 3.0, 4.0], &y).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(auprc(&[0.1], &[false]), Err(MetricsError::NoPositives));
    }

    #[test]
    fn macro_ovr_cases() {
        let scores = vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.6, 0.4], vec![0.2, 0.8]];
        let labels = [0, 1, 1, 0];
        let m = macro_ovr(&scores, &labels, 2).unwrap();
        let bin = auroc(&[0.1, 0.7, 0.4, 0.8], &[false, true, true, false]).unwrap();
        assert!((m.macro_auroc - bin).abs() < 1e-15);

        let onehot = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let m = macro_ovr(&onehot, &[0, 1, 2], 3).unwrap();
        assert_eq!(m.macro_auroc, 1.0);
        assert_eq!(macro_ovr(&onehot, &[0, 1, 1], 3), Err(MetricsError::MissingClass(2)));
    }

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p_two_sided - 0.1).abs() < 1e-12);

        let x = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let r = mann_whitney_u(&x, &x).unwrap();
        assert_eq!(r.u, 32.0);
        assert!((r.p_two_sided - 1.0).abs() < 1e-12);

        assert_eq!(mann_whitney_u(&[], &[1.0]), Err(MetricsError::EmptySample));
    }

    #[test]
    fn large_identical_samples_have_p_near_one() {
        let x: Vec<f64> = (0..300).map(|i| (i % 17) as f64).collect();
        let r = mann_whitney_u(&x, &x).unwrap();
        assert!(!r.exact);
        assert!(r.p_two_sided > 0.95);
    }

    #[test]
    fn bootstrap_is_reproducible_and_brackets_the_estimate() {
        let scores: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
        let labels: Vec<bool> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| *s > 50.0 || i % 7 == 0)
            .collect();
        let metric = |idx: &[usize]| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            auroc(&s, &y)
        };
        let point = auroc(&scores, &labels).unwrap();
        let a = bootstrap_ci(200, metric, 300, 0.95, 4).unwrap();
        let b = bootstrap_ci(200, metric, 300, 0.95, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.low <= point && point <= a.high);

        let constant = bootstrap_ci(10, |_| Ok(0.5), 50, 0.95, 1).unwrap();
        assert_eq!((constant.low, constant.high), (0.5, 0.5));
    }

    #[test]
    fn degenerate_resamples_are_redrawn() {
        // one positive among 20: many resamples miss it
        let labels: Vec<bool> = (0..20).map(|i| i == 3).collect();
        let scores: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let metric = |idx: &[usize]| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            auroc(&s, &y)
        };
        let ci = bootstrap_ci(20, metric, 200, 0.95, 9).unwrap();
        assert!(ci.redraws > 0);
    }
}
