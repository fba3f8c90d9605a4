//! Patient-level diagnosis similarity (symmetric best-match aggregation),
//! the weight transforms applied to it, and per-batch weight matrices.

use serde::{Deserialize, Serialize};

use crate::ontology::{NodeIdx, OntologyError, OntologyTree};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimilarityError {
    #[error("diagnosis set for patient `{0}` is empty")]
    EmptySet(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error("similarity {0} outside [0, 1]")]
    OutOfRangeSimilarity(f64),
    #[error("invalid weight spec: {0}")]
    InvalidSpec(String),
    #[error("histogram needs at least one bin")]
    ZeroBins,
}

/// A patient's deduplicated diagnosis codes, resolved against a tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiagnosisSet {
    pub patient_id: String,
    codes: Vec<NodeIdx>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ResolveStats {
    pub dropped_codes: usize,
    pub emptied_patients: usize,
}

impl DiagnosisSet {
    pub fn from_nodes(patient_id: impl Into<String>, mut codes: Vec<NodeIdx>) -> Self {
        codes.sort_unstable();
        codes.dedup();
        Self {
            patient_id: patient_id.into(),
            codes,
        }
    }

    /// Strict resolution: any code missing from the tree is an error.
    pub fn resolve_strict<S: AsRef<str>>(
        tree: &OntologyTree,
        patient_id: impl Into<String>,
        codes: &[S],
    ) -> Result<Self, SimilarityError> {
        let nodes = codes
            .iter()
            .map(|c| tree.lookup(c.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_nodes(patient_id, nodes))
    }

    /// Lenient resolution used for cohort data: unknown codes are dropped
    /// and counted in `stats`.
    pub fn resolve_lenient<S: AsRef<str>>(
        tree: &OntologyTree,
        patient_id: impl Into<String>,
        codes: &[S],
        stats: &mut ResolveStats,
    ) -> Self {
        let mut nodes = Vec::with_capacity(codes.len());
        for c in codes {
            match tree.get(c.as_ref()) {
                Some(n) => nodes.push(n),
                None => stats.dropped_codes += 1,
            }
        }
        if nodes.is_empty() {
            stats.emptied_patients += 1;
        }
        Self::from_nodes(patient_id, nodes)
    }

    pub fn codes(&self) -> &[NodeIdx] {
        &self.codes
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }
}

/// How two individual codes are compared before best-match aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodeMatch {
    /// Root-excluded path Jaccard over the hierarchy.
    #[default]
    Ontology,
    /// Flat matching: 1 for identical codes, 0 otherwise.
    Exact,
}

impl CodeMatch {
    #[inline]
    fn score(self, tree: &OntologyTree, a: NodeIdx, b: NodeIdx) -> f64 {
        match self {
            CodeMatch::Ontology => tree.similarity_unchecked(a, b),
            CodeMatch::Exact => {
                if a == b {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn check_set(tree: &OntologyTree, set: &DiagnosisSet) -> Result<(), SimilarityError> {
    if set.is_empty() {
        return Err(SimilarityError::EmptySet(set.patient_id.clone()));
    }
    if let Some(bad) = set.codes.iter().find(|c| c.index() >= tree.len()) {
        return Err(OntologyError::UnknownCode(format!("#{}", bad.0)).into());
    }
    Ok(())
}

/// Mean over `from` codes of their best match in `to`.
pub fn directional_avg(tree: &OntologyTree, from: &DiagnosisSet, to: &DiagnosisSet) -> Result<f64, SimilarityError> {
    check_set(tree, from)?;
    check_set(tree, to)?;
    let total: f64 = from
        .codes
        .iter()
        .map(|&a| {
            to.codes
                .iter()
                .map(|&b| tree.similarity_unchecked(a, b))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / from.len() as f64)
}

pub fn patient_similarity(tree: &OntologyTree, a: &DiagnosisSet, b: &DiagnosisSet) -> Result<f64, SimilarityError> {
    patient_similarity_with(tree, a, b, CodeMatch::Ontology)
}

/// Symmetric best-match similarity. The m×n code-pair table is computed
/// once and read in both directions.
pub fn patient_similarity_with(
    tree: &OntologyTree,
    a: &DiagnosisSet,
    b: &DiagnosisSet,
    mode: CodeMatch,
) -> Result<f64, SimilarityError> {
    check_set(tree, a)?;
    check_set(tree, b)?;
    Ok(similarity_unchecked(tree, a, b, mode))
}

pub(crate) fn similarity_unchecked(tree: &OntologyTree, a: &DiagnosisSet, b: &DiagnosisSet, mode: CodeMatch) -> f64 {
    let (m, n) = (a.len(), b.len());
    let mut table = vec![0.0f64; m * n];
    for (i, &ca) in a.codes.iter().enumerate() {
        for (j, &cb) in b.codes.iter().enumerate() {
            table[i * n + j] = mode.score(tree, ca, cb);
        }
    }
    let avg_a: f64 = (0..m)
        .map(|i| table[i * n..(i + 1) * n].iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / m as f64;
    let avg_b: f64 = (0..n)
        .map(|j| (0..m).map(|i| table[i * n + j]).fold(0.0, f64::max))
        .sum::<f64>()
        / n as f64;
    0.5 * (avg_a + avg_b)
}

/// Monotone decreasing map from patient similarity to a negative-pair weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightSpec {
    Power { gamma: f64 },
    Exponential { gamma: f64 },
    Threshold { delta: f64 },
    Uniform,
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::Power { gamma: 5.0 }
    }
}

impl WeightSpec {
    pub fn validate(&self) -> Result<(), SimilarityError> {
        match *self {
            WeightSpec::Power { gamma } | WeightSpec::Exponential { gamma } => {
                if !(gamma.is_finite() && gamma > 0.0) {
                    return Err(SimilarityError::InvalidSpec(format!(
                        "gamma must be positive, got {gamma}"
                    )));
                }
            }
            WeightSpec::Threshold { delta } => {
                if !(0.0..=1.0).contains(&delta) {
                    return Err(SimilarityError::InvalidSpec(format!(
                        "delta must lie in [0, 1], got {delta}"
                    )));
                }
            }
            WeightSpec::Uniform => {}
        }
        Ok(())
    }

    /// Stable textual key, used for cache hashing.
    pub fn key(&self) -> String {
        match *self {
            WeightSpec::Power { gamma } => format!("power:{:016x}", gamma.to_bits()),
            WeightSpec::Exponential { gamma } => format!("exponential:{:016x}", gamma.to_bits()),
            WeightSpec::Threshold { delta } => format!("threshold:{:016x}", delta.to_bits()),
            WeightSpec::Uniform => "uniform".to_string(),
        }
    }
}

impl std::fmt::Display for WeightSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightSpec::Power { gamma } => write!(f, "power(gamma={gamma})"),
            WeightSpec::Exponential { gamma } => write!(f, "exponential(gamma={gamma})"),
            WeightSpec::Threshold { delta } => write!(f, "threshold(delta={delta})"),
            WeightSpec::Uniform => write!(f, "uniform"),
        }
    }
}

pub fn weight(spec: &WeightSpec, s: f64) -> Result<f64, SimilarityError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(SimilarityError::OutOfRangeSimilarity(s));
    }
    Ok(match *spec {
        WeightSpec::Power { gamma } => (1.0 - s).powf(gamma),
        WeightSpec::Exponential { gamma } => (-gamma * s).exp(),
        WeightSpec::Threshold { delta } => {
            if s < delta {
                1.0
            } else {
                0.0
            }
        }
        WeightSpec::Uniform => 1.0,
    })
}

/// Weight for one patient pair. A patient with no usable codes is treated
/// as unrelated to everyone (weight 1).
pub(crate) fn pair_weight(
    tree: &OntologyTree,
    a: &DiagnosisSet,
    b: &DiagnosisSet,
    spec: &WeightSpec,
    mode: CodeMatch,
) -> f32 {
    if matches!(spec, WeightSpec::Uniform) || a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let s = similarity_unchecked(tree, a, b, mode).clamp(0.0, 1.0);
    weight(spec, s).expect("similarity clamped to [0, 1]") as f32
}

/// Dense symmetric weight matrix over a batch of patients. Entries are
/// stored at 32-bit precision; the diagonal is 1 and never consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub order: Vec<String>,
    values: Vec<f32>,
}

impl WeightMatrix {
    pub fn from_values(order: Vec<String>, values: Vec<f32>) -> Self {
        assert_eq!(order.len() * order.len(), values.len());
        Self { order, values }
    }

    pub fn uniform(order: Vec<String>) -> Self {
        let n = order.len();
        Self {
            order,
            values: vec![1.0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.len() + j]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Off-diagonal entries of the strict upper triangle, row-major.
    pub fn off_diagonal(&self) -> impl Iterator<Item = f32> + '_ {
        let n = self.len();
        (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| self.get(i, j)))
    }
}

pub fn batch_weight_matrix(
    tree: &OntologyTree,
    sets: &[DiagnosisSet],
    spec: &WeightSpec,
) -> Result<WeightMatrix, SimilarityError> {
    batch_weight_matrix_with(tree, sets, spec, CodeMatch::Ontology)
}

pub fn batch_weight_matrix_with(
    tree: &OntologyTree,
    sets: &[DiagnosisSet],
    spec: &WeightSpec,
    mode: CodeMatch,
) -> Result<WeightMatrix, SimilarityError> {
    spec.validate()?;
    for s in sets.iter().filter(|s| !s.is_empty()) {
        check_set(tree, s)?;
    }
    let n = sets.len();
    let mut values = vec![1.0f32; n * n];
    for i in 0..n {
        for j in 0..i {
            let w = pair_weight(tree, &sets[i], &sets[j], spec, mode);
            values[i * n + j] = w;
            values[j * n + i] = w;
        }
    }
    Ok(WeightMatrix {
        order: sets.iter().map(|s| s.patient_id.clone()).collect(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightHistogram {
    /// Bin `k` covers `[k/bins, (k+1)/bins)`; the last bin is closed.
    pub counts: Vec<u64>,
    pub total: u64,
    pub below_one: u64,
}

impl WeightHistogram {
    pub fn from_weights(weights: impl IntoIterator<Item = f32>, bins: usize) -> Result<Self, SimilarityError> {
        if bins == 0 {
            return Err(SimilarityError::ZeroBins);
        }
        let mut counts = vec![0u64; bins];
        let (mut total, mut below_one) = (0u64, 0u64);
        for w in weights {
            let w = w as f64;
            let k = ((w * bins as f64).floor() as usize).min(bins - 1);
            counts[k] += 1;
            total += 1;
            if w < 1.0 {
                below_one += 1;
            }
        }
        Ok(Self {
            counts,
            total,
            below_one,
        })
    }

    pub fn fraction_below_one(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.below_one as f64 / self.total as f64
        }
    }

    pub fn bin_edges(&self) -> Vec<(f64, f64)> {
        let b = self.counts.len() as f64;
        (0..self.counts.len())
            .map(|k| (k as f64 / b, (k + 1) as f64 / b))
            .collect()
    }
}

pub fn weight_histogram(matrix: &WeightMatrix, bins: usize) -> Result<WeightHistogram, SimilarityError> {
    WeightHistogram::from_weights(matrix.off_diagonal(), bins)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn brute_code(tree: &OntologyTree, a: NodeIdx, b: NodeIdx) -> f64 {
        use std::collections::HashSet;
        let pa: HashSet<_> = tree.root_path(a).into_iter().skip(1).collect();
        let pb: HashSet<_> = tree.root_path(b).into_iter().skip(1).collect();
        let union = pa.union(&pb).count();
        if union == 0 {
            return 1.0;
        }
        pa.intersection(&pb).count() as f64 / union as f64
    }

    fn brute_directional(tree: &OntologyTree, from: &DiagnosisSet, to: &DiagnosisSet) -> f64 {
        let mut total = 0.0;
        for &a in from.codes() {
            let mut best = 0.0f64;
            for &b in to.codes() {
                best = best.max(brute_code(tree, a, b));
            }
            total += best;
        }
        total / from.len() as f64
    }

    #[test]
    fn directional_examples() {
        let t = six_node_tree();
        let a = set(&t, "p", &["a"]);
        assert_eq!(directional_avg(&t, &a, &a).unwrap(), 1.0);
        let c = set(&t, "q", &["c"]);
        assert_eq!(directional_avg(&t, &a, &c).unwrap(), 0.0);

        let ac = set(&t, "r", &["a", "c"]);
        let s_ca = t.code_similarity(t.pair("c", "a").unwrap()).unwrap();
        let expected = brute_directional(&t, &ac, &a);
        assert_eq!(expected, (1.0 + s_ca) / 2.0);
        assert!((directional_avg(&t, &ac, &a).unwrap() - expected).abs() < 1e-15);

        let bd = set(&t, "s", &["b", "d"]);
        let expected = brute_directional(&t, &bd, &ac);
        assert!((directional_avg(&t, &bd, &ac).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn patient_examples() {
        let t = six_node_tree();
        let ac = set(&t, "A", &["a", "c"]);
        let a = set(&t, "B", &["a"]);
        assert_eq!(patient_similarity(&t, &ac, &ac).unwrap(), 1.0);
        let s_ca = brute_code(&t, t.lookup("c").unwrap(), t.lookup("a").unwrap());
        let expected = 0.5 * ((1.0 + s_ca) / 2.0 + 1.0);
        assert!((patient_similarity(&t, &ac, &a).unwrap() - expected).abs() < 1e-15);
        assert_eq!(
            patient_similarity(&t, &ac, &a).unwrap(),
            patient_similarity(&t, &a, &ac).unwrap()
        );
        let x = set(&t, "C", &["a", "b"]);
        let y = set(&t, "D", &["c", "Y"]);
        assert_eq!(patient_similarity(&t, &x, &y).unwrap(), 0.0);
    }

    #[test]
    fn empty_and_unknown_sets() {
        let t = six_node_tree();
        let empty = DiagnosisSet::from_nodes("e", vec![]);
        let a = set(&t, "a", &["a"]);
        assert_eq!(
            patient_similarity(&t, &empty, &a),
            Err(SimilarityError::EmptySet("e".into()))
        );
        assert!(matches!(
            DiagnosisSet::resolve_strict(&t, "z", &["nope"]),
            Err(SimilarityError::Ontology(OntologyError::UnknownCode(_)))
        ));
        let mut stats = ResolveStats::default();
        let s = DiagnosisSet::resolve_lenient(&t, "z", &["nope", "a", "a"], &mut stats);
        assert_eq!(s.len(), 1);
        assert_eq!(stats.dropped_codes, 1);
        let s = DiagnosisSet::resolve_lenient(&t, "w", &["gone"], &mut stats);
        assert!(s.is_empty());
        assert_eq!(stats.emptied_patients, 1);
    }

    #[test]
    fn weight_examples() {
        let p = WeightSpec::Power { gamma: 5.0 };
        assert_eq!(weight(&p, 0.0).unwrap(), 1.0);
        assert_eq!(weight(&p, 1.0).unwrap(), 0.0);
        assert_eq!(weight(&p, 0.5).unwrap(), 0.03125);
        assert_eq!(weight(&p, 1.5), Err(SimilarityError::OutOfRangeSimilarity(1.5)));
        let e = WeightSpec::Exponential { gamma: 2.0 };
        assert_eq!(weight(&e, 0.0).unwrap(), 1.0);
        assert!((weight(&e, 0.5).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let th = WeightSpec::Threshold { delta: 0.3 };
        assert_eq!(weight(&th, 0.29).unwrap(), 1.0);
        assert_eq!(weight(&th, 0.3).unwrap(), 0.0);
        assert_eq!(weight(&WeightSpec::Uniform, 0.9).unwrap(), 1.0);
        assert!(WeightSpec::Power { gamma: 0.0 }.validate().is_err());
        assert!(WeightSpec::Threshold { delta: 1.5 }.validate().is_err());
    }

    #[test]
    fn batch_matrix_examples() {
        let t = six_node_tree();
        let sets = vec![
            set(&t, "p0", &["a", "c"]),
            set(&t, "p1", &["a"]),
            set(&t, "p2", &["b", "d"]),
            set(&t, "p3", &["c"]),
        ];
        let uniform = batch_weight_matrix(&t, &sets, &WeightSpec::Uniform).unwrap();
        assert!(uniform.off_diagonal().all(|w| w == 1.0));

        let twins = vec![set(&t, "u", &["a", "b"]), set(&t, "v", &["a", "b"])];
        let spec = WeightSpec::Power { gamma: 5.0 };
        let m = batch_weight_matrix(&t, &twins, &spec).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(1, 0), 0.0);

        let m = batch_weight_matrix(&t, &sets, &spec).unwrap();
        assert!(m.is_symmetric());
        for i in 0..4 {
            assert_eq!(m.get(i, i), 1.0);
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let s = 0.5 * (brute_directional(&t, &sets[i], &sets[j]) + brute_directional(&t, &sets[j], &sets[i]));
                let w = (1.0 - s).powf(5.0) as f32;
                assert_eq!(m.get(i, j), w, "entry ({i},{j})");
            }
        }
        let again = batch_weight_matrix(&t, &sets, &spec).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn empty_patient_gets_uniform_weight() {
        let t = six_node_tree();
        let sets = vec![
            set(&t, "p0", &["a"]),
            DiagnosisSet::from_nodes("gone", vec![]),
            set(&t, "p2", &["a"]),
        ];
        let m = batch_weight_matrix(&t, &sets, &WeightSpec::Power { gamma: 5.0 }).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(2, 1), 1.0);
        assert_eq!(m.get(0, 2), 0.0);
    }

    #[test]
    fn histogram_examples() {
        let t = six_node_tree();
        let sets = vec![
            set(&t, "p0", &["a", "c"]),
            set(&t, "p1", &["a"]),
            set(&t, "p2", &["b", "d"]),
            set(&t, "p3", &["c"]),
        ];
        let uniform = batch_weight_matrix(&t, &sets, &WeightSpec::Uniform).unwrap();
        assert_eq!(weight_histogram(&uniform, 10).unwrap().fraction_below_one(), 0.0);

        let twins: Vec<_> = (0..4).map(|i| set(&t, &format!("t{i}"), &["a"])).collect();
        let spec = WeightSpec::Power { gamma: 5.0 };
        let m = batch_weight_matrix(&t, &twins, &spec).unwrap();
        assert_eq!(weight_histogram(&m, 10).unwrap().fraction_below_one(), 1.0);

        // enumerate the six unordered pairs by hand
        let m = batch_weight_matrix(&t, &sets, &spec).unwrap();
        let mut expected = vec![0u64; 4];
        let mut below = 0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let w = m.get(i, j) as f64;
                expected[((w * 4.0).floor() as usize).min(3)] += 1;
                if w < 1.0 {
                    below += 1;
                }
            }
        }
        let h = weight_histogram(&m, 4).unwrap();
        assert_eq!(h.counts, expected);
        assert_eq!(h.total, 6);
        assert_eq!(h.below_one, below);
        assert_eq!(weight_histogram(&m, 0), Err(SimilarityError::ZeroBins));
    }
}
