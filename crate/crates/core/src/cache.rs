//! Precomputed cohort-wide weight matrix, stored as a packed strict lower
//! triangle of 32-bit reals and gathered into per-batch matrices.
//!
//! File layout (little endian):
//!
//! ```text
//! magic      8 bytes  "OCWCACHE"
//! version    u32      1
//! ontology   32 bytes sha256 of the tree
//! cohort     32 bytes sha256 of ids + codes in cohort order
//! spec       32 bytes sha256 of weight spec + code-match mode
//! n          u64      cohort size
//! values     f32 × n(n-1)/2, row-major: (1,0), (2,0), (2,1), (3,0), ...
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::ontology::OntologyTree;
use crate::similarity::{pair_weight, CodeMatch, DiagnosisSet, SimilarityError, WeightMatrix, WeightSpec};

const MAGIC: &[u8; 8] = b"OCWCACHE";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cohort of {patients} patients needs {needed} entries, budget is {budget}")]
    BudgetExceeded {
        patients: usize,
        needed: usize,
        budget: usize,
    },
    #[error("cache file is corrupt or stale: {0}")]
    CacheCorrupt(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheKey {
    pub ontology: [u8; 32],
    pub cohort: [u8; 32],
    pub spec: [u8; 32],
}

impl CacheKey {
    pub fn compute(tree: &OntologyTree, cohort: &[DiagnosisSet], spec: &WeightSpec, mode: CodeMatch) -> Self {
        let mut h = Sha256::new();
        for set in cohort {
            h.update(set.patient_id.as_bytes());
            h.update(*b"\t");
            for c in set.codes() {
                h.update(tree.id(*c).as_bytes());
                h.update(*b",");
            }
            h.update(*b"\n");
        }
        let cohort_hash = h.finalize().into();
        let mode_key = match mode {
            CodeMatch::Ontology => "ontology",
            CodeMatch::Exact => "exact",
        };
        let spec_hash = Sha256::digest(format!("{}|{mode_key}", spec.key()).as_bytes()).into();
        Self {
            ontology: tree.content_hash(),
            cohort: cohort_hash,
            spec: spec_hash,
        }
    }
}

#[inline]
fn tri_index(i: usize, j: usize) -> usize {
    debug_assert!(i > j);
    i * (i - 1) / 2 + j
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortWeightCache {
    pub key: CacheKey,
    ids: Vec<String>,
    tri: Vec<f32>,
}

impl CohortWeightCache {
    /// Computes every pair weight. Rows are distributed over the rayon pool;
    /// each entry depends only on its own pair, so the result does not depend
    /// on the worker count.
    pub fn build(
        tree: &OntologyTree,
        cohort: &[DiagnosisSet],
        spec: &WeightSpec,
        mode: CodeMatch,
        budget_entries: usize,
    ) -> Result<Self, CacheError> {
        spec.validate()?;
        let n = cohort.len();
        let needed = n * n.saturating_sub(1) / 2;
        if needed > budget_entries {
            return Err(CacheError::BudgetExceeded {
                patients: n,
                needed,
                budget: budget_entries,
            });
        }
        let rows: Vec<Vec<f32>> = (1..n.max(1))
            .into_par_iter()
            .map(|i| {
                (0..i)
                    .map(|j| pair_weight(tree, &cohort[i], &cohort[j], spec, mode))
                    .collect()
            })
            .collect();
        let tri: Vec<f32> = rows.into_iter().flatten().collect();
        debug_assert_eq!(tri.len(), needed);
        Ok(Self {
            key: CacheKey::compute(tree, cohort, spec, mode),
            ids: cohort.iter().map(|s| s.patient_id.clone()).collect(),
            tri,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn packed(&self) -> &[f32] {
        &self.tri
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Greater => self.tri[tri_index(i, j)],
            std::cmp::Ordering::Less => self.tri[tri_index(j, i)],
        }
    }

    /// Batch matrix over cohort positions `batch`, in that order.
    pub fn gather(&self, batch: &[usize]) -> WeightMatrix {
        let b = batch.len();
        let mut values = vec![1.0f32; b * b];
        for (r, &i) in batch.iter().enumerate() {
            for (c, &j) in batch.iter().enumerate() {
                if r != c {
                    values[r * b + c] = self.get(i, j);
                }
            }
        }
        WeightMatrix::from_values(batch.iter().map(|&i| self.ids[i].clone()).collect(), values)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CacheError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.key.ontology)?;
        w.write_all(&self.key.cohort)?;
        w.write_all(&self.key.spec)?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.tri.len() * 4);
        for v in &self.tri {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CacheError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a cache and checks it against the key derived from the inputs
    /// the caller intends to use it with.
    pub fn read_from<R: Read>(mut r: R, expected: &CacheKey, ids: Vec<String>) -> Result<Self, CacheError> {
        let corrupt = |m: &str| CacheError::CacheCorrupt(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|_| corrupt("truncated header"))?;
        if u32::from_le_bytes(u32buf) != VERSION {
            return Err(corrupt("unsupported version"));
        }
        let mut key = CacheKey {
            ontology: [0; 32],
            cohort: [0; 32],
            spec: [0; 32],
        };
        for slot in [&mut key.ontology, &mut key.cohort, &mut key.spec] {
            r.read_exact(slot).map_err(|_| corrupt("truncated header"))?;
        }
        if key.ontology != expected.ontology {
            return Err(corrupt("ontology hash mismatch"));
        }
        if key.cohort != expected.cohort {
            return Err(corrupt("cohort hash mismatch"));
        }
        if key.spec != expected.spec {
            return Err(corrupt("weight spec hash mismatch"));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(|_| corrupt("truncated header"))?;
        let n = u64::from_le_bytes(u64buf) as usize;
        if n != ids.len() {
            return Err(corrupt("cohort size mismatch"));
        }
        let entries = n * n.saturating_sub(1) / 2;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != entries * 4 {
            return Err(corrupt("payload length mismatch"));
        }
        let tri: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tri.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(corrupt("weight outside [0, 1]"));
        }
        Ok(Self { key, ids, tri })
    }

    pub fn load(
        path: &Path,
        tree: &OntologyTree,
        cohort: &[DiagnosisSet],
        spec: &WeightSpec,
        mode: CodeMatch,
    ) -> Result<Self, CacheError> {
        let key = CacheKey::compute(tree, cohort, spec, mode);
        let file = std::fs::File::open(path)?;
        Self::read_from(
            std::io::BufReader::new(file),
            &key,
            cohort.iter().map(|s| s.patient_id.clone()).collect(),
        )
    }

    /// Loads a matching cache from `path` or builds and writes a fresh one.
    pub fn open_or_build(
        path: &Path,
        tree: &OntologyTree,
        cohort: &[DiagnosisSet],
        spec: &WeightSpec,
        mode: CodeMatch,
        budget_entries: usize,
    ) -> Result<Self, CacheError> {
        if path.exists() {
            match Self::load(path, tree, cohort, spec, mode) {
                Ok(c) => return Ok(c),
                Err(CacheError::CacheCorrupt(why)) => {
                    log::warn!("rebuilding weight cache {}: {why}", path.display());
                }
                Err(e) => return Err(e),
            }
        }
        let cache = Self::build(tree, cohort, spec, mode, budget_entries)?;
        cache.save(path)?;
        Ok(cache)
    }
}
