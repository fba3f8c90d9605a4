//! Cohort ingestion: hourly binning with missingness indicators, the
//! on-disk bundle formats, deterministic splits and a synthetic cohort
//! generator with controlled signal in each modality.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ontology::{EdgeRecord, NodeIdx, OntologyTree};
use crate::rng::{self, hash_str};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{file}:{line}: {reason}")]
    FormatError { file: String, line: usize, reason: String },
    #[error("cohort is empty after validation")]
    EmptyCohort,
    #[error("event offset {0} outside [0, horizon)")]
    OffsetOutOfRange(f64),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("degenerate synthetic config: {0}")]
    DegenerateConfig(String),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("invalid vitals series: {0}")]
    InvalidSeries(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Hourly vitals: `horizon × channels` values plus indicators, where
/// indicator 1 means the cell was observed. Unobserved cells hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct VitalsSeries {
    horizon: usize,
    channels: usize,
    values: Vec<f64>,
    indicators: Vec<u8>,
}

impl VitalsSeries {
    pub fn new(horizon: usize, channels: usize, values: Vec<f64>, indicators: Vec<u8>) -> Result<Self, DataError> {
        let n = horizon * channels;
        if horizon == 0 || channels == 0 || values.len() != n || indicators.len() != n {
            return Err(DataError::InvalidSeries(format!(
                "expected {horizon}x{channels} cells, got {} values / {} indicators",
                values.len(),
                indicators.len()
            )));
        }
        for (i, (&v, &m)) in values.iter().zip(&indicators).enumerate() {
            if m > 1 {
                return Err(DataError::InvalidSeries(format!("indicator {m} at cell {i}")));
            }
            if m == 0 && v != 0.0 {
                return Err(DataError::InvalidSeries(format!("unobserved cell {i} holds {v}")));
            }
            if !v.is_finite() {
                return Err(DataError::InvalidSeries(format!("non-finite value at cell {i}")));
            }
        }
        Ok(Self {
            horizon,
            channels,
            values,
            indicators,
        })
    }

    pub fn empty(horizon: usize, channels: usize) -> Self {
        Self {
            horizon,
            channels,
            values: vec![0.0; horizon * channels],
            indicators: vec![0; horizon * channels],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn indicators(&self) -> &[u8] {
        &self.indicators
    }

    pub fn values_at(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    pub fn indicators_at(&self, t: usize) -> &[u8] {
        &self.indicators[t * self.channels..(t + 1) * self.channels]
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    pub fn observed(&self, t: usize, c: usize) -> bool {
        self.indicators[t * self.channels + c] == 1
    }

    /// Mutable access for in-place transforms that keep coherence.
    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &mut [u8]) {
        (&mut self.values, &mut self.indicators)
    }

    pub fn is_coherent(&self) -> bool {
        self.values
            .iter()
            .zip(&self.indicators)
            .all(|(&v, &m)| m <= 1 && (m == 1 || v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VitalEvent {
    pub hour: f64,
    pub channel: usize,
    pub value: f64,
}

/// Averages events per (hour, channel) cell.
pub fn bin_events(
    events: impl IntoIterator<Item = VitalEvent>,
    horizon: usize,
    channels: usize,
) -> Result<VitalsSeries, DataError> {
    let mut sums = vec![0.0; horizon * channels];
    let mut counts = vec![0u32; horizon * channels];
    for e in events {
        if !(e.hour >= 0.0 && e.hour < horizon as f64) {
            return Err(DataError::OffsetOutOfRange(e.hour));
        }
        if e.channel >= channels {
            return Err(DataError::UnknownChannel(format!("#{}", e.channel)));
        }
        let cell = (e.hour.floor() as usize) * channels + e.channel;
        sums[cell] += e.value;
        counts[cell] += 1;
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let indicators = counts.iter().map(|&n| u8::from(n > 0)).collect();
    VitalsSeries::new(horizon, channels, values, indicators)
}

/// Per-channel z-scoring fitted on observed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit<'a>(series: impl IntoIterator<Item = &'a VitalsSeries>, channels: usize) -> Self {
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let mut n = vec![0usize; channels];
        for s in series {
            for t in 0..s.horizon() {
                for c in 0..channels {
                    if s.observed(t, c) {
                        let v = s.value(t, c);
                        sum[c] += v;
                        sq[c] += v * v;
                        n[c] += 1;
                    }
                }
            }
        }
        let mut mean = vec![0.0; channels];
        let mut std = vec![1.0; channels];
        for c in 0..channels {
            if n[c] > 0 {
                mean[c] = sum[c] / n[c] as f64;
                let var = (sq[c] / n[c] as f64 - mean[c] * mean[c]).max(0.0);
                if var > 1e-12 {
                    std[c] = var.sqrt();
                }
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, s: &VitalsSeries) -> VitalsSeries {
        let mut out = s.clone();
        let c = s.channels();
        let (values, indicators) = out.parts_mut();
        for (i, (v, &m)) in values.iter_mut().zip(indicators.iter()).enumerate() {
            if m == 1 {
                *v = (*v - self.mean[i % c]) / self.std[i % c];
            }
        }
        out
    }

    pub fn to_entries(&self) -> [(String, String); 2] {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        [
            ("norm.mean".to_string(), join(&self.mean)),
            ("norm.std".to_string(), join(&self.std)),
        ]
    }

    pub fn from_entries(entries: &BTreeMap<String, String>) -> Option<Self> {
        let parse = |k: &str| -> Option<Vec<f64>> { entries.get(k)?.split(',').map(|x| x.parse().ok()).collect() };
        Some(Self {
            mean: parse("norm.mean")?,
            std: parse("norm.std")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Binary,
    Multiclass(usize),
}

impl TaskKind {
    /// Number of classes a label may take.
    pub fn classes(self) -> usize {
        match self {
            TaskKind::Binary => 2,
            TaskKind::Multiclass(k) => k,
        }
    }

    /// Number of logits a classifier emits.
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::Binary => 1,
            TaskKind::Multiclass(k) => k,
        }
    }

    fn encode(self) -> String {
        match self {
            TaskKind::Binary => "binary,2".into(),
            TaskKind::Multiclass(k) => format!("multiclass,{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub vitals: VitalsSeries,
    pub codes: Vec<String>,
    pub labels: BTreeMap<String, usize>,
    pub note_raw: Vec<f32>,
    pub note_summary: Vec<f32>,
    pub split: Split,
}

/// A validated cohort where every patient carries every artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortBundle {
    pub channels: Vec<String>,
    pub horizon: usize,
    pub note_dim: usize,
    pub tasks: BTreeMap<String, TaskKind>,
    pub patients: Vec<Patient>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub dropped_patients: usize,
    pub ignored_diagnosis_rows: usize,
    pub ignored_label_rows: usize,
}

pub const TASK_MORTALITY: &str = "mortality";
pub const TASK_LOS: &str = "los";

impl CohortBundle {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn task(&self, name: &str) -> Result<TaskKind, DataError> {
        self.tasks
            .get(name)
            .copied()
            .ok_or_else(|| DataError::UnknownTask(name.to_string()))
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.patients[i].split == split).collect()
    }

    pub fn labels(&self, task: &str, idx: &[usize]) -> Result<Vec<usize>, DataError> {
        idx.iter()
            .map(|&i| {
                self.patients[i]
                    .labels
                    .get(task)
                    .copied()
                    .ok_or_else(|| DataError::UnknownTask(task.to_string()))
            })
            .collect()
    }

    /// Content hash over every field, independent of patient order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.channels.join(",").as_bytes());
        h.update(format!("|{}|{}|", self.horizon, self.note_dim).as_bytes());
        for (t, k) in &self.tasks {
            h.update(format!("{t}={};", k.encode()).as_bytes());
        }
        let mut order: Vec<&Patient> = self.patients.iter().collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        for p in order {
            h.update(p.id.as_bytes());
            h.update([0]);
            for v in p.vitals.values() {
                h.update(v.to_le_bytes());
            }
            h.update(p.vitals.indicators());
            let mut codes = p.codes.clone();
            codes.sort();
            h.update(codes.join(",").as_bytes());
            for (t, y) in &p.labels {
                h.update(format!("{t}={y};").as_bytes());
            }
            for v in p.note_raw.iter().chain(&p.note_summary) {
                h.update(v.to_le_bytes());
            }
            h.update(p.split.as_str().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the bundle directory; `extra_manifest` lines (e.g. the
    /// producing config hash) are appended to the manifest.
    pub fn save(&self, dir: &Path, extra_manifest: &[(String, String)]) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut files: Vec<(&str, Vec<u8>)> = Vec::new();

        files.push((
            "channels.txt",
            self.channels
                .iter()
                .map(|c| format!("{c}\n"))
                .collect::<String>()
                .into_bytes(),
        ));

        let mut vitals = String::from("patient_id,hour_offset,channel_name,value\n");
        let mut diagnoses = String::new();
        let mut labels = String::from("patient_id,task_name,label\n");
        let mut splits = String::from("patient_id,split\n");
        for p in &self.patients {
            for t in 0..p.vitals.horizon() {
                for c in 0..p.vitals.channels() {
                    if p.vitals.observed(t, c) {
                        let _ = writeln!(vitals, "{},{t},{},{}", p.id, self.channels[c], p.vitals.value(t, c));
                    }
                }
            }
            let _ = writeln!(diagnoses, "{}\t{}", p.id, p.codes.join(","));
            for (task, y) in &p.labels {
                let _ = writeln!(labels, "{},{task},{y}", p.id);
            }
            let _ = writeln!(splits, "{},{}", p.id, p.split.as_str());
        }
        let mut tasks = String::from("task_name,kind,classes\n");
        for (t, k) in &self.tasks {
            let _ = writeln!(tasks, "{t},{}", k.encode());
        }
        files.push(("vitals.csv", vitals.into_bytes()));
        files.push(("diagnoses.tsv", diagnoses.into_bytes()));
        files.push(("labels.csv", labels.into_bytes()));
        files.push(("tasks.csv", tasks.into_bytes()));
        files.push(("splits.csv", splits.into_bytes()));
        let raw: Vec<(&str, &[f32])> = self
            .patients
            .iter()
            .map(|p| (p.id.as_str(), p.note_raw.as_slice()))
            .collect();
        let summary: Vec<(&str, &[f32])> = self
            .patients
            .iter()
            .map(|p| (p.id.as_str(), p.note_summary.as_slice()))
            .collect();
        let mut buf = Vec::new();
        write_note_embeddings(&mut buf, self.note_dim, &raw).map_err(io_err(dir))?;
        files.push(("notes_raw.bin", buf));
        let mut buf = Vec::new();
        write_note_embeddings(&mut buf, self.note_dim, &summary).map_err(io_err(dir))?;
        files.push(("notes_summary.bin", buf));

        let mut manifest = format!("horizon={}\n", self.horizon);
        for (name, bytes) in &files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(io_err(&path))?;
            let _ = writeln!(manifest, "sha256:{name}={}", hex::encode(Sha256::digest(bytes)));
        }
        let _ = writeln!(manifest, "bundle_hash={}", self.content_hash());
        for (k, v) in extra_manifest {
            let _ = writeln!(manifest, "{k}={v}");
        }
        let path = dir.join("manifest.txt");
        std::fs::write(&path, manifest).map_err(io_err(&path))
    }
}

fn format_err(file: &Path, line: usize, reason: impl Into<String>) -> DataError {
    DataError::FormatError {
        file: file.display().to_string(),
        line,
        reason: reason.into(),
    }
}

const NOTE_MAGIC: &[u8; 8] = b"OCNOTES1";

/// Note-embedding file: magic, `u32` dim, `u32` count, then per record a
/// `u32` id length, the id bytes and `dim` little-endian f32 values.
pub fn write_note_embeddings<W: Write>(mut w: W, dim: usize, records: &[(&str, &[f32])]) -> std::io::Result<()> {
    w.write_all(NOTE_MAGIC)?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (id, v) in records {
        assert_eq!(v.len(), dim, "note embedding for `{id}` has wrong width");
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for x in *v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_note_embeddings(path: &Path) -> Result<(usize, BTreeMap<String, Vec<f32>>), DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let bad = |why: &str| format_err(path, 0, why);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DataError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != NOTE_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
    let dim = u32_at(take(4)?);
    let count = u32_at(take(4)?);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let id = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("id is not utf-8"))?;
        let raw = take(dim * 4)?;
        let v = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if out.insert(id.clone(), v).is_some() {
            return Err(bad(&format!("duplicate id `{id}`")));
        }
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((dim, out))
}

/// Reads `patient_id<TAB>code1,code2,...` records.
pub fn read_diagnoses(path: &Path) -> Result<Vec<(String, Vec<String>)>, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, codes) = line
            .split_once('\t')
            .ok_or_else(|| format_err(path, i + 1, "expected `patient_id<TAB>codes`"))?;
        let codes = codes
            .split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(String::from)
            .collect();
        out.push((id.trim().to_string(), codes));
    }
    Ok(out)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

/// Paths of the files making up a cohort.
#[derive(Debug, Clone)]
pub struct CohortPaths {
    pub channels: PathBuf,
    pub vitals: PathBuf,
    pub diagnoses: PathBuf,
    pub labels: PathBuf,
    pub tasks: PathBuf,
    pub notes_raw: PathBuf,
    pub notes_summary: PathBuf,
    pub splits: PathBuf,
    pub manifest: PathBuf,
}

impl CohortPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            channels: dir.join("channels.txt"),
            vitals: dir.join("vitals.csv"),
            diagnoses: dir.join("diagnoses.tsv"),
            labels: dir.join("labels.csv"),
            tasks: dir.join("tasks.csv"),
            notes_raw: dir.join("notes_raw.bin"),
            notes_summary: dir.join("notes_summary.bin"),
            splits: dir.join("splits.csv"),
            manifest: dir.join("manifest.txt"),
        }
    }
}

/// Loads and validates a cohort. With `task = Some(name)`, patients lacking
/// a label for that task are dropped as well.
pub fn load_cohort(paths: &CohortPaths, task: Option<&str>) -> Result<(CohortBundle, LoadStats), DataError> {
    let mut stats = LoadStats::default();

    let mut horizon = None;
    for (n, line) in read_lines(&paths.manifest)? {
        if let Some(v) = line.strip_prefix("horizon=") {
            horizon = Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| format_err(&paths.manifest, n, "bad horizon"))?,
            );
        }
    }
    let horizon = horizon.ok_or_else(|| format_err(&paths.manifest, 0, "missing horizon"))?;

    let channels: Vec<String> = read_lines(&paths.channels)?
        .into_iter()
        .map(|(_, l)| l.trim().to_string())
        .collect();
    if channels.is_empty() {
        return Err(format_err(&paths.channels, 0, "no channels"));
    }
    let channel_index: HashMap<&str, usize> = channels.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let mut tasks = BTreeMap::new();
    for (n, line) in read_lines(&paths.tasks)? {
        if line == "task_name,kind,classes" {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let kind = match (f.get(1).copied(), f.get(2).and_then(|k| k.parse::<usize>().ok())) {
            (Some("binary"), _) => TaskKind::Binary,
            (Some("multiclass"), Some(k)) if k >= 2 => TaskKind::Multiclass(k),
            _ => {
                return Err(format_err(
                    &paths.tasks,
                    n,
                    "expected `task_name,binary|multiclass,classes`",
                ))
            }
        };
        tasks.insert(f[0].to_string(), kind);
    }
    if let Some(t) = task {
        if !tasks.contains_key(t) {
            return Err(DataError::UnknownTask(t.to_string()));
        }
    }

    let (dim_raw, raw) = read_note_embeddings(&paths.notes_raw)?;
    let (dim_sum, summary) = read_note_embeddings(&paths.notes_summary)?;
    if dim_raw != dim_sum {
        return Err(format_err(&paths.notes_summary, 0, "raw and summary widths differ"));
    }
    // note files define the candidate id set; other files are filtered to it
    let mut events: BTreeMap<String, Vec<VitalEvent>> = BTreeMap::new();
    for (n, line) in read_lines(&paths.vitals)? {
        if line == "patient_id,hour_offset,channel_name,value" {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(format_err(&paths.vitals, n, "expected 4 fields"));
        }
        let hour: f64 = f[1]
            .trim()
            .parse()
            .map_err(|_| format_err(&paths.vitals, n, "bad hour_offset"))?;
        let value: f64 = f[3]
            .trim()
            .parse()
            .map_err(|_| format_err(&paths.vitals, n, "bad value"))?;
        let channel = *channel_index
            .get(f[2].trim())
            .ok_or_else(|| DataError::UnknownChannel(f[2].trim().to_string()))?;
        events
            .entry(f[0].trim().to_string())
            .or_default()
            .push(VitalEvent { hour, channel, value });
    }

    let mut codes: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (id, c) in read_diagnoses(&paths.diagnoses)? {
        if raw.contains_key(&id) {
            codes.insert(id, c);
        } else {
            stats.ignored_diagnosis_rows += 1;
        }
    }

    let mut labels: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (n, line) in read_lines(&paths.labels)? {
        if line == "patient_id,task_name,label" {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(format_err(&paths.labels, n, "expected 3 fields"));
        }
        let kind = *tasks
            .get(f[1])
            .ok_or_else(|| DataError::UnknownTask(f[1].to_string()))?;
        let y: usize = f[2]
            .trim()
            .parse()
            .map_err(|_| format_err(&paths.labels, n, "bad label"))?;
        if y >= kind.classes() {
            return Err(format_err(
                &paths.labels,
                n,
                format!("label {y} out of range for {}", f[1]),
            ));
        }
        if !raw.contains_key(f[0]) {
            stats.ignored_label_rows += 1;
            continue;
        }
        labels.entry(f[0].to_string()).or_default().insert(f[1].to_string(), y);
    }

    let mut splits: BTreeMap<String, Split> = BTreeMap::new();
    if paths.splits.exists() {
        for (n, line) in read_lines(&paths.splits)? {
            if line == "patient_id,split" {
                continue;
            }
            let (id, s) = line
                .split_once(',')
                .ok_or_else(|| format_err(&paths.splits, n, "expected 2 fields"))?;
            let s = Split::parse(s.trim()).ok_or_else(|| format_err(&paths.splits, n, "unknown split"))?;
            splits.insert(id.to_string(), s);
        }
    }

    let mut patients = Vec::new();
    for (id, note_raw) in raw {
        let (Some(ev), Some(c), Some(note_summary)) = (events.remove(&id), codes.remove(&id), summary.get(&id)) else {
            stats.dropped_patients += 1;
            continue;
        };
        let lab = labels.remove(&id).unwrap_or_default();
        if task.is_some_and(|t| !lab.contains_key(t)) {
            stats.dropped_patients += 1;
            continue;
        }
        let vitals = bin_events(ev, horizon, channels.len())?;
        patients.push(Patient {
            split: splits.get(&id).copied().unwrap_or(Split::Train),
            id,
            vitals,
            codes: c,
            labels: lab,
            note_raw,
            note_summary: note_summary.clone(),
        });
    }
    if stats.dropped_patients > 0 {
        log::warn!("dropped {} patients with missing artifacts", stats.dropped_patients);
    }
    if stats.ignored_diagnosis_rows + stats.ignored_label_rows > 0 {
        log::warn!(
            "ignored {} diagnosis rows and {} label rows for unknown patients",
            stats.ignored_diagnosis_rows,
            stats.ignored_label_rows
        );
    }
    if patients.is_empty() {
        return Err(DataError::EmptyCohort);
    }
    Ok((
        CohortBundle {
            channels,
            horizon,
            note_dim: dim_raw,
            tasks,
            patients,
        },
        stats,
    ))
}

pub fn load_bundle(dir: &Path, task: Option<&str>) -> Result<(CohortBundle, LoadStats), DataError> {
    load_cohort(&CohortPaths::in_dir(dir), task)
}

/// Assigns train/val/test by salted hash of patient id. With `stratify`,
/// each label stratum is split separately so class balance carries over.
pub fn split(
    bundle: &mut CohortBundle,
    fractions: [f64; 3],
    seed: u64,
    stratify: Option<&str>,
) -> Result<(), DataError> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(fractions));
    }
    let mut strata: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, p) in bundle.patients.iter().enumerate() {
        let key = stratify.and_then(|t| p.labels.get(t).copied());
        strata.entry(key).or_default().push(i);
    }
    for members in strata.values_mut() {
        members.sort_by_key(|&i| (rng::mix(seed, &[hash_str(&bundle.patients[i].id)]), i));
        let n = members.len() as f64;
        let n_train = (n * fractions[0]).round() as usize;
        let n_val = ((n * (fractions[0] + fractions[1])).round() as usize).saturating_sub(n_train);
        for (rank, &i) in members.iter().enumerate() {
            bundle.patients[i].split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_clusters: usize,
    pub tree_depth: usize,
    pub tree_branching: usize,
    pub codes_per_patient: usize,
    /// Probability that a drawn code comes from the patient's cluster subtree.
    pub in_cluster_prob: f64,
    pub vitals_signal_strength: f64,
    pub notes_signal_strength: f64,
    pub label_noise: f64,
    pub horizon_hours: usize,
    pub channels: usize,
    pub note_dim: usize,
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 500,
            n_clusters: 4,
            tree_depth: 4,
            tree_branching: 4,
            codes_per_patient: 4,
            in_cluster_prob: 0.8,
            vitals_signal_strength: 1.0,
            notes_signal_strength: 3.0,
            label_noise: 0.1,
            horizon_hours: 24,
            channels: 4,
            note_dim: 16,
            missing_rate: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::DegenerateConfig(m.to_string()));
        if self.n_patients < 2 {
            return bad("need at least two patients");
        }
        if self.n_clusters == 0 || self.codes_per_patient == 0 {
            return bad("n_clusters and codes_per_patient must be positive");
        }
        if self.tree_depth == 0 || self.tree_branching < 2 {
            return bad("tree needs depth >= 1 and branching >= 2");
        }
        if self.horizon_hours == 0 || self.channels == 0 || self.note_dim == 0 {
            return bad("horizon, channels and note_dim must be positive");
        }
        if !(self.vitals_signal_strength > 0.0 && self.notes_signal_strength > 0.0) {
            return bad("signal strengths must be positive");
        }
        if !(0.0..=1.0).contains(&self.label_noise)
            || !(0.0..1.0).contains(&self.missing_rate)
            || !(0.0..=1.0).contains(&self.in_cluster_prob)
        {
            return bad("probabilities out of range");
        }
        Ok(())
    }
}

/// Balanced tree with ids `root`, `N0`, `N0.1`, ...
pub fn balanced_tree(depth: usize, branching: usize) -> OntologyTree {
    let mut records = vec![EdgeRecord {
        child: "root".into(),
        parent: None,
        label: "root".into(),
    }];
    let mut frontier = vec!["root".to_string()];
    for level in 1..=depth {
        let mut next = Vec::new();
        for parent in &frontier {
            for b in 0..branching {
                let id = if level == 1 {
                    format!("N{b}")
                } else {
                    format!("{parent}.{b}")
                };
                records.push(EdgeRecord {
                    child: id.clone(),
                    parent: Some(parent.clone()),
                    label: format!("category {id}"),
                });
                next.push(id);
            }
        }
        frontier = next;
    }
    OntologyTree::from_records(records).expect("balanced tree is valid")
}

fn descendant_leaves(tree: &OntologyTree, leaves: &[NodeIdx], anchor: NodeIdx) -> Vec<NodeIdx> {
    leaves
        .iter()
        .copied()
        .filter(|&l| {
            let mut cur = Some(l);
            while let Some(n) = cur {
                if n == anchor {
                    return true;
                }
                cur = tree.parent(n);
            }
            false
        })
        .collect()
}

/// Latent structure behind a synthesized cohort, kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub cluster: Vec<usize>,
    pub severity: Vec<f64>,
}

/// Generates a cohort whose diagnoses, vitals and notes all derive from a
/// latent cluster per patient, with notes carrying the cleanest signal.
pub fn synthesize(
    cfg: &SynthConfig,
    tree: Option<&OntologyTree>,
) -> Result<(CohortBundle, OntologyTree, SynthTruth), DataError> {
    cfg.validate()?;
    let tree = match tree {
        Some(t) => t.clone(),
        None => balanced_tree(cfg.tree_depth, cfg.tree_branching),
    };
    let leaves = tree.leaves();
    if leaves.len() < 2 {
        return Err(DataError::DegenerateConfig("tree has fewer than two leaves".into()));
    }

    // anchors: the shallowest level with at least n_clusters internal nodes
    let mut anchors = Vec::new();
    for depth in 1..=tree.max_depth() {
        let level: Vec<NodeIdx> = tree
            .nodes()
            .filter(|&n| tree.depth(n) == depth && !descendant_leaves(&tree, &leaves, n).is_empty())
            .collect();
        if level.len() >= cfg.n_clusters {
            anchors = level;
            break;
        }
    }
    if anchors.len() < cfg.n_clusters {
        return Err(DataError::DegenerateConfig(format!(
            "tree cannot host {} disjoint cluster subtrees",
            cfg.n_clusters
        )));
    }
    let k_total = cfg.n_clusters;
    let cluster_leaves: Vec<Vec<NodeIdx>> = (0..k_total)
        .map(|k| descendant_leaves(&tree, &leaves, anchors[k * anchors.len() / k_total]))
        .collect();

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (t_len, c_len) = (cfg.horizon_hours, cfg.channels);

    struct ClusterProfile {
        base: Vec<f64>,
        amp: Vec<f64>,
        phase: Vec<f64>,
        freq: f64,
        centroid: Vec<f64>,
        risk: f64,
    }
    let profiles: Vec<ClusterProfile> = (0..k_total)
        .map(|k| {
            let mut r = rng::stream(cfg.seed, &[rng::TAG_SYNTH, 1, k as u64]);
            ClusterProfile {
                base: (0..c_len).map(|_| std_normal.sample(&mut r)).collect(),
                amp: (0..c_len).map(|_| r.random_range(0.5..1.5)).collect(),
                phase: (0..c_len).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect(),
                freq: 1.0 + (k % 3) as f64,
                centroid: (0..cfg.note_dim).map(|_| std_normal.sample(&mut r)).collect(),
                risk: if k_total > 1 {
                    k as f64 / (k_total - 1) as f64
                } else {
                    0.5
                },
            }
        })
        .collect();
    let mut r = rng::stream(cfg.seed, &[rng::TAG_SYNTH, 2]);
    let severity_dir: Vec<f64> = (0..cfg.note_dim).map(|_| std_normal.sample(&mut r)).collect();
    // physiological scale per channel so that z-scoring matters
    let offsets: Vec<f64> = (0..c_len).map(|c| 20.0 + 15.0 * c as f64).collect();
    let scales: Vec<f64> = (0..c_len).map(|c| 2.0 + c as f64).collect();

    let mut patients = Vec::with_capacity(cfg.n_patients);
    let mut truth = SynthTruth {
        cluster: Vec::with_capacity(cfg.n_patients),
        severity: Vec::with_capacity(cfg.n_patients),
    };
    let width = format!("{}", cfg.n_patients).len();
    for i in 0..cfg.n_patients {
        let mut r = rng::stream(cfg.seed, &[rng::TAG_SYNTH, 3, i as u64]);
        let k = i % k_total;
        let prof = &profiles[k];
        let severity: f64 = r.random_range(0.0..1.0);

        let mut codes = BTreeSet::new();
        for _ in 0..cfg.codes_per_patient {
            let pool = if r.random_bool(cfg.in_cluster_prob) {
                &cluster_leaves[k]
            } else {
                &leaves
            };
            codes.insert(tree.id(pool[r.random_range(0..pool.len())]).to_string());
        }

        let vitals_noise = 1.0 / cfg.vitals_signal_strength;
        let mut values = vec![0.0; t_len * c_len];
        let mut indicators = vec![0u8; t_len * c_len];
        for t in 0..t_len {
            let frac = t as f64 / t_len as f64;
            for c in 0..c_len {
                let observed = !r.random_bool(cfg.missing_rate);
                let wave = prof.amp[c] * (std::f64::consts::TAU * prof.freq * frac + prof.phase[c]).sin();
                let trend = if c < 2 {
                    2.0 * (severity - 0.5) * 2.0 * frac
                } else {
                    0.0
                };
                let noise = vitals_noise * std_normal.sample(&mut r);
                if observed {
                    values[t * c_len + c] = offsets[c] + scales[c] * (prof.base[c] + wave + trend + noise);
                    indicators[t * c_len + c] = 1;
                }
            }
        }
        let vitals = VitalsSeries::new(t_len, c_len, values, indicators)?;

        let notes_noise = 1.0 / cfg.notes_signal_strength;
        let note = |noise_scale: f64, r: &mut rng::Rng| -> Vec<f32> {
            (0..cfg.note_dim)
                .map(|d| {
                    (prof.centroid[d] + 2.0 * (severity - 0.5) * severity_dir[d] + noise_scale * std_normal.sample(r))
                        as f32
                })
                .collect()
        };
        let note_raw = note(notes_noise, &mut r);
        let note_summary = note(0.75 * notes_noise, &mut r);

        // severity dominates so the cleaner note channel carries most of the label signal
        let score = 0.7 * (prof.risk - 0.5) + (severity - 0.5);
        let mut mortality = usize::from(score > 0.0);
        if r.random_bool(cfg.label_noise) {
            mortality = 1 - mortality;
        }
        let mut los = ((0.6 * severity + 0.4 * prof.risk) * 10.0).floor().clamp(0.0, 9.0) as usize;
        if r.random_bool(cfg.label_noise) {
            los = r.random_range(0..10);
        }
        let mut labels = BTreeMap::new();
        labels.insert(TASK_MORTALITY.to_string(), mortality);
        labels.insert(TASK_LOS.to_string(), los);

        patients.push(Patient {
            id: format!("P{i:0width$}"),
            vitals,
            codes: codes.into_iter().collect(),
            labels,
            note_raw,
            note_summary,
            split: Split::Train,
        });
        truth.cluster.push(k);
        truth.severity.push(severity);
    }

    let mut tasks = BTreeMap::new();
    tasks.insert(TASK_MORTALITY.to_string(), TaskKind::Binary);
    tasks.insert(TASK_LOS.to_string(), TaskKind::Multiclass(10));
    Ok((
        CohortBundle {
            channels: (0..c_len).map(|c| format!("ch{c}")).collect(),
            horizon: t_len,
            note_dim: cfg.note_dim,
            tasks,
            patients,
        },
        tree,
        truth,
    ))
}
