//! Dataset ingestion: CIFAR binary records, score tables, and seeded splits.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
/// Pixel bytes per image: three 32×32 planes (R, G, B).
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const CIFAR10_RECORD: usize = 1 + IMAGE_BYTES;
pub const CIFAR100_RECORD: usize = 2 + IMAGE_BYTES;

/// Scores this close outside `[0, 1]` are clamped instead of rejected.
pub const SCORE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("stream length {len} is not a multiple of the {record}-byte record size")]
    Length { len: usize, record: usize },
    #[error("record {index} has label {label}, above the maximum {max}")]
    Label { index: usize, label: u8, max: u8 },
    #[error("score {score} for sample {id} is outside [0, 1]")]
    Range { id: u32, score: f64 },
    #[error("malformed score data at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("sample {id} of dataset `{dataset}` has no score")]
    Coverage { dataset: String, id: u32 },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
}

impl DataError {
    fn in_file(self, path: &Path) -> Self {
        DataError::InFile { path: path.to_path_buf(), source: Box::new(self) }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Images with labels and stable sample ids (position in the on-disk order).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub name: String,
    /// `N × 3 × 32 × 32` bytes, channel-major per image.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    /// CIFAR-100 coarse labels, kept so records serialize back unchanged.
    pub coarse_labels: Option<Vec<u8>>,
    pub ids: Vec<u32>,
    pub num_classes: u8,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// Serializes to the CIFAR-10 record layout.
    pub fn to_cifar10_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * CIFAR10_RECORD);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    /// Serializes to the CIFAR-100 record layout; missing coarse labels are written as 0.
    pub fn to_cifar100_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * CIFAR100_RECORD);
        for i in 0..self.len() {
            out.push(self.coarse_labels.as_ref().map_or(0, |c| c[i]));
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    /// Appends another set, continuing the id sequence (used for multi-batch files).
    pub fn extend(&mut self, other: LabeledImageSet) {
        let offset = self.len() as u32;
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        match (&mut self.coarse_labels, other.coarse_labels) {
            (Some(a), Some(b)) => a.extend(b),
            (a, _) => *a = None,
        }
        self.ids.extend(other.ids.into_iter().map(|id| id + offset));
    }
}

fn parse_records(
    bytes: &[u8],
    name: &str,
    record: usize,
    label_offset: usize,
    num_classes: u8,
) -> Result<LabeledImageSet, DataError> {
    if !bytes.len().is_multiple_of(record) {
        return Err(DataError::Length { len: bytes.len(), record });
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    let mut coarse = (label_offset == 1).then(|| Vec::with_capacity(n));
    for (index, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_offset];
        if label >= num_classes {
            return Err(DataError::Label { index, label, max: num_classes - 1 });
        }
        if let Some(c) = coarse.as_mut() {
            c.push(rec[0]);
        }
        labels.push(label);
        images.extend_from_slice(&rec[label_offset + 1..]);
    }
    Ok(LabeledImageSet {
        name: name.to_string(),
        images,
        labels,
        coarse_labels: coarse,
        ids: (0..n as u32).collect(),
        num_classes,
    })
}

/// Parses CIFAR-10 binary records (1 label byte + 3072 pixel bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledImageSet, DataError> {
    parse_records(bytes, "cifar10", CIFAR10_RECORD, 0, 10)
}

/// Parses CIFAR-100 binary records (coarse byte, fine byte, 3072 pixel bytes).
/// The fine label is the class label.
pub fn parse_cifar100(bytes: &[u8]) -> Result<LabeledImageSet, DataError> {
    parse_records(bytes, "cifar100", CIFAR100_RECORD, 1, 100)
}

/// Reads and concatenates CIFAR-10 batch files in the given order.
pub fn read_cifar10_files<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledImageSet, DataError> {
    let mut set: Option<LabeledImageSet> = None;
    for p in paths {
        let p = p.as_ref();
        let part = parse_cifar10(&read_file(p)?).map_err(|e| e.in_file(p))?;
        match set.as_mut() {
            Some(s) => s.extend(part),
            None => set = Some(part),
        }
    }
    Ok(set.unwrap_or_else(|| parse_cifar10(&[]).expect("empty stream parses")))
}

pub fn read_cifar100_file(path: &Path) -> Result<LabeledImageSet, DataError> {
    parse_cifar100(&read_file(path)?).map_err(|e| e.in_file(path))
}

/// Sample id → consistency score, sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
}

fn check_score(id: u32, score: f64) -> Result<f64, DataError> {
    if !score.is_finite() || !(-SCORE_TOLERANCE..=1.0 + SCORE_TOLERANCE).contains(&score) {
        return Err(DataError::Range { id, score });
    }
    Ok(score.clamp(0.0, 1.0))
}

impl ScoreTable {
    /// Builds a validated table; entries are sorted by id.
    pub fn new(ids: Vec<u32>, scores: Vec<f64>) -> Result<Self, DataError> {
        if ids.len() != scores.len() {
            return Err(DataError::Format { line: 0, msg: format!("{} ids but {} scores", ids.len(), scores.len()) });
        }
        let mut rows = Vec::with_capacity(ids.len());
        for (id, s) in ids.into_iter().zip(scores) {
            rows.push((id, check_score(id, s)?));
        }
        rows.sort_by_key(|r| r.0);
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(DataError::Format { line: 0, msg: format!("duplicate id {}", w[0].0) });
        }
        Ok(Self { ids: rows.iter().map(|r| r.0).collect(), scores: rows.iter().map(|r| r.1).collect() })
    }

    /// Scores in on-disk sample order (ids `0..n`).
    pub fn from_ordered(scores: Vec<f64>) -> Result<Self, DataError> {
        let ids = (0..scores.len() as u32).collect();
        Self::new(ids, scores)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<f64> {
        self.ids.binary_search(&id).ok().map(|i| self.scores[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,score\n");
        for (id, s) in self.ids.iter().zip(&self.scores) {
            // `{}` on f64 prints the shortest representation that round-trips.
            writeln!(out, "{id},{s}").expect("writing to a String");
        }
        out
    }

    pub fn to_raw_f32(&self) -> Vec<u8> {
        self.scores.iter().flat_map(|&s| (s as f32).to_le_bytes()).collect()
    }
}

/// Parses the `index,score` CSV form.
pub fn parse_scores_csv(text: &str) -> Result<ScoreTable, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim().eq_ignore_ascii_case("index,score") => {}
        _ => return Err(DataError::Format { line: 1, msg: "expected header `index,score`".into() }),
    }
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| DataError::Format { line: line_no, msg };
        let (id, score) = line.split_once(',').ok_or_else(|| bad(format!("expected two fields in `{line}`")))?;
        let id: u32 = id.trim().parse().map_err(|e| bad(format!("bad index `{id}`: {e}")))?;
        let score: f64 = score.trim().parse().map_err(|e| bad(format!("bad score `{score}`: {e}")))?;
        ids.push(id);
        scores.push(score);
    }
    ScoreTable::new(ids, scores)
}

/// Parses a raw little-endian f32 array in on-disk sample order.
pub fn parse_scores_raw(bytes: &[u8]) -> Result<ScoreTable, DataError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(DataError::Format {
            line: 0,
            msg: format!("raw score blob of {} bytes is not a multiple of 4", bytes.len()),
        });
    }
    let scores = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    ScoreTable::from_ordered(scores)
}

/// Loads a score file, detecting the CSV form by its header and treating
/// anything else as a raw f32 blob.
pub fn load_scores(path: &Path) -> Result<ScoreTable, DataError> {
    let bytes = read_file(path)?;
    let parsed = if bytes.starts_with(b"index") {
        match std::str::from_utf8(&bytes) {
            Ok(text) => parse_scores_csv(text),
            Err(e) => Err(DataError::Format { line: 0, msg: format!("not valid UTF-8: {e}") }),
        }
    } else {
        parse_scores_raw(&bytes)
    };
    parsed.map_err(|e| e.in_file(path))
}

pub fn write_scores_csv(table: &ScoreTable, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, table.to_csv()).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Environment variable naming the default data root.
pub const DATA_DIR_ENV: &str = "CSCORE_DATA_DIR";

/// Standard file locations under a data root:
///
/// ```text
/// <root>/cifar-100-binary/train.bin
/// <root>/cifar-10-batches-bin/data_batch_{1..5}.bin
/// <root>/scores/cifar100.{csv,bin}
/// <root>/scores/cifar10.{csv,bin}
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataRoot(pub PathBuf);

impl DataRoot {
    pub fn from_env() -> Option<Self> {
        std::env::var_os(DATA_DIR_ENV).map(|p| DataRoot(PathBuf::from(p)))
    }

    pub fn cifar100_train(&self) -> PathBuf {
        self.0.join("cifar-100-binary").join("train.bin")
    }

    pub fn cifar10_train(&self) -> Vec<PathBuf> {
        (1..=5).map(|i| self.0.join("cifar-10-batches-bin").join(format!("data_batch_{i}.bin"))).collect()
    }

    /// First existing score file for `dataset` (`cifar100` or `cifar10`), CSV preferred.
    pub fn scores(&self, dataset: &str) -> Option<PathBuf> {
        ["csv", "bin"].iter().map(|ext| self.0.join("scores").join(format!("{dataset}.{ext}"))).find(|p| p.is_file())
    }

    pub fn load_cifar100(&self) -> Result<LabeledImageSet, DataError> {
        read_cifar100_file(&self.cifar100_train())
    }

    pub fn load_cifar10(&self) -> Result<LabeledImageSet, DataError> {
        read_cifar10_files(&self.cifar10_train())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { seed: 0, train_fraction: 0.8 }
    }
}

/// Images joined with their scores; sample order is the order of `ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSubset {
    pub name: String,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
}

impl ScoredSubset {
    /// Joins every sample of `set` with its score, keeping on-disk order.
    pub fn join(set: &LabeledImageSet, scores: &ScoreTable) -> Result<Self, DataError> {
        let order: Vec<usize> = (0..set.len()).collect();
        Self::gather(set, scores, &order, set.name.clone())
    }

    fn gather(
        set: &LabeledImageSet,
        scores: &ScoreTable,
        positions: &[usize],
        name: String,
    ) -> Result<Self, DataError> {
        let mut out = Self {
            name,
            images: Vec::with_capacity(positions.len() * IMAGE_BYTES),
            labels: Vec::with_capacity(positions.len()),
            ids: Vec::with_capacity(positions.len()),
            scores: Vec::with_capacity(positions.len()),
        };
        for &p in positions {
            let id = set.ids[p];
            let score = scores.get(id).ok_or_else(|| DataError::Coverage { dataset: set.name.clone(), id })?;
            out.images.extend_from_slice(set.image(p));
            out.labels.push(set.labels[p]);
            out.ids.push(id);
            out.scores.push(score);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// The first `n` samples (or all of them), under a new name.
    pub fn head(&self, n: usize, name: &str) -> Self {
        let n = n.min(self.len());
        Self {
            name: name.to_string(),
            images: self.images[..n * IMAGE_BYTES].to_vec(),
            labels: self.labels[..n].to_vec(),
            ids: self.ids[..n].to_vec(),
            scores: self.scores[..n].to_vec(),
        }
    }

    /// Samples at `positions`, in that order.
    pub fn select(&self, positions: &[usize]) -> Self {
        let mut images = Vec::with_capacity(positions.len() * IMAGE_BYTES);
        for &p in positions {
            images.extend_from_slice(self.image(p));
        }
        Self {
            name: self.name.clone(),
            images,
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
            scores: positions.iter().map(|&p| self.scores[p]).collect(),
        }
    }
}

/// Number of training samples for a set of `n`: `round(train_fraction · n)`.
pub fn train_size(n: usize, train_fraction: f64) -> usize {
    ((train_fraction * n as f64).round() as usize).min(n)
}

/// Uniform (unstratified) seeded split. The sample order inside each subset is the
/// shuffled order: a SplitMix64 Fisher–Yates permutation of `0..n` seeded with
/// `spec.seed`, whose first `train_size` entries form the training subset.
pub fn split(
    set: &LabeledImageSet,
    scores: &ScoreTable,
    spec: &SplitSpec,
) -> Result<(ScoredSubset, ScoredSubset), DataError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "train_fraction {} must lie strictly between 0 and 1",
            spec.train_fraction
        )));
    }
    let seen: HashSet<u32> = set.ids.iter().copied().collect();
    if seen.len() != set.len() {
        return Err(DataError::Split("sample ids are not unique".into()));
    }
    if let Some(&id) = set.ids.iter().find(|&&id| scores.get(id).is_none()) {
        return Err(DataError::Coverage { dataset: set.name.clone(), id });
    }
    let perm = SplitMix64::new(spec.seed).permutation(set.len());
    let n_train = train_size(set.len(), spec.train_fraction);
    let train = ScoredSubset::gather(set, scores, &perm[..n_train], format!("{}-train", set.name))?;
    let test = ScoredSubset::gather(set, scores, &perm[n_train..], format!("{}-test", set.name))?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record10(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR10_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn zero_record() {
        let set = parse_cifar10(&[0u8; CIFAR10_RECORD]).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.labels, vec![0]);
        assert!(set.images.iter().all(|&b| b == 0));
        assert_eq!(set.ids, vec![0]);
    }

    #[test]
    fn two_records() {
        let mut bytes = record10(9, 1);
        bytes.extend(record10(3, 2));
        let set = parse_cifar10(&bytes).unwrap();
        assert_eq!(set.labels, vec![9, 3]);
        assert_eq!(set.image(1)[0], 2);
    }

    #[test]
    fn channel_major_planes() {
        let mut rec = vec![0u8; CIFAR10_RECORD];
        rec[1..1025].fill(10);
        rec[1025..2049].fill(20);
        rec[2049..].fill(30);
        let set = parse_cifar10(&rec).unwrap();
        assert_eq!(set.image(0)[0], 10);
        assert_eq!(set.image(0)[1024], 20);
        assert_eq!(set.image(0)[2048], 30);
    }

    #[test]
    fn cifar10_errors() {
        assert!(matches!(parse_cifar10(&[0u8; 3072]), Err(DataError::Length { len: 3072, record: 3073 })));
        assert!(matches!(parse_cifar10(&record10(10, 0)), Err(DataError::Label { label: 10, .. })));
    }

    #[test]
    fn cifar100_fine_label() {
        let mut rec = vec![0u8; CIFAR100_RECORD];
        rec[0] = 4;
        rec[1] = 87;
        let set = parse_cifar100(&rec).unwrap();
        assert_eq!(set.labels, vec![87]);
        assert_eq!(set.coarse_labels, Some(vec![4]));
        assert_eq!(set.to_cifar100_bytes(), rec);
    }

    #[test]
    fn cifar100_empty_and_errors() {
        let set = parse_cifar100(&[]).unwrap();
        assert!(set.is_empty());
        assert!(matches!(parse_cifar100(&[0u8; 3073]), Err(DataError::Length { .. })));
        let mut rec = vec![0u8; CIFAR100_RECORD];
        rec[1] = 100;
        assert!(matches!(parse_cifar100(&rec), Err(DataError::Label { label: 100, .. })));
    }

    #[test]
    fn csv_scores() {
        let t = parse_scores_csv("index,score\n0,0.5\n1,1.0").unwrap();
        assert_eq!(t.ids, vec![0, 1]);
        assert_eq!(t.scores, vec![0.5, 1.0]);
    }

    #[test]
    fn csv_sorted_by_id() {
        let t = parse_scores_csv("index,score\n2,0.1\n0,0.2\n1,0.3\n").unwrap();
        assert_eq!(t.ids, vec![0, 1, 2]);
        assert_eq!(t.scores, vec![0.2, 0.3, 0.1]);
    }

    #[test]
    fn raw_zero_scores() {
        let t = parse_scores_raw(&[0u8; 4 * 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn score_clamping_and_range() {
        let t = ScoreTable::from_ordered(vec![1.0 + 5e-7, -5e-7]).unwrap();
        assert_eq!(t.scores, vec![1.0, 0.0]);
        assert!(matches!(ScoreTable::from_ordered(vec![1.01]), Err(DataError::Range { id: 0, .. })));
        assert!(matches!(parse_scores_csv("index,score\n0,-0.5"), Err(DataError::Range { .. })));
        assert!(ScoreTable::from_ordered(vec![f64::NAN]).is_err());
    }

    #[test]
    fn malformed_rows() {
        for bad in ["index,score\n0;0.5", "index,score\nx,0.5", "index,score\n0,abc", "id,s\n0,0.5"] {
            assert!(matches!(parse_scores_csv(bad), Err(DataError::Format { .. })), "{bad}");
        }
        assert!(matches!(parse_scores_csv("index,score\n0,0.5\n0,0.6"), Err(DataError::Format { .. })));
        assert!(matches!(parse_scores_raw(&[0u8; 5]), Err(DataError::Format { .. })));
    }

    fn synthetic_set(n: usize) -> (LabeledImageSet, ScoreTable) {
        let mut bytes = Vec::new();
        for i in 0..n {
            bytes.extend(record10((i % 10) as u8, i as u8));
        }
        let set = parse_cifar10(&bytes).unwrap();
        let scores = ScoreTable::from_ordered((0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        (set, scores)
    }

    #[test]
    fn split_sizes_and_partition() {
        let (set, scores) = synthetic_set(10);
        let (train, test) = split(&set, &scores, &SplitSpec { seed: 3, train_fraction: 0.8 }).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let mut all: Vec<u32> = train.ids.iter().chain(&test.ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for (i, &id) in train.ids.iter().enumerate() {
            assert_eq!(train.scores[i], scores.get(id).unwrap());
            assert_eq!(train.image(i), set.image(id as usize));
            assert_eq!(train.labels[i], set.labels[id as usize]);
        }
    }

    #[test]
    fn cifar_scale_sizes() {
        assert_eq!(train_size(50_000, 0.8), 40_000);
        assert_eq!(50_000 - train_size(50_000, 0.8), 10_000);
    }

    #[test]
    fn split_coverage_error() {
        let (set, _) = synthetic_set(4);
        let partial = ScoreTable::from_ordered(vec![0.1, 0.2, 0.3]).unwrap();
        assert!(matches!(split(&set, &partial, &SplitSpec::default()), Err(DataError::Coverage { id: 3, .. })));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let (set, scores) = synthetic_set(4);
        for f in [0.0, 1.0, 1.5] {
            let spec = SplitSpec { seed: 0, train_fraction: f };
            assert!(matches!(split(&set, &scores, &spec), Err(DataError::Split(_))));
        }
    }

    #[test]
    fn split_is_deterministic() {
        let (set, scores) = synthetic_set(50);
        let spec = SplitSpec { seed: 42, train_fraction: 0.8 };
        assert_eq!(split(&set, &scores, &spec).unwrap(), split(&set, &scores, &spec).unwrap());
        let other = split(&set, &scores, &SplitSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(split(&set, &scores, &spec).unwrap().0.ids, other.0.ids);
    }

    #[test]
    fn multi_file_ids_continue() {
        let mut a = parse_cifar10(&record10(1, 0)).unwrap();
        let b = parse_cifar10(&[record10(2, 0), record10(3, 0)].concat()).unwrap();
        a.extend(b);
        assert_eq!(a.ids, vec![0, 1, 2]);
        assert_eq!(a.labels, vec![1, 2, 3]);
    }

    proptest! {
        #[test]
        fn record_stream_round_trip(labels in proptest::collection::vec(0u8..10, 0..6), fill in any::<u8>()) {
            let bytes: Vec<u8> = labels.iter().flat_map(|&l| record10(l, fill)).collect();
            prop_assert_eq!(parse_cifar10(&bytes).unwrap().to_cifar10_bytes(), bytes);
        }

        #[test]
        fn csv_round_trip(scores in proptest::collection::vec(0.0f64..=1.0, 0..40)) {
            let table = ScoreTable::from_ordered(scores).unwrap();
            prop_assert_eq!(parse_scores_csv(&table.to_csv()).unwrap(), table);
        }

        #[test]
        fn split_partitions(n in 1usize..60, seed in any::<u64>(), frac in 0.05f64..0.95) {
            let (set, scores) = synthetic_set(n);
            let (train, test) = split(&set, &scores, &SplitSpec { seed, train_fraction: frac }).unwrap();
            prop_assert_eq!(train.len(), train_size(n, frac));
            let a: HashSet<u32> = train.ids.iter().copied().collect();
            let b: HashSet<u32> = test.ids.iter().copied().collect();
            prop_assert!(a.is_disjoint(&b));
            prop_assert_eq!(a.len() + b.len(), n);
        }
    }
}
