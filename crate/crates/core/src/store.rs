//! Activation storage: the on-disk shard format, dataset manifests, label
//! sidecars and shuffled mini-batch streaming.
//!
//! A shard is a flat little-endian file:
//!
//! ```text
//! magic "SPDICT01" | version u32 | dtype u32 | d u64 | count u64 | count*d f32
//! ```
//!
//! A dataset is a manifest (TOML) listing shards in global row order, plus an
//! optional label sidecar of `count` little-endian `u16` class ids.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 8] = b"SPDICT01";
pub const SHARD_VERSION: u32 = 1;
pub const SHARD_HEADER_LEN: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u32,
    pub dtype: DType,
    pub dim: u64,
    pub count: u64,
}

impl ShardHeader {
    pub fn payload_len(&self) -> u64 {
        self.count * self.dim * 4
    }

    fn to_bytes(self) -> [u8; SHARD_HEADER_LEN as usize] {
        let mut out = [0u8; SHARD_HEADER_LEN as usize];
        out[..8].copy_from_slice(SHARD_MAGIC);
        out[8..12].copy_from_slice(&self.version.to_le_bytes());
        out[12..16].copy_from_slice(&(self.dtype as u32).to_le_bytes());
        out[16..24].copy_from_slice(&self.dim.to_le_bytes());
        out[24..32].copy_from_slice(&self.count.to_le_bytes());
        out
    }

    fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let invalid = |reason: &str| Error::InvalidShard {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < SHARD_HEADER_LEN as usize {
            return Err(invalid("truncated header"));
        }
        if &bytes[..8] != SHARD_MAGIC {
            return Err(invalid("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != SHARD_VERSION {
            return Err(invalid(&format!("unsupported version {version}")));
        }
        let dtype = match u32::from_le_bytes(bytes[12..16].try_into().unwrap()) {
            0 => DType::F32,
            other => return Err(invalid(&format!("unknown dtype tag {other}"))),
        };
        let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
        if dim == 0 || count == 0 {
            return Err(invalid("zero dim or count"));
        }
        Ok(ShardHeader {
            version,
            dtype,
            dim,
            count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSummary {
    pub count: u64,
    /// SHA-256 of the complete file bytes, hex encoded.
    pub checksum: String,
}

pub fn write_shard(rows: ArrayView2<'_, f32>, dim: usize, path: &Path) -> Result<ShardSummary> {
    if rows.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if rows.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: rows.ncols(),
        });
    }
    for (i, row) in rows.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i });
        }
    }
    let header = ShardHeader {
        version: SHARD_VERSION,
        dtype: DType::F32,
        dim: dim as u64,
        count: rows.nrows() as u64,
    };
    let mut bytes = Vec::with_capacity((SHARD_HEADER_LEN + header.payload_len()) as usize);
    bytes.extend_from_slice(&header.to_bytes());
    for v in rows.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = hex_digest(&bytes);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(ShardSummary {
        count: header.count,
        checksum,
    })
}

pub fn read_shard_header(path: &Path) -> Result<ShardHeader> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::ShardNotFound(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut buf = [0u8; SHARD_HEADER_LEN as usize];
    BufReader::new(file)
        .read_exact(&mut buf)
        .map_err(|_| Error::InvalidShard {
            path: path.to_path_buf(),
            reason: "truncated header".into(),
        })?;
    let header = ShardHeader::parse(&buf, path)?;
    if len != SHARD_HEADER_LEN + header.payload_len() {
        return Err(Error::InvalidShard {
            path: path.to_path_buf(),
            reason: format!(
                "file length {len} does not match header ({} expected)",
                SHARD_HEADER_LEN + header.payload_len()
            ),
        });
    }
    Ok(header)
}

pub fn read_shard(path: &Path) -> Result<(ShardHeader, Array2<f32>)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::ShardNotFound(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let header = ShardHeader::parse(&bytes, path)?;
    let payload = &bytes[SHARD_HEADER_LEN as usize..];
    if payload.len() as u64 != header.payload_len() {
        return Err(Error::InvalidShard {
            path: path.to_path_buf(),
            reason: format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                header.payload_len()
            ),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let matrix = Array2::from_shape_vec((header.count as usize, header.dim as usize), values)
        .expect("shape checked against payload length");
    Ok((header, matrix))
}

pub fn write_labels(path: &Path, labels: &[u16]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for l in labels {
        w.write_all(&l.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<u16>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 2 != 0 {
        return Err(Error::InvalidManifest {
            path: path.to_path_buf(),
            reason: "label sidecar has odd byte length".into(),
        });
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

/// Lowercase hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub model_id: String,
    pub layer: i64,
    pub patch_grid: [u32; 2],
    #[serde(default)]
    pub image_ids: Vec<String>,
    pub shards: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<u32>,
}

impl DatasetManifest {
    pub fn synthetic() -> Self {
        DatasetManifest {
            model_id: "synthetic".into(),
            layer: 0,
            patch_grid: [16, 16],
            image_ids: Vec::new(),
            shards: Vec::new(),
            labels: None,
            num_classes: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidManifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}

/// Digest of a dataset: its manifest followed by every shard and the label
/// sidecar, in manifest order.
pub fn dataset_digest(manifest_path: &Path) -> Result<String> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut hasher = Sha256::new();
    hasher.update(fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?);
    for name in manifest.shards.iter().chain(manifest.labels.iter()) {
        let path = root.join(name);
        hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// A mini-batch of activations, widened to `f64` for optimization.
#[derive(Debug, Clone)]
pub struct ActivationBatch {
    pub x: Array2<f64>,
    pub row_ids: Vec<u64>,
    pub labels: Option<Vec<u16>>,
}

impl ActivationBatch {
    pub fn from_matrix(x: Array2<f64>) -> Self {
        let row_ids = (0..x.nrows() as u64).collect();
        ActivationBatch {
            x,
            row_ids,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone)]
struct ShardEntry {
    path: PathBuf,
    start: u64,
    count: u64,
}

#[derive(Debug)]
struct ShardCache {
    capacity: usize,
    resident: VecDeque<(usize, Arc<Array2<f32>>)>,
}

impl ShardCache {
    fn get(&mut self, index: usize, entry: &ShardEntry) -> Result<Arc<Array2<f32>>> {
        if let Some(pos) = self.resident.iter().position(|(i, _)| *i == index) {
            let hit = self.resident.remove(pos).unwrap();
            let data = hit.1.clone();
            self.resident.push_back(hit);
            return Ok(data);
        }
        let (_, matrix) = read_shard(&entry.path)?;
        let data = Arc::new(matrix);
        if self.resident.len() >= self.capacity {
            self.resident.pop_front();
        }
        self.resident.push_back((index, data.clone()));
        Ok(data)
    }
}

#[derive(Debug)]
enum Source {
    Memory(Array2<f32>),
    Shards {
        entries: Vec<ShardEntry>,
        cache: Mutex<ShardCache>,
    },
}

#[derive(Debug)]
struct DatasetInner {
    dim: usize,
    count: u64,
    labels: Option<Vec<u16>>,
    num_classes: Option<u32>,
    manifest: DatasetManifest,
    root: Option<PathBuf>,
    source: Source,
}

/// Handle to an activation dataset, either in memory or backed by shards.
/// Cloning is cheap and clones share the shard cache.
#[derive(Debug, Clone)]
pub struct Dataset {
    inner: Arc<DatasetInner>,
}

pub const DEFAULT_RESIDENT_SHARDS: usize = 16;

impl Dataset {
    pub fn from_matrix(rows: Array2<f32>, labels: Option<Vec<u16>>, num_classes: Option<u32>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::EmptyDataset);
        }
        for (i, row) in rows.outer_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: i });
            }
        }
        check_labels(labels.as_deref(), rows.nrows() as u64, num_classes, Path::new("<memory>"))?;
        let mut manifest = DatasetManifest::synthetic();
        manifest.num_classes = num_classes;
        Ok(Dataset {
            inner: Arc::new(DatasetInner {
                dim: rows.ncols(),
                count: rows.nrows() as u64,
                labels,
                num_classes,
                manifest,
                root: None,
                source: Source::Memory(rows),
            }),
        })
    }

    pub fn open(manifest_path: &Path) -> Result<Self> {
        Self::open_with_cache(manifest_path, DEFAULT_RESIDENT_SHARDS)
    }

    pub fn open_with_cache(manifest_path: &Path, resident_shards: usize) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        if manifest.shards.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut entries = Vec::with_capacity(manifest.shards.len());
        let mut dim = None;
        let mut total = 0u64;
        for name in &manifest.shards {
            let path = root.join(name);
            let header = read_shard_header(&path)?;
            match dim {
                None => dim = Some(header.dim as usize),
                Some(d) if d as u64 != header.dim => {
                    return Err(Error::InvalidShard {
                        path,
                        reason: format!("dim {} differs from first shard ({d})", header.dim),
                    })
                }
                _ => {}
            }
            entries.push(ShardEntry {
                path,
                start: total,
                count: header.count,
            });
            total += header.count;
        }
        let labels = match &manifest.labels {
            Some(name) => {
                let labels = read_labels(&root.join(name))?;
                check_labels(Some(&labels), total, manifest.num_classes, manifest_path)?;
                Some(labels)
            }
            None => None,
        };
        Ok(Dataset {
            inner: Arc::new(DatasetInner {
                dim: dim.unwrap(),
                count: total,
                labels,
                num_classes: manifest.num_classes,
                manifest,
                root: Some(root),
                source: Source::Shards {
                    entries,
                    cache: Mutex::new(ShardCache {
                        capacity: resident_shards.max(1),
                        resident: VecDeque::new(),
                    }),
                },
            }),
        })
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    pub fn count(&self) -> u64 {
        self.inner.count
    }

    pub fn has_labels(&self) -> bool {
        self.inner.labels.is_some()
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.inner.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<u32> {
        self.inner.num_classes
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.inner.manifest
    }

    /// Directory the manifest was loaded from, if shard-backed.
    pub fn root(&self) -> Option<&Path> {
        self.inner.root.as_deref()
    }

    /// Gathers the given global rows, in the given order.
    pub fn gather(&self, ids: &[u64]) -> Result<ActivationBatch> {
        let d = self.inner.dim;
        let mut x = Array2::<f64>::zeros((ids.len(), d));
        match &self.inner.source {
            Source::Memory(rows) => {
                for (out, &id) in x.outer_iter_mut().zip(ids) {
                    let src = rows.row(id as usize);
                    for (o, s) in out.into_iter().zip(src.iter()) {
                        *o = *s as f64;
                    }
                }
            }
            Source::Shards { entries, cache } => {
                // Visit shards in order so each one is loaded at most once per batch.
                let mut order: Vec<usize> = (0..ids.len()).collect();
                order.sort_by_key(|&i| ids[i]);
                let mut cache = cache.lock().expect("shard cache poisoned");
                let mut current: Option<(usize, Arc<Array2<f32>>)> = None;
                for i in order {
                    let id = ids[i];
                    let shard = entries.partition_point(|e| e.start + e.count <= id);
                    if current.as_ref().map(|(s, _)| *s) != Some(shard) {
                        current = Some((shard, cache.get(shard, &entries[shard])?));
                    }
                    let data = &current.as_ref().unwrap().1;
                    let local = (id - entries[shard].start) as usize;
                    for (o, s) in x.row_mut(i).iter_mut().zip(data.row(local).iter()) {
                        *o = *s as f64;
                    }
                }
            }
        }
        let labels = self
            .inner
            .labels
            .as_ref()
            .map(|l| ids.iter().map(|&id| l[id as usize]).collect());
        Ok(ActivationBatch {
            x,
            row_ids: ids.to_vec(),
            labels,
        })
    }

    /// All rows in global order.
    pub fn to_batch(&self) -> Result<ActivationBatch> {
        let ids: Vec<u64> = (0..self.count()).collect();
        self.gather(&ids)
    }

    /// Writes this dataset as shards of at most `rows_per_shard` rows plus a
    /// manifest (and label sidecar when labelled). Returns the manifest path.
    pub fn write(&self, dir: &Path, rows_per_shard: usize, manifest: &DatasetManifest) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rows_per_shard = rows_per_shard.max(1) as u64;
        let mut manifest = manifest.clone();
        manifest.shards.clear();
        let mut start = 0u64;
        let mut index = 0;
        while start < self.count() {
            let end = (start + rows_per_shard).min(self.count());
            let ids: Vec<u64> = (start..end).collect();
            let batch = self.gather(&ids)?;
            let rows = batch.x.mapv(|v| v as f32);
            let name = format!("shard-{index:05}.bin");
            write_shard(rows.view(), self.dim(), &dir.join(&name))?;
            manifest.shards.push(name);
            start = end;
            index += 1;
        }
        if let Some(labels) = self.labels() {
            let name = "labels.u16".to_string();
            write_labels(&dir.join(&name), labels)?;
            manifest.labels = Some(name);
            manifest.num_classes = self.num_classes();
        } else {
            manifest.labels = None;
        }
        let path = dir.join("manifest.toml");
        manifest.save(&path)?;
        Ok(path)
    }
}

fn check_labels(labels: Option<&[u16]>, count: u64, num_classes: Option<u32>, path: &Path) -> Result<()> {
    let Some(labels) = labels else { return Ok(()) };
    if labels.len() as u64 != count {
        return Err(Error::LabelMismatch {
            expected: count as usize,
            actual: labels.len(),
        });
    }
    let Some(classes) = num_classes else {
        return Err(Error::InvalidManifest {
            path: path.to_path_buf(),
            reason: "labels present without a class count".into(),
        });
    };
    if let Some((row, l)) = labels.iter().enumerate().find(|(_, &l)| l as u32 >= classes) {
        return Err(Error::InvalidManifest {
            path: path.to_path_buf(),
            reason: format!("label {l} at row {row} is not below class count {classes}"),
        });
    }
    Ok(())
}

/// Deterministic permutation of `0..count` for one epoch.
pub fn epoch_permutation(count: u64, seed: u64, epoch: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut ids: Vec<u64> = (0..count).collect();
    ids.shuffle(&mut rng);
    ids
}

/// One shuffled pass over a dataset. The final batch may be short.
pub struct EpochBatches {
    dataset: Dataset,
    order: Vec<u64>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for EpochBatches {
    type Item = Result<ActivationBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let ids = &self.order[self.pos..end];
        self.pos = end;
        Some(self.dataset.gather(ids))
    }
}

pub fn stream_epoch(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<EpochBatches> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    Ok(EpochBatches {
        dataset: dataset.clone(),
        order: epoch_permutation(dataset.count(), seed, epoch),
        batch_size,
        pos: 0,
    })
}

/// The first epoch of [`stream_epoch`].
pub fn stream_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<EpochBatches> {
    stream_epoch(dataset, batch_size, seed, 0)
}

/// Fixed-size batches drawn from back-to-back epochs, reshuffled per epoch,
/// until `total` rows have been emitted. Batches may straddle an epoch boundary.
pub struct CyclingBatches {
    dataset: Dataset,
    seed: u64,
    batch_size: usize,
    remaining: u64,
    epoch: u64,
    order: Vec<u64>,
    pos: usize,
}

impl CyclingBatches {
    pub fn new(dataset: &Dataset, batch_size: usize, total: u64, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(CyclingBatches {
            dataset: dataset.clone(),
            seed,
            batch_size,
            remaining: total,
            epoch: 0,
            order: epoch_permutation(dataset.count(), seed, 0),
            pos: 0,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn next_ids(&mut self) -> Option<Vec<u64>> {
        if self.remaining == 0 {
            return None;
        }
        let want = (self.batch_size as u64).min(self.remaining) as usize;
        let mut ids = Vec::with_capacity(want);
        while ids.len() < want {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.order = epoch_permutation(self.dataset.count(), self.seed, self.epoch);
                self.pos = 0;
            }
            let take = (want - ids.len()).min(self.order.len() - self.pos);
            ids.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        self.remaining -= want as u64;
        Some(ids)
    }
}

impl Iterator for CyclingBatches {
    type Item = Result<ActivationBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let ids = self.next_ids()?;
        Some(self.dataset.gather(&ids))
    }
}

/// Magnitude of the nonzero entries of a planted code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodeMagnitude {
    Fixed(f64),
    Uniform { low: f64, high: f64 },
}

impl CodeMagnitude {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            CodeMagnitude::Fixed(v) => v,
            CodeMagnitude::Uniform { low, high } => rng.random_range(low..high),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub sparsity: usize,
    pub count: usize,
    pub noise: f64,
    pub seed: u64,
    pub magnitude: CodeMagnitude,
}

impl SyntheticSpec {
    pub fn new(sparsity: usize, count: usize, noise: f64, seed: u64) -> Self {
        SyntheticSpec {
            sparsity,
            count,
            noise,
            seed,
            magnitude: CodeMagnitude::Uniform { low: 0.5, high: 1.5 },
        }
    }
}

/// Ground-truth sparse codes: `sparsity` (atom, value) pairs per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCodes {
    pub sparsity: usize,
    pub atoms: Vec<u32>,
    pub values: Vec<f64>,
}

impl PlantedCodes {
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let s = self.sparsity;
        self.atoms[i * s..(i + 1) * s]
            .iter()
            .zip(&self.values[i * s..(i + 1) * s])
            .map(|(&a, &v)| (a as usize, v))
    }

    pub fn rows(&self) -> usize {
        self.atoms.len().checked_div(self.sparsity).unwrap_or(0)
    }
}

/// Random dictionary with unit-norm Gaussian columns (`d x n`).
pub fn random_unit_dictionary(d: usize, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::<f64>::new(0.0, 1.0).unwrap();
    let mut dict: Array2<f64> = Array2::from_shape_fn((d, n), |_| normal.sample(&mut rng));
    for mut col in dict.columns_mut() {
        let norm = col.dot(&col).sqrt();
        col /= norm;
    }
    dict
}

fn check_dictionary(dict: ArrayView2<'_, f64>) -> Result<()> {
    for (j, col) in dict.axis_iter(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::NotUnitNorm { column: j, norm });
        }
    }
    Ok(())
}

fn synthesize(
    dict: ArrayView2<'_, f64>,
    spec: &SyntheticSpec,
    mut pick: impl FnMut(&mut ChaCha8Rng, &mut Vec<u32>) -> Option<u16>,
) -> Result<(Array2<f32>, PlantedCodes, Vec<u16>)> {
    let (d, n_true) = dict.dim();
    if spec.count == 0 {
        return Err(Error::EmptyDataset);
    }
    if spec.sparsity == 0 || spec.sparsity > n_true {
        return Err(Error::InvalidArgument(format!(
            "sparsity {} must lie in [1, {n_true}]",
            spec.sparsity
        )));
    }
    if spec.noise.is_nan() || spec.noise < 0.0 {
        return Err(Error::InvalidArgument("noise must be >= 0".into()));
    }
    check_dictionary(dict)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::<f64>::new(0.0, 1.0).unwrap();
    let mut rows = Array2::<f32>::zeros((spec.count, d));
    let mut atoms = Vec::with_capacity(spec.count * spec.sparsity);
    let mut values = Vec::with_capacity(spec.count * spec.sparsity);
    let mut labels = Vec::new();
    let mut support = Vec::with_capacity(spec.sparsity);
    let mut x = vec![0.0f64; d];
    for i in 0..spec.count {
        support.clear();
        if let Some(label) = pick(&mut rng, &mut support) {
            labels.push(label);
        }
        x.iter_mut().for_each(|v| *v = 0.0);
        for &a in &support {
            let value = spec.magnitude.sample(&mut rng);
            for (xv, dv) in x.iter_mut().zip(dict.column(a as usize)) {
                *xv += value * dv;
            }
            atoms.push(a);
            values.push(value);
        }
        for (out, xv) in rows.row_mut(i).iter_mut().zip(&x) {
            let noise = if spec.noise > 0.0 {
                spec.noise * normal.sample(&mut rng)
            } else {
                0.0
            };
            *out = (xv + noise) as f32;
        }
    }
    Ok((
        rows,
        PlantedCodes {
            sparsity: spec.sparsity,
            atoms,
            values,
        },
        labels,
    ))
}

/// Rows `x = D * code + N(0, noise^2)` with exactly `sparsity` active atoms
/// per row, drawn uniformly without replacement.
pub fn make_synthetic(dict: ArrayView2<'_, f64>, spec: &SyntheticSpec) -> Result<(Dataset, PlantedCodes)> {
    let n_true = dict.ncols();
    let s = spec.sparsity.min(n_true);
    let (rows, codes, _) = synthesize(dict, spec, |rng, support| {
        support.extend(rand::seq::index::sample(rng, n_true, s).iter().map(|a| a as u32));
        None
    })?;
    Ok((Dataset::from_matrix(rows, None, None)?, codes))
}

/// Labelled variant: atoms `0..classes` are concept atoms. Each row carries
/// exactly one concept atom (its label) plus `sparsity - 1` background atoms
/// drawn from `classes..n_true`.
pub fn make_labeled_synthetic(
    dict: ArrayView2<'_, f64>,
    classes: usize,
    spec: &SyntheticSpec,
) -> Result<(Dataset, PlantedCodes)> {
    let n_true = dict.ncols();
    if classes == 0 || classes > u16::MAX as usize {
        return Err(Error::InvalidArgument("class count must lie in [1, 65535]".into()));
    }
    if spec.sparsity == 0 || classes + spec.sparsity - 1 > n_true {
        return Err(Error::InvalidArgument(format!(
            "need at least {} atoms for {classes} concept atoms and sparsity {}",
            classes + spec.sparsity.saturating_sub(1),
            spec.sparsity
        )));
    }
    let background = n_true - classes;
    let extra = spec.sparsity - 1;
    let (rows, codes, labels) = synthesize(dict, spec, |rng, support| {
        let label = rng.random_range(0..classes);
        support.push(label as u32);
        support.extend(
            rand::seq::index::sample(rng, background, extra)
                .iter()
                .map(|a| (classes + a) as u32),
        );
        Some(label as u16)
    })?;
    Ok((
        Dataset::from_matrix(rows, Some(labels), Some(classes as u32))?,
        codes,
    ))
}
