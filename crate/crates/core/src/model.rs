//! Model checkpoints shared by SAEs and the baselines, and evaluation of any
//! of them on labeled train/val splits.
//!
//! Container layout: magic `SPCKPT01`, u32 version, u32 kind tag, u64 header
//! length, a JSON header, then every tensor named in the header as
//! little-endian f32 in header order.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{kmeans_assign_reconstruct, pca_project_reconstruct, KMeansModel, PcaModel};
use crate::error::{Error, Result};
use crate::metrics::{self, CodeMatrix, CodeMatrixBuilder, EvalSettings, LabeledCodes, MetricsReport};
use crate::sae::{self, Objective, SaeParams};
use crate::store::Dataset;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sae,
    Kmeans,
    Pca,
}

impl ModelKind {
    fn tag(self) -> u32 {
        match self {
            ModelKind::Sae => 0,
            ModelKind::Kmeans => 1,
            ModelKind::Pca => 2,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Sae),
            1 => Ok(ModelKind::Kmeans),
            2 => Ok(ModelKind::Pca),
            other => Err(Error::InvalidCheckpoint(format!("unknown model kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeCheckpoint {
    pub params: SaeParams,
    pub objective: Objective,
    /// Prefixes resampled per step during training; 1 for vanilla.
    pub prefix_count: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Sae(SaeCheckpoint),
    KMeans(KMeansModel),
    Pca(PcaModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    d: usize,
    /// Latents, clusters or components.
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    objective: Option<Objective>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prefix_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    counts: Option<Vec<u64>>,
    tensors: Vec<TensorInfo>,
}

fn push_tensor<'a>(
    tensors: &mut Vec<TensorInfo>,
    data: &mut Vec<u8>,
    name: &str,
    shape: Vec<usize>,
    values: impl Iterator<Item = &'a f64>,
) {
    tensors.push(TensorInfo {
        name: name.into(),
        shape,
    });
    for &v in values {
        data.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

type Tensors = std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>;

fn take(tensors: &mut Tensors, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let (s, v) = tensors
        .remove(name)
        .ok_or_else(|| Error::InvalidCheckpoint(format!("missing tensor {name}")))?;
    if s != shape {
        return Err(Error::InvalidCheckpoint(format!("tensor {name} has shape {s:?}")));
    }
    Ok(v)
}

fn take_matrix(tensors: &mut Tensors, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
    Ok(Array2::from_shape_vec((rows, cols), take(tensors, name, &[rows, cols])?).expect("shape checked"))
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Sae(_) => ModelKind::Sae,
            Model::KMeans(_) => ModelKind::Kmeans,
            Model::Pca(_) => ModelKind::Pca,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Model::Sae(c) => c.params.d(),
            Model::KMeans(m) => m.d(),
            Model::Pca(m) => m.d(),
        }
    }

    /// Number of code dimensions.
    pub fn latents(&self) -> usize {
        match self {
            Model::Sae(c) => c.params.n(),
            Model::KMeans(m) => m.k(),
            Model::Pca(m) => m.n_components(),
        }
    }

    /// Codes (`B x latents`) and reconstructions (`B x d`) for a batch.
    pub fn encode_reconstruct(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        match self {
            Model::Sae(c) => {
                let (_, codes) = sae::encode_batch(&c.params, x)?;
                let recon = sae::decode_batch(&c.params, codes.view())?;
                Ok((codes, recon))
            }
            Model::KMeans(m) => {
                let out = kmeans_assign_reconstruct(m, x)?;
                Ok((out.codes, out.reconstructions))
            }
            Model::Pca(m) => {
                let out = pca_project_reconstruct(m, x)?;
                Ok((out.scores, out.reconstructions))
            }
        }
    }

    /// Per-row active count: strictly positive SAE codes, 1 for k-means, and
    /// every component for PCA.
    pub fn row_l0(&self, codes: ArrayView2<'_, f64>) -> Vec<usize> {
        match self {
            Model::Pca(m) => vec![m.n_components(); codes.nrows()],
            _ => codes.outer_iter().map(|r| r.iter().filter(|&&v| v > 0.0).count()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let mut header = Header {
            kind: self.kind(),
            d: self.d(),
            n: self.latents(),
            objective: None,
            prefix_count: None,
            step: None,
            counts: None,
            tensors: Vec::new(),
        };
        match self {
            Model::Sae(c) => {
                let p = &c.params;
                header.objective = Some(c.objective);
                header.prefix_count = Some(c.prefix_count);
                header.step = Some(c.step);
                push_tensor(&mut tensors, &mut data, "w_enc", p.w_enc.shape().to_vec(), p.w_enc.iter());
                push_tensor(&mut tensors, &mut data, "b_enc", p.b_enc.shape().to_vec(), p.b_enc.iter());
                push_tensor(&mut tensors, &mut data, "w_dec", p.w_dec.shape().to_vec(), p.w_dec.iter());
                push_tensor(&mut tensors, &mut data, "b_dec", p.b_dec.shape().to_vec(), p.b_dec.iter());
            }
            Model::KMeans(m) => {
                header.counts = Some(m.counts.clone());
                push_tensor(&mut tensors, &mut data, "centroids", m.centroids.shape().to_vec(), m.centroids.iter());
            }
            Model::Pca(m) => {
                push_tensor(&mut tensors, &mut data, "mean", m.mean.shape().to_vec(), m.mean.iter());
                push_tensor(&mut tensors, &mut data, "components", m.components.shape().to_vec(), m.components.iter());
                push_tensor(
                    &mut tensors,
                    &mut data,
                    "explained_variance",
                    m.explained_variance.shape().to_vec(),
                    m.explained_variance.iter(),
                );
            }
        }
        header.tensors = tensors;
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + json.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind().tag().to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidCheckpoint(m.to_string());
        if bytes.len() < 24 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::InvalidCheckpoint(format!("unsupported version {version}")));
        }
        let kind = ModelKind::from_tag(u32::from_le_bytes(bytes[12..16].try_into().unwrap()))?;
        let header_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let json = bytes.get(24..24 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        if header.kind != kind {
            return Err(bad("kind tag disagrees with header"));
        }
        let mut offset = 24 + header_len;
        let mut tensors = Tensors::new();
        for t in &header.tensors {
            let len: usize = t.shape.iter().product();
            let raw = bytes.get(offset..offset + 4 * len).ok_or_else(|| bad("truncated tensor data"))?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidCheckpoint(format!("non-finite value in {}", t.name)));
            }
            tensors.insert(t.name.clone(), (t.shape.clone(), values));
            offset += 4 * len;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let (n, d) = (header.n, header.d);
        let model = match kind {
            ModelKind::Sae => {
                let params = SaeParams {
                    w_enc: take_matrix(&mut tensors, "w_enc", n, d)?,
                    b_enc: Array1::from(take(&mut tensors, "b_enc", &[n])?),
                    w_dec: take_matrix(&mut tensors, "w_dec", d, n)?,
                    b_dec: Array1::from(take(&mut tensors, "b_dec", &[d])?),
                };
                Model::Sae(SaeCheckpoint {
                    params,
                    objective: header.objective.ok_or_else(|| bad("missing objective"))?,
                    prefix_count: header.prefix_count.ok_or_else(|| bad("missing prefix count"))?,
                    step: header.step.unwrap_or(0),
                })
            }
            ModelKind::Kmeans => {
                let counts = header.counts.ok_or_else(|| bad("missing counts"))?;
                if counts.len() != n {
                    return Err(bad("count vector length"));
                }
                Model::KMeans(KMeansModel {
                    centroids: take_matrix(&mut tensors, "centroids", n, d)?,
                    counts,
                })
            }
            ModelKind::Pca => Model::Pca(PcaModel {
                mean: Array1::from(take(&mut tensors, "mean", &[d])?),
                components: take_matrix(&mut tensors, "components", n, d)?,
                explained_variance: Array1::from(take(&mut tensors, "explained_variance", &[n])?),
            }),
        };
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Codes and reconstruction statistics of a model over a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedSplit {
    pub codes: CodeMatrix,
    pub labels: Vec<u16>,
    pub row_ids: Vec<u64>,
    pub nmse: f64,
    pub mean_l0: f64,
}

const CODE_CHUNK: usize = 1024;

/// Runs the model over `ids` in chunks.
pub fn encode_rows(model: &Model, dataset: &Dataset, ids: &[u64]) -> Result<CodedSplit> {
    if model.d() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.d(),
            actual: dataset.dim(),
        });
    }
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut builder = CodeMatrixBuilder::new(model.latents());
    let mut labels = Vec::with_capacity(ids.len());
    let mut l0_total = 0usize;
    // NMSE needs the split mean, so accumulate raw sums and cross terms.
    let d = dataset.dim();
    let mut sum = Array1::<f64>::zeros(d);
    let mut sq = 0.0;
    let mut err = 0.0;
    for chunk in ids.chunks(CODE_CHUNK) {
        let batch = dataset.gather(chunk)?;
        let (codes, recon) = model.encode_reconstruct(batch.x.view())?;
        l0_total += model.row_l0(codes.view()).iter().sum::<usize>();
        builder.push_block(codes.view());
        for (x, r) in batch.x.outer_iter().zip(recon.outer_iter()) {
            for ((&a, &b), s) in x.iter().zip(r.iter()).zip(sum.iter_mut()) {
                err += (a - b) * (a - b);
                sq += a * a;
                *s += a;
            }
        }
        if let Some(l) = batch.labels {
            labels.extend(l);
        }
    }
    let count = ids.len() as f64;
    let denom = sq - sum.dot(&sum) / count;
    if denom <= 0.0 {
        return Err(Error::DegenerateEvaluation);
    }
    Ok(CodedSplit {
        codes: builder.finish(),
        labels,
        row_ids: ids.to_vec(),
        nmse: err / denom,
        mean_l0: l0_total as f64 / count,
    })
}

/// Uniform subsample of at most `budget` row ids, in ascending order.
pub fn subsample_rows(count: u64, budget: usize, seed: u64) -> Vec<u64> {
    if count as usize <= budget {
        return (0..count).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u64> = rand::seq::index::sample(&mut rng, count as usize, budget)
        .into_iter()
        .map(|i| i as u64)
        .collect();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub train: CodedSplit,
    pub val: CodedSplit,
}

/// Shared class vocabulary of two labeled splits.
pub fn shared_vocabulary(train: &Dataset, val: &Dataset) -> Result<usize> {
    let vocab = |ds: &Dataset| -> Result<usize> {
        let labels = ds
            .labels()
            .ok_or_else(|| Error::InvalidArgument("evaluation needs labeled splits".into()))?;
        Ok(match ds.num_classes() {
            Some(c) => c as usize,
            None => labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0),
        })
    };
    let (a, b) = (vocab(train)?, vocab(val)?);
    if a != b {
        return Err(Error::InvalidArgument(format!(
            "class vocabularies differ: train has {a}, val has {b}"
        )));
    }
    Ok(a)
}

/// Codes both splits, selects latents on train (subsampled to the row
/// budget) and reports every metric on val.
pub fn evaluate_model(model: &Model, train: &Dataset, val: &Dataset, settings: &EvalSettings) -> Result<Evaluation> {
    if train.dim() != val.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            actual: val.dim(),
        });
    }
    let num_classes = shared_vocabulary(train, val)?;
    let train_ids = subsample_rows(train.count(), settings.row_budget, settings.seed);
    let train_split = encode_rows(model, train, &train_ids)?;
    let val_ids: Vec<u64> = (0..val.count()).collect();
    let val_split = encode_rows(model, val, &val_ids)?;
    let report = report_from_codes(&train_split, &val_split, num_classes, settings)?;
    Ok(Evaluation {
        report,
        train: train_split,
        val: val_split,
    })
}

/// Recomputes the report from stored codes.
pub fn report_from_codes(
    train: &CodedSplit,
    val: &CodedSplit,
    num_classes: usize,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    let train_codes = LabeledCodes {
        codes: &train.codes,
        labels: &train.labels,
    };
    let val_codes = LabeledCodes {
        codes: &val.codes,
        labels: &val.labels,
    };
    metrics::evaluate_codes(&train_codes, &val_codes, num_classes, val.nmse, val.mean_l0, settings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhibitEntry {
    pub rank: usize,
    pub row: u64,
    pub activation: f32,
    pub image_index: u64,
    pub patch_row: u32,
    pub patch_col: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentExhibit {
    pub latent: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u16>,
    pub entries: Vec<ExhibitEntry>,
}

/// Top-`k` rows of each requested latent, mapped onto (image, patch) using a
/// row-major patch grid. `row_ids` maps code rows back to dataset rows.
pub fn exhibit_manifest(
    codes: &CodeMatrix,
    row_ids: &[u64],
    latents: &[(usize, Option<u16>)],
    k: usize,
    patch_grid: [u32; 2],
) -> Result<Vec<LatentExhibit>> {
    let per_image = patch_grid[0] as u64 * patch_grid[1] as u64;
    if per_image == 0 {
        return Err(Error::InvalidArgument("patch grid must be non-empty".into()));
    }
    latents
        .iter()
        .map(|&(latent, class)| {
            if latent >= codes.cols() {
                return Err(Error::InvalidArgument(format!(
                    "latent {latent} out of range (model has {})",
                    codes.cols()
                )));
            }
            let entries = metrics::top_k_rows(codes, latent, k)
                .into_iter()
                .enumerate()
                .map(|(rank, (r, activation))| {
                    let row = row_ids[r as usize];
                    let patch = row % per_image;
                    ExhibitEntry {
                        rank,
                        row,
                        activation,
                        image_index: row / per_image,
                        patch_row: (patch / patch_grid[1] as u64) as u32,
                        patch_col: (patch % patch_grid[1] as u64) as u32,
                    }
                })
                .collect();
            Ok(LatentExhibit { latent, class, entries })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::init_params;
    use ndarray::array;

    fn sae_model() -> Model {
        let mut params = init_params(6, 3, 4);
        params.b_enc = array![0.1, -0.2, 0.0, 0.3, 0.0, 0.05];
        params.round_to_f32();
        Model::Sae(SaeCheckpoint {
            params,
            objective: Objective::Matryoshka,
            prefix_count: 10,
            step: 42,
        })
    }

    #[test]
    fn every_kind_round_trips_exactly() {
        let kmeans = Model::KMeans(KMeansModel {
            centroids: array![[0.5, 1.0, -2.0], [3.0, 0.25, 0.0]],
            counts: vec![7, 1 << 40],
        });
        let pca = Model::Pca(PcaModel {
            mean: array![1.0, 2.0, 3.0],
            components: array![[0.0, 1.0, 0.0]],
            explained_variance: array![2.5],
        });
        for model in [sae_model(), kmeans, pca] {
            assert_eq!(Model::from_bytes(&model.to_bytes()).unwrap(), model);
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = sae_model().to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut tagged = bytes.clone();
        tagged[12] = 2;
        assert!(Model::from_bytes(&tagged).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Model::from_bytes(&magic).is_err());
    }

    #[test]
    fn kmeans_rows_have_unit_l0() {
        let model = Model::KMeans(KMeansModel {
            centroids: array![[0.0, 0.0], [1.0, 1.0], [5.0, 0.0]],
            counts: vec![1; 3],
        });
        let x = array![[0.1, 0.0], [4.0, 0.5], [1.0, 0.9], [0.0, 0.0]];
        let (codes, _) = model.encode_reconstruct(x.view()).unwrap();
        assert_eq!(model.row_l0(codes.view()), vec![1; 4]);
    }

    #[test]
    fn streamed_nmse_matches_dense() {
        let x = Array2::from_shape_fn((2500, 3), |(i, j)| ((i * 31 + j * 7) % 13) as f32 * 0.25 - 1.0);
        let ds = Dataset::from_matrix(x, None, None).unwrap();
        let model = sae_model();
        let ids: Vec<u64> = (0..ds.count()).collect();
        let split = encode_rows(&model, &ds, &ids).unwrap();
        let batch = ds.to_batch().unwrap();
        let (codes, recon) = model.encode_reconstruct(batch.x.view()).unwrap();
        let dense = metrics::nmse(batch.x.view(), recon.view()).unwrap();
        assert!((split.nmse - dense).abs() < 1e-9 * dense);
        assert_eq!(split.codes, CodeMatrix::from_dense(codes.view()));
    }

    #[test]
    fn subsample_respects_budget() {
        assert_eq!(subsample_rows(5, 10, 0), vec![0, 1, 2, 3, 4]);
        let ids = subsample_rows(1000, 100, 3);
        assert_eq!(ids.len(), 100);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ids, subsample_rows(1000, 100, 3));
    }

    #[test]
    fn exhibit_orders_by_activation_and_maps_patches() {
        let dense = array![[0.0], [3.0], [1.0], [3.0], [0.0], [2.0]];
        let codes = CodeMatrix::from_dense(dense.view());
        let rows: Vec<u64> = (0..6).collect();
        let ex = exhibit_manifest(&codes, &rows, &[(0, None)], 3, [1, 4]).unwrap();
        let order: Vec<u64> = ex[0].entries.iter().map(|e| e.row).collect();
        assert_eq!(order, vec![1, 3, 5]);
        assert_eq!((ex[0].entries[2].image_index, ex[0].entries[2].patch_col), (1, 1));
        assert!(exhibit_manifest(&codes, &rows, &[(1, None)], 3, [1, 4]).is_err());
    }
}
