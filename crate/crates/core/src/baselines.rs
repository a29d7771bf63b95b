//! Label-free decomposition baselines: mini-batch k-means (nearest-centroid
//! reconstruction, one active code per row) and incremental PCA.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{epoch_permutation, CyclingBatches, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub batch_size: usize,
    /// Mini-batch updates to run; `None` runs one pass over the data.
    pub iterations: Option<u64>,
    pub seed: u64,
}

impl BaselineConfig {
    fn total_examples(&self, dataset: &Dataset) -> u64 {
        match self.iterations {
            Some(it) => it * self.batch_size as u64,
            None => dataset.count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    /// `k x d`
    pub centroids: Array2<f64>,
    pub counts: Vec<u64>,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn d(&self) -> usize {
        self.centroids.ncols()
    }

    /// Squared distance from every row to every centroid (`B x k`).
    fn squared_distances(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let x_norms: Array1<f64> = x.map_axis(Axis(1), |r| r.dot(&r));
        let c_norms: Array1<f64> = self.centroids.map_axis(Axis(1), |r| r.dot(&r));
        let mut dist = x.dot(&self.centroids.t());
        for (mut row, &xn) in dist.outer_iter_mut().zip(x_norms.iter()) {
            for (v, &cn) in row.iter_mut().zip(c_norms.iter()) {
                *v = (xn - 2.0 * *v + cn).max(0.0);
            }
        }
        dist
    }

    /// Nearest centroid per row (ties by lowest index) and its squared distance.
    pub fn assign(&self, x: ArrayView2<'_, f64>) -> Result<Vec<(usize, f64)>> {
        if x.ncols() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                actual: x.ncols(),
            });
        }
        let dist = self.squared_distances(x);
        Ok(dist
            .outer_iter()
            .map(|row| {
                let mut best = (0, f64::INFINITY);
                for (j, &v) in row.iter().enumerate() {
                    if v < best.1 {
                        best = (j, v);
                    }
                }
                best
            })
            .collect())
    }

    /// Mean squared distance to the assigned centroid.
    pub fn objective(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        let a = self.assign(x)?;
        Ok(a.iter().map(|(_, d)| d).sum::<f64>() / a.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutput {
    pub assignments: Vec<usize>,
    pub reconstructions: Array2<f64>,
    /// One-hot codes (`B x k`), value 1 at the assigned centroid.
    pub codes: Array2<f64>,
}

pub fn kmeans_assign_reconstruct(model: &KMeansModel, x: ArrayView2<'_, f64>) -> Result<KMeansOutput> {
    let assignments: Vec<usize> = model.assign(x)?.into_iter().map(|(j, _)| j).collect();
    let mut reconstructions = Array2::zeros(x.raw_dim());
    let mut codes = Array2::zeros((x.nrows(), model.k()));
    for (i, &j) in assignments.iter().enumerate() {
        reconstructions.row_mut(i).assign(&model.centroids.row(j));
        codes[[i, j]] = 1.0;
    }
    Ok(KMeansOutput {
        assignments,
        reconstructions,
        codes,
    })
}

/// k-means++ seeding over `buffer`.
fn kmeans_plus_plus(buffer: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let m = buffer.nrows();
    let mut centroids = Array2::zeros((k, buffer.ncols()));
    let first = rng.random_range(0..m);
    centroids.row_mut(0).assign(&buffer.row(first));
    let sq = |a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>| {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };
    let mut nearest: Vec<f64> = buffer.outer_iter().map(|r| sq(r, buffer.row(first))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(c).assign(&buffer.row(pick));
        for (i, row) in buffer.outer_iter().enumerate() {
            nearest[i] = nearest[i].min(sq(row, buffer.row(pick)));
        }
    }
    centroids
}

/// Mini-batch k-means: k-means++ seeding on an initial shuffled buffer, then
/// per-sample centroid moves with learning rate `1 / count`. Centroids that
/// have never been assigned are reseeded at the batch rows farthest from
/// their nearest centroid.
pub fn kmeans_fit(dataset: &Dataset, k: usize, cfg: &BaselineConfig) -> Result<KMeansModel> {
    if k == 0 || k as u64 > dataset.count() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in [1, {}]",
            dataset.count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let buffer_len = (k.max(cfg.batch_size) as u64).min(dataset.count());
    let init_ids: Vec<u64> = epoch_permutation(dataset.count(), cfg.seed, u64::MAX)
        .into_iter()
        .take(buffer_len as usize)
        .collect();
    let buffer = dataset.gather(&init_ids)?.x;
    let mut model = KMeansModel {
        centroids: kmeans_plus_plus(buffer.view(), k, &mut rng),
        counts: vec![0; k],
    };
    let batches = CyclingBatches::new(dataset, cfg.batch_size, cfg.total_examples(dataset), cfg.seed)?;
    for batch in batches {
        let x = batch?.x;
        let assigned = model.assign(x.view())?;
        let mut hit = vec![false; k];
        for &(j, _) in &assigned {
            hit[j] = true;
        }
        let mut empty: Vec<usize> = (0..k).filter(|&j| model.counts[j] == 0 && !hit[j]).collect();
        if !empty.is_empty() {
            let mut far: Vec<usize> = (0..x.nrows()).collect();
            far.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
            for (j, i) in empty.drain(..).zip(far) {
                model.centroids.row_mut(j).assign(&x.row(i));
            }
        }
        for (row, &(j, _)) in x.outer_iter().zip(&assigned) {
            model.counts[j] += 1;
            let eta = 1.0 / model.counts[j] as f64;
            let mut c = model.centroids.row_mut(j);
            c.zip_mut_with(&row, |c, &v| *c += eta * (v - *c));
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `n_c x d`, orthonormal rows.
    pub components: Array2<f64>,
    /// Non-increasing.
    pub explained_variance: Array1<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn d(&self) -> usize {
        self.components.ncols()
    }

    /// Largest entry of `|C C^T - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.components.dot(&self.components.t());
        let mut worst: f64 = 0.0;
        for ((i, j), &v) in gram.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
        worst
    }

    /// Keeps the leading `n` components.
    pub fn truncated(&self, n: usize) -> PcaModel {
        let n = n.min(self.n_components());
        PcaModel {
            mean: self.mean.clone(),
            components: self.components.slice(ndarray::s![..n, ..]).to_owned(),
            explained_variance: self.explained_variance.slice(ndarray::s![..n]).to_owned(),
        }
    }
}

/// Streaming PCA state: the running mean and a truncated SVD of the centered
/// data seen so far, updated one batch at a time.
#[derive(Debug, Clone)]
pub struct IncrementalPca {
    rank: usize,
    seen: u64,
    mean: Array1<f64>,
    singular_values: Vec<f64>,
    /// `r x d`
    basis: Array2<f64>,
}

impl IncrementalPca {
    /// Tracks `rank` directions internally; exact when `rank == d`.
    pub fn new(d: usize, rank: usize) -> Self {
        IncrementalPca {
            rank: rank.clamp(1, d),
            seen: 0,
            mean: Array1::zeros(d),
            singular_values: Vec::new(),
            basis: Array2::zeros((0, d)),
        }
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn partial_fit(&mut self, x: ArrayView2<'_, f64>) -> Result<()> {
        let d = self.mean.len();
        if x.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: x.ncols(),
            });
        }
        let b = x.nrows();
        if b == 0 {
            return Ok(());
        }
        let batch_mean = x.mean_axis(Axis(0)).unwrap();
        let n = self.seen as f64;
        let total = n + b as f64;
        let r = self.basis.nrows();
        let extra = if self.seen > 0 { r + 1 } else { 0 };
        let mut stack = DMatrix::<f64>::zeros(b + extra, d);
        for (i, row) in x.outer_iter().enumerate() {
            for j in 0..d {
                stack[(i, j)] = row[j] - batch_mean[j];
            }
        }
        if self.seen > 0 {
            for k in 0..r {
                for j in 0..d {
                    stack[(b + k, j)] = self.singular_values[k] * self.basis[[k, j]];
                }
            }
            let scale = (n * b as f64 / total).sqrt();
            for j in 0..d {
                stack[(b + r, j)] = scale * (self.mean[j] - batch_mean[j]);
            }
        }
        self.mean = (&self.mean * n + &batch_mean * b as f64) / total;
        self.seen += b as u64;

        let svd = stack.svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        order.truncate(self.rank);
        self.singular_values = order.iter().map(|&k| svd.singular_values[k]).collect();
        self.basis = Array2::from_shape_fn((order.len(), d), |(k, j)| v_t[(order[k], j)]);
        reorthonormalize(&mut self.basis);
        Ok(())
    }

    pub fn model(&self, n_components: usize) -> Result<PcaModel> {
        if n_components > self.basis.nrows() {
            return Err(Error::InvalidArgument(format!(
                "only {} directions estimated, {n_components} requested",
                self.basis.nrows()
            )));
        }
        let denom = (self.seen.max(2) - 1) as f64;
        let mut components = self.basis.slice(ndarray::s![..n_components, ..]).to_owned();
        reorthonormalize(&mut components);
        Ok(PcaModel {
            mean: self.mean.clone(),
            components,
            explained_variance: self.singular_values[..n_components]
                .iter()
                .map(|s| s * s / denom)
                .collect(),
        })
    }
}

/// Modified Gram-Schmidt over rows.
fn reorthonormalize(rows: &mut Array2<f64>) {
    for i in 0..rows.nrows() {
        for j in 0..i {
            let (done, mut rest) = rows.view_mut().split_at(Axis(0), i);
            let mut row = rest.row_mut(0);
            let prev = done.row(j);
            let proj = row.dot(&prev);
            row.scaled_add(-proj, &prev);
        }
        let mut row = rows.row_mut(i);
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

/// Internal rank tracked by [`pca_fit`]: exact up to 1024 dimensions.
pub fn pca_tracking_rank(d: usize, n_components: usize) -> usize {
    if d <= 1024 {
        d
    } else {
        (n_components + 256).min(d)
    }
}

pub fn pca_fit(dataset: &Dataset, n_components: usize, cfg: &BaselineConfig) -> Result<PcaModel> {
    let d = dataset.dim();
    if n_components == 0 || n_components > d {
        return Err(Error::InvalidArgument(format!(
            "n_components = {n_components} must lie in [1, {d}]"
        )));
    }
    let mut ipca = IncrementalPca::new(d, pca_tracking_rank(d, n_components));
    let batches = CyclingBatches::new(dataset, cfg.batch_size, cfg.total_examples(dataset), cfg.seed)?;
    for batch in batches {
        ipca.partial_fit(batch?.x.view())?;
    }
    ipca.model(n_components)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaOutput {
    pub scores: Array2<f64>,
    pub reconstructions: Array2<f64>,
}

pub fn pca_project_reconstruct(model: &PcaModel, x: ArrayView2<'_, f64>) -> Result<PcaOutput> {
    if x.ncols() != model.d() {
        return Err(Error::DimensionMismatch {
            expected: model.d(),
            actual: x.ncols(),
        });
    }
    let centered = &x - &model.mean;
    let scores = centered.dot(&model.components.t());
    let reconstructions = scores.dot(&model.components) + &model.mean;
    Ok(PcaOutput {
        scores,
        reconstructions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn row_on_centroid_reconstructs_exactly() {
        let model = KMeansModel {
            centroids: array![[0.0, 0.0], [5.0, 5.0]],
            counts: vec![1, 1],
        };
        let out = kmeans_assign_reconstruct(&model, array![[5.0, 5.0], [0.4, -0.1]].view()).unwrap();
        assert_eq!(out.assignments, vec![1, 0]);
        assert_eq!(out.reconstructions.row(0), model.centroids.row(1));
        for row in out.codes.outer_iter() {
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);
            assert_eq!(row.sum(), 1.0);
        }
    }

    #[test]
    fn k_larger_than_count_rejected() {
        let ds = Dataset::from_matrix(Array2::zeros((3, 2)), None, None).unwrap();
        let cfg = BaselineConfig {
            batch_size: 2,
            iterations: None,
            seed: 0,
        };
        assert!(kmeans_fit(&ds, 4, &cfg).is_err());
        assert!(pca_fit(&ds, 3, &cfg).is_err());
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let x = Array2::from_shape_fn((100, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f32 - 4.0);
        let ds = Dataset::from_matrix(x.clone(), None, None).unwrap();
        let cfg = BaselineConfig {
            batch_size: 16,
            iterations: None,
            seed: 2,
        };
        let model = kmeans_fit(&ds, 1, &cfg).unwrap();
        let mean = x.mapv(|v| v as f64).mean_axis(Axis(0)).unwrap();
        for (a, b) in model.centroids.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn pca_mean_maps_to_zero_scores() {
        let model = PcaModel {
            mean: array![1.0, 2.0],
            components: array![[0.6, 0.8]],
            explained_variance: array![1.0],
        };
        let out = pca_project_reconstruct(&model, array![[1.0, 2.0], [1.6, 2.8]].view()).unwrap();
        assert_eq!(out.scores[[0, 0]], 0.0);
        assert_eq!(out.reconstructions.row(0), model.mean);
        assert!((out.scores[[1, 0]] - 1.0).abs() < 1e-12);
        assert!((out.reconstructions[[1, 1]] - 2.8).abs() < 1e-6);
    }

    #[test]
    fn gram_schmidt_orthonormalizes() {
        let mut rows = array![[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]];
        reorthonormalize(&mut rows);
        let g = rows.dot(&rows.t());
        assert!((g[[0, 0]] - 1.0).abs() < 1e-12 && (g[[1, 1]] - 1.0).abs() < 1e-12);
        assert!(g[[0, 1]].abs() < 1e-12);
    }
}
