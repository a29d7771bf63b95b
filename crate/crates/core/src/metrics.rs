//! Reconstruction and concept-alignment metrics: NMSE, 1-D logistic probes,
//! Probe R, average precision, Purity@k and Coverage@tau.
//!
//! Every ranking in this module breaks ties by the lowest index (row id,
//! latent id), so results are a pure function of the inputs.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column means of `x`, the reference predictor for [`nmse`].
pub fn column_mean(x: ArrayView2<'_, f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("non-empty matrix")
}

/// `sum |x_i - x_hat_i|^2 / sum |x_i - mean(x)|^2`.
pub fn nmse(originals: ArrayView2<'_, f64>, reconstructions: ArrayView2<'_, f64>) -> Result<f64> {
    if originals.dim() != reconstructions.dim() {
        return Err(Error::DimensionMismatch {
            expected: originals.len(),
            actual: reconstructions.len(),
        });
    }
    if originals.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mean = column_mean(originals);
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, x_hat) in originals.outer_iter().zip(reconstructions.outer_iter()) {
        for ((&a, &b), &m) in x.iter().zip(x_hat.iter()).zip(mean.iter()) {
            num += (a - b) * (a - b);
            den += (a - m) * (a - m);
        }
    }
    if den == 0.0 {
        return Err(Error::DegenerateEvaluation);
    }
    Ok(num / den)
}

/// Column-compressed latent activations. Only nonzero entries are stored;
/// values are kept at `f32` so stored and freshly computed codes agree exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    rows: usize,
    cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    values: Vec<f32>,
}

/// Accumulates a [`CodeMatrix`] from row blocks without keeping them dense.
#[derive(Debug, Clone)]
pub struct CodeMatrixBuilder {
    rows: usize,
    per_col: Vec<Vec<(u32, f32)>>,
}

impl CodeMatrixBuilder {
    pub fn new(cols: usize) -> Self {
        CodeMatrixBuilder {
            rows: 0,
            per_col: vec![Vec::new(); cols],
        }
    }

    pub fn push_block(&mut self, block: ArrayView2<'_, f64>) {
        assert_eq!(block.ncols(), self.per_col.len(), "block width");
        for (r, row) in block.outer_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let v = v as f32;
                if v != 0.0 {
                    self.per_col[j].push(((self.rows + r) as u32, v));
                }
            }
        }
        self.rows += block.nrows();
    }

    pub fn finish(self) -> CodeMatrix {
        let cols = self.per_col.len();
        let mut col_ptr = Vec::with_capacity(cols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for entries in self.per_col {
            for (r, v) in entries {
                row_idx.push(r);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        CodeMatrix {
            rows: self.rows,
            cols,
            col_ptr,
            row_idx,
            values,
        }
    }
}

const CODES_MAGIC: &[u8; 8] = b"SPCODE01";

impl CodeMatrix {
    pub fn from_dense(codes: ArrayView2<'_, f64>) -> Self {
        let (rows, cols) = codes.dim();
        let mut col_ptr = Vec::with_capacity(cols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in codes.columns() {
            for (r, &v) in col.iter().enumerate() {
                let v = v as f32;
                if v != 0.0 {
                    row_idx.push(r as u32);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        CodeMatrix {
            rows,
            cols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Stacks row blocks computed batch by batch.
    pub fn from_blocks(blocks: &[Array2<f64>]) -> Self {
        let mut builder = CodeMatrixBuilder::new(blocks.first().map_or(0, |b| b.ncols()));
        for b in blocks {
            builder.push_block(b.view());
        }
        builder.finish()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Nonzero `(row ids, values)` of one latent.
    pub fn column(&self, j: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.row_idx[a..b], &self.values[a..b])
    }

    pub fn dense_column(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        let (rows, vals) = self.column(j);
        for (&r, &v) in rows.iter().zip(vals) {
            out[r as usize] = v as f64;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Mean count of strictly positive entries per row.
    pub fn mean_l0(&self) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        self.values.iter().filter(|&&v| v > 0.0).count() as f64 / self.rows as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * (self.cols + 1) + 8 * self.values.len());
        out.extend_from_slice(CODES_MAGIC);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for &p in &self.col_ptr {
            out.extend_from_slice(&(p as u64).to_le_bytes());
        }
        for &r in &self.row_idx {
            out.extend_from_slice(&r.to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidCheckpoint(format!("code matrix: {m}"));
        if bytes.len() < 24 || &bytes[..8] != CODES_MAGIC {
            return Err(bad("bad header"));
        }
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let rows = u64_at(8) as usize;
        let cols = u64_at(16) as usize;
        let mut pos = 24;
        if bytes.len() < pos + 8 * (cols + 1) {
            return Err(bad("truncated column pointers"));
        }
        let col_ptr: Vec<usize> = (0..=cols).map(|i| u64_at(pos + 8 * i) as usize).collect();
        pos += 8 * (cols + 1);
        let nnz = *col_ptr.last().unwrap();
        if bytes.len() != pos + 8 * nnz || col_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad("inconsistent length"));
        }
        let row_idx: Vec<u32> = bytes[pos..pos + 4 * nnz]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 4 * nnz;
        let values: Vec<f32> = bytes[pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if row_idx.iter().any(|&r| r as usize >= rows) {
            return Err(bad("row index out of range"));
        }
        Ok(CodeMatrix {
            rows,
            cols,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// How the probe bias is initialized before the Newton iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasInit {
    /// `log(p / (1 - p))`, the minimizer of the bias-only loss.
    LogOdds,
    /// The raw prevalence `p`.
    Prevalence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub ridge: f64,
    pub steps: usize,
    pub max_halvings: usize,
    pub bias_init: BiasInit,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            ridge: 1e-8,
            steps: 30,
            max_halvings: 20,
            bias_init: BiasInit::LogOdds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub w: f64,
    pub b: f64,
    /// Bias of the bias-only probe the fit started from.
    pub b_init: f64,
    /// Mean binary cross-entropy of the trained probe.
    pub loss: f64,
    /// Mean binary cross-entropy at the bias-only initialization.
    pub bias_loss: f64,
    pub r: f64,
}

/// Weighted 1-D logistic regression data. Rows with `z = 0` are pooled into
/// two counts, which keeps probes over sparse codes cheap.
#[derive(Debug, Clone)]
pub struct ProbeData {
    z: Vec<f64>,
    y: Vec<bool>,
    zero_pos: f64,
    zero_neg: f64,
    total: f64,
    positives: f64,
}

impl ProbeData {
    pub fn dense(z: &[f64], y: &[bool]) -> Self {
        let mut data = ProbeData {
            z: Vec::new(),
            y: Vec::new(),
            zero_pos: 0.0,
            zero_neg: 0.0,
            total: z.len() as f64,
            positives: 0.0,
        };
        for (&zi, &yi) in z.iter().zip(y) {
            if yi {
                data.positives += 1.0;
            }
            if zi == 0.0 {
                if yi {
                    data.zero_pos += 1.0;
                } else {
                    data.zero_neg += 1.0;
                }
            } else {
                data.z.push(zi);
                data.y.push(yi);
            }
        }
        data
    }

    /// From a sparse column; `is_positive` maps row id to its binary label and
    /// `positives` is the positive count over all `rows`.
    pub fn sparse(rows: usize, ids: &[u32], values: &[f32], is_positive: impl Fn(u32) -> bool, positives: usize) -> Self {
        let mut z = Vec::with_capacity(ids.len());
        let mut y = Vec::with_capacity(ids.len());
        let mut nz_pos = 0usize;
        for (&r, &v) in ids.iter().zip(values) {
            let label = is_positive(r);
            nz_pos += label as usize;
            z.push(v as f64);
            y.push(label);
        }
        let zero_total = rows - ids.len();
        let zero_pos = positives - nz_pos;
        ProbeData {
            z,
            y,
            zero_pos: zero_pos as f64,
            zero_neg: (zero_total - zero_pos) as f64,
            total: rows as f64,
            positives: positives as f64,
        }
    }

    pub fn prevalence(&self) -> f64 {
        self.positives / self.total
    }

    /// Mean binary cross-entropy of `sigmoid(w z + b)`.
    pub fn loss(&self, w: f64, b: f64) -> f64 {
        let mut sum = self.zero_pos * softplus(-b) + self.zero_neg * softplus(b);
        for (&z, &y) in self.z.iter().zip(&self.y) {
            let t = w * z + b;
            sum += if y { softplus(-t) } else { softplus(t) };
        }
        sum / self.total
    }

    fn objective(&self, w: f64, b: f64, ridge: f64) -> f64 {
        self.loss(w, b) + ridge * w * w
    }

    /// Gradient and Hessian of the ridge objective.
    fn derivatives(&self, w: f64, b: f64, ridge: f64) -> ([f64; 2], [f64; 3]) {
        let s0 = sigmoid(b);
        let c0 = s0 * (1.0 - s0);
        let (mut gw, mut gb) = (0.0, (s0 - 1.0) * self.zero_pos + s0 * self.zero_neg);
        let (mut hww, mut hwb, mut hbb) = (0.0, 0.0, c0 * (self.zero_pos + self.zero_neg));
        for (&z, &y) in self.z.iter().zip(&self.y) {
            let s = sigmoid(w * z + b);
            let r = s - if y { 1.0 } else { 0.0 };
            let c = s * (1.0 - s);
            gw += r * z;
            gb += r;
            hww += c * z * z;
            hwb += c * z;
            hbb += c;
        }
        let n = self.total;
        (
            [gw / n + 2.0 * ridge * w, gb / n],
            [hww / n + 2.0 * ridge, hwb / n, hbb / n],
        )
    }
}

#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Fits `sigmoid(w z + b)` by damped Newton steps from `w = 0` and the
/// prevalence-based bias. Returns `None` when the labels are single-class.
pub fn fit_probe(data: &ProbeData, settings: &ProbeSettings) -> Option<ProbeFit> {
    if data.positives == 0.0 || data.positives == data.total {
        return None;
    }
    let p = data.prevalence();
    let b0 = match settings.bias_init {
        BiasInit::LogOdds => (p / (1.0 - p)).ln(),
        BiasInit::Prevalence => p,
    };
    let (mut w, mut b) = (0.0, b0);
    let bias_loss = data.loss(0.0, b0);
    let mut current = data.objective(w, b, settings.ridge);
    for _ in 0..settings.steps {
        let (g, h) = data.derivatives(w, b, settings.ridge);
        if g[0] == 0.0 && g[1] == 0.0 {
            break;
        }
        let det = h[0] * h[2] - h[1] * h[1];
        let (dw, db) = if det > 1e-300 && det.is_finite() {
            (-(h[2] * g[0] - h[1] * g[1]) / det, -(h[0] * g[1] - h[1] * g[0]) / det)
        } else {
            (-g[0], -g[1])
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=settings.max_halvings {
            let (nw, nb) = (w + alpha * dw, b + alpha * db);
            let next = data.objective(nw, nb, settings.ridge);
            if next.is_finite() && next <= current {
                w = nw;
                b = nb;
                current = next;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let loss = data.loss(w, b);
    Some(ProbeFit {
        w,
        b,
        b_init: b0,
        loss,
        bias_loss,
        r: 1.0 - loss / bias_loss,
    })
}

/// Convenience wrapper over dense scores and binary labels.
pub fn fit_1d_probe(z: &[f64], y: &[bool], settings: &ProbeSettings) -> Option<ProbeFit> {
    fit_probe(&ProbeData::dense(z, y), settings)
}

/// Rank-based average precision: rows sorted by descending score (ties by
/// lower row id); mean over positives of precision at their rank. No
/// positives gives 0.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / positives as f64
}

/// Unweighted mean of per-class APs.
pub fn mean_average_precision(aps: &[f64]) -> f64 {
    if aps.is_empty() {
        return 0.0;
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Fraction of classes whose AP reaches `tau`; `aps` holds one entry per
/// class in the vocabulary (absent classes as 0).
pub fn coverage_at_tau(aps: &[f64], tau: f64) -> f64 {
    if aps.is_empty() {
        return 0.0;
    }
    aps.iter().filter(|&&ap| ap >= tau).count() as f64 / aps.len() as f64
}

/// The `k` highest nonzero activations of a latent as `(row, value)`, by
/// descending value then ascending row.
pub fn top_k_rows(codes: &CodeMatrix, latent: usize, k: usize) -> Vec<(u32, f32)> {
    let (rows, vals) = codes.column(latent);
    let mut entries: Vec<(u32, f32)> = rows.iter().copied().zip(vals.iter().copied()).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    entries.truncate(k);
    entries
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    pub k: usize,
    /// Mean over evaluated latents; 0 when none qualify.
    pub purity: f64,
    pub evaluated: usize,
    /// Latents with fewer than `k` nonzero activations.
    pub excluded: usize,
}

/// Majority-label fraction among each latent's top-`k` rows, averaged over
/// latents with at least `k` nonzero activations.
pub fn purity_at_k(codes: &CodeMatrix, labels: &[u16], k: usize) -> Result<PurityReport> {
    if k == 0 || k > codes.rows() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in [1, {}]",
            codes.rows()
        )));
    }
    if labels.len() != codes.rows() {
        return Err(Error::LabelMismatch {
            expected: codes.rows(),
            actual: labels.len(),
        });
    }
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut excluded = 0;
    let mut counts = std::collections::HashMap::new();
    for j in 0..codes.cols() {
        if codes.column(j).0.len() < k {
            excluded += 1;
            continue;
        }
        counts.clear();
        for (r, _) in top_k_rows(codes, j, k) {
            *counts.entry(labels[r as usize]).or_insert(0usize) += 1;
        }
        let majority = counts.values().copied().max().unwrap_or(0);
        sum += majority as f64 / k as f64;
        evaluated += 1;
    }
    Ok(PurityReport {
        k,
        purity: if evaluated == 0 { 0.0 } else { sum / evaluated as f64 },
        evaluated,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAlignment {
    pub class: u16,
    pub latent: usize,
    pub fit: ProbeFit,
}

/// Positive counts per class.
pub fn class_counts(labels: &[u16], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &l in labels {
        counts[l as usize] += 1;
    }
    counts
}

fn fit_latent(codes: &CodeMatrix, labels: &[u16], class: u16, positives: usize, latent: usize, settings: &ProbeSettings) -> Option<ProbeFit> {
    let (ids, vals) = codes.column(latent);
    let data = ProbeData::sparse(codes.rows(), ids, vals, |r| labels[r as usize] == class, positives);
    fit_probe(&data, settings)
}

#[cfg(feature = "parallel")]
fn fit_all_latents(codes: &CodeMatrix, labels: &[u16], class: u16, positives: usize, settings: &ProbeSettings) -> Vec<Option<ProbeFit>> {
    use rayon::prelude::*;
    (0..codes.cols())
        .into_par_iter()
        .map(|j| fit_latent(codes, labels, class, positives, j, settings))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn fit_all_latents(codes: &CodeMatrix, labels: &[u16], class: u16, positives: usize, settings: &ProbeSettings) -> Vec<Option<ProbeFit>> {
    (0..codes.cols())
        .map(|j| fit_latent(codes, labels, class, positives, j, settings))
        .collect()
}

/// Fits one probe per latent for `class` and keeps the lowest training loss
/// (ties by lowest latent id). `None` when the class is absent or fills every row.
pub fn best_latent_per_class(codes: &CodeMatrix, labels: &[u16], class: u16, settings: &ProbeSettings) -> Option<ClassAlignment> {
    let positives = labels.iter().filter(|&&l| l == class).count();
    if positives == 0 || positives == labels.len() || codes.cols() == 0 {
        return None;
    }
    let fits = fit_all_latents(codes, labels, class, positives, settings);
    let mut best: Option<ClassAlignment> = None;
    for (latent, fit) in fits.into_iter().enumerate() {
        let Some(fit) = fit else { continue };
        if best.is_none_or(|b| fit.loss < b.fit.loss) {
            best = Some(ClassAlignment { class, latent, fit });
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k: usize,
    pub tau: f64,
    pub probe: ProbeSettings,
    /// Cap on training rows used for probe fitting.
    pub row_budget: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k: 16,
            tau: 0.3,
            probe: ProbeSettings::default(),
            row_budget: 2_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: u16,
    pub train_positives: usize,
    pub val_positives: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_latent: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_r: Option<f64>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmse: f64,
    pub mean_l0: f64,
    pub probe_r: f64,
    pub map: f64,
    pub purity: f64,
    pub coverage: f64,
    pub k: usize,
    pub tau: f64,
    pub num_classes: usize,
    pub purity_evaluated: usize,
    pub purity_excluded: usize,
    pub train_rows_used: usize,
    pub per_class: Vec<ClassReport>,
}

pub const TABLE_HEADER: &str = "NMSE | L0 | Probe R | mAP | Purity@k | Cov@tau";

impl MetricsReport {
    /// One row in the column order NMSE, L0, Probe R, mAP, Purity@k, Cov@tau.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "| {name} | {:.3} | {:.1} | {:.3} | {:.3} | {:.3} | {:.3} |",
            self.nmse, self.mean_l0, self.probe_r, self.map, self.purity, self.coverage
        )
    }

    pub fn render_table(rows: &[(String, &MetricsReport)]) -> String {
        let mut out = String::from("| Method | NMSE | L0 | Probe R | mAP | Purity@k | Cov@tau |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
        for (name, report) in rows {
            out.push_str(&report.table_row(name));
            out.push('\n');
        }
        out
    }

    pub fn render_per_class(&self) -> String {
        let mut out = String::from("| Class | Train + | Val + | Best latent | Train loss | Probe R | AP |\n");
        out.push_str("|---:|---:|---:|---:|---:|---:|---:|\n");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for c in &self.per_class {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {:.4} |\n",
                c.class,
                c.train_positives,
                c.val_positives,
                c.best_latent.map_or("-".to_string(), |l| l.to_string()),
                opt(c.train_loss),
                opt(c.probe_r),
                c.ap
            ));
        }
        out
    }
}

/// Codes for one labelled split.
#[derive(Debug, Clone)]
pub struct LabeledCodes<'a> {
    pub codes: &'a CodeMatrix,
    pub labels: &'a [u16],
}

/// Per-class alignments on the training split, in class order.
pub fn align_classes(train: &LabeledCodes<'_>, num_classes: usize, probe: &ProbeSettings) -> Vec<Option<ClassAlignment>> {
    (0..num_classes)
        .map(|c| best_latent_per_class(train.codes, train.labels, c as u16, probe))
        .collect()
}

/// Latent selection on `train`, all downstream metrics on `val`. `nmse` and
/// `mean_l0` are supplied by the caller since they need reconstructions.
pub fn evaluate_codes(
    train: &LabeledCodes<'_>,
    val: &LabeledCodes<'_>,
    num_classes: usize,
    nmse: f64,
    mean_l0: f64,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    if train.codes.cols() != val.codes.cols() {
        return Err(Error::DimensionMismatch {
            expected: train.codes.cols(),
            actual: val.codes.cols(),
        });
    }
    for split in [train, val] {
        if split.labels.len() != split.codes.rows() {
            return Err(Error::LabelMismatch {
                expected: split.codes.rows(),
                actual: split.labels.len(),
            });
        }
        if split.labels.iter().any(|&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument("label outside the class vocabulary".into()));
        }
    }
    let alignments = align_classes(train, num_classes, &settings.probe);
    let train_counts = class_counts(train.labels, num_classes);
    let val_counts = class_counts(val.labels, num_classes);
    let mut per_class = Vec::with_capacity(num_classes);
    let mut aps = Vec::with_capacity(num_classes);
    let mut rs = Vec::new();
    for (c, alignment) in alignments.iter().enumerate() {
        let class = c as u16;
        let y: Vec<bool> = val.labels.iter().map(|&l| l == class).collect();
        let (ap, r) = match alignment {
            Some(a) if val_counts[c] > 0 => {
                let z = val.codes.dense_column(a.latent);
                let scores: Vec<f64> = z.iter().map(|&zi| a.fit.w * zi + a.fit.b).collect();
                let ap = average_precision(&scores, &y);
                let r = if val_counts[c] < val.labels.len() {
                    let data = ProbeData::dense(&z, &y);
                    Some(1.0 - data.loss(a.fit.w, a.fit.b) / data.loss(0.0, a.fit.b_init))
                } else {
                    None
                };
                (ap, r)
            }
            _ => (0.0, None),
        };
        if let Some(r) = r {
            rs.push(r);
        }
        aps.push(ap);
        per_class.push(ClassReport {
            class,
            train_positives: train_counts[c],
            val_positives: val_counts[c],
            best_latent: alignment.map(|a| a.latent),
            train_loss: alignment.map(|a| a.fit.loss),
            probe_r: r,
            ap,
        });
    }
    let purity = purity_at_k(val.codes, val.labels, settings.k)?;
    Ok(MetricsReport {
        nmse,
        mean_l0,
        probe_r: if rs.is_empty() { 0.0 } else { rs.iter().sum::<f64>() / rs.len() as f64 },
        map: mean_average_precision(&aps),
        purity: purity.purity,
        coverage: coverage_at_tau(&aps, settings.tau),
        k: settings.k,
        tau: settings.tau,
        num_classes,
        purity_evaluated: purity.evaluated,
        purity_excluded: purity.excluded,
        train_rows_used: train.codes.rows(),
        per_class,
    })
}

/// Macro-average over classes of the best training probe loss.
pub fn mean_best_probe_loss(train: &LabeledCodes<'_>, num_classes: usize, probe: &ProbeSettings) -> f64 {
    let losses: Vec<f64> = align_classes(train, num_classes, probe)
        .into_iter()
        .flatten()
        .map(|a| a.fit.loss)
        .collect();
    if losses.is_empty() {
        return f64::INFINITY;
    }
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Index of the family member with the lowest macro-averaged best training
/// probe loss; ties keep the earliest.
pub fn select_best_by_probe(family: &[LabeledCodes<'_>], num_classes: usize, probe: &ProbeSettings) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, member) in family.iter().enumerate() {
        let loss = mean_best_probe_loss(member, num_classes, probe);
        if best.is_none_or(|(_, b)| loss < b) {
            best = Some((i, loss));
        }
    }
    best.map(|(i, _)| i)
}

/// One-to-one greedy matching of planted atoms (columns of `planted`) to
/// learned decoder columns by descending |cosine|. Returns `(atom, column,
/// |cosine|)` for every atom that received a column.
pub fn match_dictionary(planted: ArrayView2<'_, f64>, learned: ArrayView2<'_, f64>) -> Vec<(usize, usize, f64)> {
    let norm = |c: ndarray::ArrayView1<'_, f64>| c.dot(&c).sqrt();
    let mut pairs = Vec::with_capacity(planted.ncols() * learned.ncols());
    for (a, atom) in planted.columns().into_iter().enumerate() {
        for (c, col) in learned.columns().into_iter().enumerate() {
            let denom = norm(atom) * norm(col);
            let cos = if denom > 0.0 { (atom.dot(&col) / denom).abs() } else { 0.0 };
            pairs.push((cos, a, c));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut atom_used = vec![false; planted.ncols()];
    let mut col_used = vec![false; learned.ncols()];
    let mut matches = Vec::new();
    for (cos, a, c) in pairs {
        if atom_used[a] || col_used[c] {
            continue;
        }
        atom_used[a] = true;
        col_used[c] = true;
        matches.push((a, c, cos));
    }
    matches.sort_by_key(|m| m.0);
    matches
}
