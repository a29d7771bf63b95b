//! ReLU sparse autoencoder: forward passes, the vanilla and Matryoshka
//! objectives with closed-form gradients, and the unit-norm decoder constraint.
//!
//! ```text
//! h     = W_enc (x - b_dec) + b_enc
//! f(x)  = ReLU(h)
//! x_hat = W_dec f(x) + b_dec
//! ```
//!
//! Batch losses are means over rows. The Matryoshka reconstruction term sums
//! the batch-mean squared error of every prefix reconstruction, each of which
//! uses the first `m` latents plus `b_dec`. The L1 penalty is applied once to
//! the full code vector.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of nested prefixes sampled per Matryoshka training step.
pub const PREFIX_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// `n x d`
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    /// `d x n`; columns are kept at unit norm.
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

impl SaeParams {
    pub fn zeros(n: usize, d: usize) -> Self {
        SaeParams {
            w_enc: Array2::zeros((n, d)),
            b_enc: Array1::zeros(n),
            w_dec: Array2::zeros((d, n)),
            b_dec: Array1::zeros(d),
        }
    }

    pub fn n(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn d(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.w_enc.iter().all(|v| v.is_finite())
            && self.b_enc.iter().all(|v| v.is_finite())
            && self.w_dec.iter().all(|v| v.is_finite())
            && self.b_dec.iter().all(|v| v.is_finite())
    }

    /// Largest deviation of a decoder column norm from 1.
    pub fn max_decoder_norm_error(&self) -> f64 {
        self.w_dec
            .columns()
            .into_iter()
            .map(|c| (c.dot(&c).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        let round = |v: &mut f64| *v = *v as f32 as f64;
        self.w_enc.iter_mut().for_each(round);
        self.b_enc.iter_mut().for_each(round);
        self.w_dec.iter_mut().for_each(round);
        self.b_dec.iter_mut().for_each(round);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Vanilla,
    Matryoshka,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Vanilla => "vanilla",
            Objective::Matryoshka => "matryoshka",
        }
    }
}

/// Strictly increasing prefix lengths ending at the latent count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixSet(Vec<usize>);

impl PrefixSet {
    pub fn new(prefixes: Vec<usize>, n: usize) -> Result<Self> {
        if prefixes.is_empty() {
            return Err(Error::InvalidPrefixes("empty prefix set".into()));
        }
        if let Some(&p) = prefixes.iter().find(|&&p| p == 0 || p > n) {
            return Err(Error::InvalidPrefixes(format!("prefix {p} outside [1, {n}]")));
        }
        if prefixes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPrefixes("prefixes must be strictly increasing".into()));
        }
        if *prefixes.last().unwrap() != n {
            return Err(Error::InvalidPrefixes(format!("last prefix must equal n = {n}")));
        }
        Ok(PrefixSet(prefixes))
    }

    /// The single full-width prefix `[n]`.
    pub fn full(n: usize) -> Self {
        PrefixSet(vec![n])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn n(&self) -> usize {
        *self.0.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub pre: Array1<f64>,
    pub codes: Array1<f64>,
}

impl LatentCode {
    pub fn active_set(&self) -> Vec<usize> {
        self.codes
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn l0(&self) -> f64 {
        l0(self.codes.view())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub sparsity: f64,
    pub lambda: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_mse: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &SaeParams) -> Self {
        let (n, d) = (params.n(), params.d());
        Gradients {
            w_enc: Array2::zeros((n, d)),
            b_enc: Array1::zeros(n),
            w_dec: Array2::zeros((d, n)),
            b_dec: Array1::zeros(d),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w_enc.iter().all(|v| v.is_finite())
            && self.b_enc.iter().all(|v| v.is_finite())
            && self.w_dec.iter().all(|v| v.is_finite())
            && self.b_dec.iter().all(|v| v.is_finite())
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

pub fn encode(params: &SaeParams, x: ArrayView1<'_, f64>) -> Result<LatentCode> {
    check_dim(params.d(), x.len())?;
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: i });
    }
    let centered = &x - &params.b_dec;
    let pre = params.w_enc.dot(&centered) + &params.b_enc;
    let codes = pre.mapv(relu);
    Ok(LatentCode { pre, codes })
}

pub fn decode(params: &SaeParams, codes: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    check_dim(params.n(), codes.len())?;
    Ok(params.w_dec.dot(&codes) + &params.b_dec)
}

/// Pre-activations and codes for every row of `x` (`B x n` each).
pub fn encode_batch(params: &SaeParams, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    check_dim(params.d(), x.ncols())?;
    let centered = &x - &params.b_dec;
    let pre = centered.dot(&params.w_enc.t()) + &params.b_enc;
    let codes = pre.mapv(relu);
    Ok((pre, codes))
}

pub fn decode_batch(params: &SaeParams, codes: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_dim(params.n(), codes.ncols())?;
    Ok(codes.dot(&params.w_dec.t()) + &params.b_dec)
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Number of strictly positive entries.
pub fn l0(codes: ArrayView1<'_, f64>) -> f64 {
    codes.iter().filter(|&&v| v > 0.0).count() as f64
}

/// Mean number of strictly positive entries per row.
pub fn mean_l0(codes: ArrayView2<'_, f64>) -> f64 {
    if codes.nrows() == 0 {
        return 0.0;
    }
    codes.iter().filter(|&&v| v > 0.0).count() as f64 / codes.nrows() as f64
}

pub fn vanilla_loss(params: &SaeParams, x: ArrayView2<'_, f64>, lambda: f64) -> Result<LossBreakdown> {
    let prefixes = PrefixSet::full(params.n());
    let mut loss = Pass::forward(params, x, lambda, &prefixes)?.loss();
    loss.prefix_mse = None;
    Ok(loss)
}

pub fn matryoshka_loss(
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
    lambda: f64,
    prefixes: &PrefixSet,
) -> Result<LossBreakdown> {
    Ok(Pass::forward(params, x, lambda, prefixes)?.loss())
}

/// Loss and gradients of the batch-mean objective. `None` selects the vanilla
/// objective; `Some(prefixes)` the Matryoshka objective.
pub fn backward(
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
    lambda: f64,
    prefixes: Option<&PrefixSet>,
) -> Result<(LossBreakdown, Gradients)> {
    let full;
    let prefixes = match prefixes {
        Some(p) => p,
        None => {
            full = PrefixSet::full(params.n());
            &full
        }
    };
    let pass = Pass::forward(params, x, lambda, prefixes)?;
    let grads = pass.gradients(params, x);
    let mut loss = pass.loss();
    if prefixes.len() == 1 {
        loss.prefix_mse = None;
    }
    Ok((loss, grads))
}

/// Cached forward state shared by the loss and gradient computations.
struct Pass {
    lambda: f64,
    prefixes: Vec<usize>,
    centered: Array2<f64>,
    pre: Array2<f64>,
    codes: Array2<f64>,
    /// Residual `x_hat_{0:m} - x` for every prefix, `B x d` each.
    residuals: Vec<Array2<f64>>,
    prefix_mse: Vec<f64>,
    sparsity: f64,
}

impl Pass {
    fn forward(params: &SaeParams, x: ArrayView2<'_, f64>, lambda: f64, prefixes: &PrefixSet) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        check_dim(params.d(), x.ncols())?;
        if prefixes.n() != params.n() {
            return Err(Error::InvalidPrefixes(format!(
                "prefix set ends at {} but the model has {} latents",
                prefixes.n(),
                params.n()
            )));
        }
        let batch = x.nrows() as f64;
        let centered = &x - &params.b_dec;
        let pre = centered.dot(&params.w_enc.t()) + &params.b_enc;
        let codes = pre.mapv(relu);

        let mut running = Array2::<f64>::zeros(x.raw_dim());
        Zip::from(&mut running)
            .and(&x)
            .and_broadcast(&params.b_dec)
            .for_each(|r, &xv, &b| *r = b - xv);
        let mut residuals = Vec::with_capacity(prefixes.len());
        let mut prefix_mse = Vec::with_capacity(prefixes.len());
        let mut start = 0;
        for &m in prefixes.as_slice() {
            let block_codes = codes.slice(s![.., start..m]);
            let block_dec = params.w_dec.slice(s![.., start..m]);
            ndarray::linalg::general_mat_mul(1.0, &block_codes, &block_dec.t(), 1.0, &mut running);
            prefix_mse.push(running.iter().map(|v| v * v).sum::<f64>() / batch);
            residuals.push(running.clone());
            start = m;
        }
        let sparsity = codes.sum() / batch;
        Ok(Pass {
            lambda,
            prefixes: prefixes.as_slice().to_vec(),
            centered,
            pre,
            codes,
            residuals,
            prefix_mse,
            sparsity,
        })
    }

    fn loss(&self) -> LossBreakdown {
        let reconstruction: f64 = self.prefix_mse.iter().sum();
        LossBreakdown {
            reconstruction,
            sparsity: self.sparsity,
            lambda: self.lambda,
            total: reconstruction + self.lambda * self.sparsity,
            prefix_mse: Some(self.prefix_mse.clone()),
        }
    }

    fn gradients(&self, params: &SaeParams, x: ArrayView2<'_, f64>) -> Gradients {
        let batch = x.nrows() as f64;
        let scale = 2.0 / batch;
        let mut grads = Gradients::zeros_like(params);
        let mut grad_codes = Array2::<f64>::zeros(self.codes.raw_dim());

        // Latents in block k appear in prefixes k..; their upstream residual is
        // the suffix sum of residuals.
        let mut suffix = Array2::<f64>::zeros(x.raw_dim());
        for k in (0..self.prefixes.len()).rev() {
            suffix += &self.residuals[k];
            let start = if k == 0 { 0 } else { self.prefixes[k - 1] };
            let end = self.prefixes[k];
            let block_codes = self.codes.slice(s![.., start..end]);
            let mut g_dec = grads.w_dec.slice_mut(s![.., start..end]);
            ndarray::linalg::general_mat_mul(scale, &suffix.t(), &block_codes, 0.0, &mut g_dec);
            let mut g_codes = grad_codes.slice_mut(s![.., start..end]);
            let block_dec = params.w_dec.slice(s![.., start..end]);
            ndarray::linalg::general_mat_mul(scale, &suffix, &block_dec, 0.0, &mut g_codes);
        }
        let l1 = self.lambda / batch;
        Zip::from(&mut grad_codes).and(&self.pre).for_each(|g, &h| {
            *g = if h > 0.0 { *g + l1 } else { 0.0 };
        });
        let grad_pre = grad_codes;

        ndarray::linalg::general_mat_mul(1.0, &grad_pre.t(), &self.centered, 0.0, &mut grads.w_enc);
        grads.b_enc = grad_pre.sum_axis(Axis(0));
        let enc_part = params.w_enc.t().dot(&grads.b_enc);
        grads.b_dec = suffix.sum_axis(Axis(0)) * scale - enc_part;
        grads
    }
}

/// Removes from each decoder-column gradient its component along the column:
/// `g' = g - (g.c / |c|^2) c`.
pub fn project_decoder_gradient(params: &SaeParams, grads: &mut Gradients) -> Result<()> {
    for (j, (col, mut g)) in params
        .w_dec
        .columns()
        .into_iter()
        .zip(grads.w_dec.columns_mut())
        .enumerate()
    {
        let norm_sq = col.dot(&col);
        if norm_sq == 0.0 || !norm_sq.is_finite() {
            return Err(Error::ZeroNormColumn(j));
        }
        let coef = g.dot(&col) / norm_sq;
        g.scaled_add(-coef, &col);
    }
    Ok(())
}

/// Rescales every decoder column to unit L2 norm.
pub fn normalize_decoder(params: &mut SaeParams) -> Result<()> {
    for (j, mut col) in params.w_dec.columns_mut().into_iter().enumerate() {
        let norm = col.dot(&col).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNormColumn(j));
        }
        col /= norm;
    }
    Ok(())
}
