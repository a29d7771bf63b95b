//! Optimization loop: initialization, Adam with decoder-gradient projection,
//! learning-rate and sparsity schedules, Matryoshka prefix sampling, and
//! hyperparameter sweeps.

use std::fmt;

use ndarray::{Array1, Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::sae::{self, Gradients, LossBreakdown, Objective, PrefixSet, SaeParams, PREFIX_COUNT};
use crate::store::{CyclingBatches, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Latent count.
    pub n: usize,
    pub lambda_max: f64,
    pub lr_max: f64,
    pub batch_size: usize,
    pub total_examples: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub prefix_count: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub log_every: u64,
}

impl TrainConfig {
    /// Full-scale settings: 16384 latents, batch 16384, 100M examples,
    /// 500 warmup steps.
    pub fn reference(objective: Objective, lr_max: f64, lambda_max: f64) -> Self {
        TrainConfig {
            objective,
            n: 16384,
            lambda_max,
            lr_max,
            batch_size: 16384,
            total_examples: 100_000_000,
            warmup_steps: 500,
            seed: 0,
            prefix_count: PREFIX_COUNT,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return bad(format!("lambda_max must be >= 0, got {}", self.lambda_max));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad(format!("lr_max must be > 0, got {}", self.lr_max));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.total_examples < self.batch_size as u64 {
            return bad("total_examples must be at least batch_size".into());
        }
        if self.warmup_steps >= self.total_steps() && self.warmup_steps > 0 {
            return bad(format!(
                "warmup_steps ({}) must be below the total step count ({})",
                self.warmup_steps,
                self.total_steps()
            ));
        }
        if self.objective == Objective::Matryoshka && (self.prefix_count == 0 || self.prefix_count > self.n) {
            return bad(format!("prefix_count must lie in [1, n], got {}", self.prefix_count));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.total_examples.div_ceil(self.batch_size.max(1) as u64)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short identifier for sweep directories.
    pub fn tag(&self) -> String {
        format!("{}-lr{:e}-l{:e}", self.objective.as_str(), self.lr_max, self.lambda_max)
    }
}

/// Kaiming-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero
/// biases, then unit-norm decoder columns.
pub fn init_params(n: usize, d: usize, seed: u64) -> SaeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc_bound = (6.0 / d as f64).sqrt();
    let dec_bound = (6.0 / n as f64).sqrt();
    let w_enc = Array2::from_shape_fn((n, d), |_| rng.random_range(-enc_bound..enc_bound));
    let w_dec = Array2::from_shape_fn((d, n), |_| rng.random_range(-dec_bound..dec_bound));
    let mut params = SaeParams {
        w_enc,
        b_enc: Array1::zeros(n),
        w_dec,
        b_dec: Array1::zeros(d),
    };
    sae::normalize_decoder(&mut params).expect("uniform init has nonzero columns");
    params
}

/// Linear warmup from 0 to `lr_max`, then cosine decay to 0 at the final step.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps();
    let warmup = cfg.warmup_steps;
    if step < warmup {
        return cfg.lr_max * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return cfg.lr_max;
    }
    let progress = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
    cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Linear warmup of the sparsity coefficient across all of training.
pub fn lambda_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps();
    cfg.lambda_max * step.min(total) as f64 / total as f64
}

/// Draws one cut point log-uniformly from `[1, n)`.
pub fn log_uniform_cut(n: usize, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let m = (u * (n as f64).log2()).exp2().floor() as usize;
    m.clamp(1, n - 1)
}

/// `count - 1` distinct log-uniform cut points in `[1, n)`, sorted, followed
/// by `n` itself. Duplicates are redrawn.
pub fn sample_prefixes(n: usize, count: usize, seed: u64) -> Result<PrefixSet> {
    if count == 0 || n < count {
        return Err(Error::InvalidPrefixes(format!(
            "cannot draw {count} distinct prefixes from {n} latents"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cuts: Vec<usize> = Vec::with_capacity(count);
    while cuts.len() < count - 1 {
        let m = log_uniform_cut(n, &mut rng);
        if !cuts.contains(&m) {
            cuts.push(m);
        }
    }
    cuts.sort_unstable();
    cuts.push(n);
    PrefixSet::new(cuts, n)
}

/// Per-step seed derived from a run seed (SplitMix64 finalizer).
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Gradients,
    pub second: Gradients,
    pub lr: f64,
    pub lambda: f64,
}

impl OptimizerState {
    pub fn new(params: &SaeParams) -> Self {
        OptimizerState {
            step: 0,
            first: Gradients::zeros_like(params),
            second: Gradients::zeros_like(params),
            lr: 0.0,
            lambda: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<&TrainConfig> for AdamSettings {
    fn from(cfg: &TrainConfig) -> Self {
        AdamSettings {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

fn adam_update<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    settings: &AdamSettings,
    t: i32,
) {
    let c1 = 1.0 - settings.beta1.powi(t);
    let c2 = 1.0 - settings.beta2.powi(t);
    Zip::from(param).and(grad).and(m).and(v).for_each(|p, &g, m, v| {
        *m = settings.beta1 * *m + (1.0 - settings.beta1) * g;
        *v = settings.beta2 * *v + (1.0 - settings.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + settings.eps);
    });
}

/// One Adam update at `state.lr`. Decoder gradients are projected off their
/// columns before the moments see them; decoder columns are renormalized after
/// the update. `grads` is left holding the projected gradients.
pub fn adam_step(
    params: &mut SaeParams,
    grads: &mut Gradients,
    state: &mut OptimizerState,
    settings: &AdamSettings,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient { step: state.step });
    }
    sae::project_decoder_gradient(params, grads)?;
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let lr = state.lr;
    adam_update(&mut params.w_enc, &grads.w_enc, &mut state.first.w_enc, &mut state.second.w_enc, lr, settings, t);
    adam_update(&mut params.b_enc, &grads.b_enc, &mut state.first.b_enc, &mut state.second.b_enc, lr, settings, t);
    adam_update(&mut params.w_dec, &grads.w_dec, &mut state.first.w_dec, &mut state.second.w_dec, lr, settings, t);
    adam_update(&mut params.b_dec, &grads.b_dec, &mut state.first.b_dec, &mut state.second.b_dec, lr, settings, t);
    sae::normalize_decoder(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub lr: f64,
    pub lambda: f64,
    pub reconstruction: f64,
    pub sparsity: f64,
    pub total: f64,
    pub mean_l0: f64,
    /// Fraction of latents that never fired since the previous record.
    pub dead_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Serde(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(TrainHistory { records })
    }
}

/// What a single optimizer step observed.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub lambda: f64,
    pub loss: LossBreakdown,
    pub mean_l0: f64,
}

/// Step-at-a-time driver for one training run.
pub struct Trainer {
    cfg: TrainConfig,
    params: SaeParams,
    last_good: SaeParams,
    state: OptimizerState,
    batches: CyclingBatches,
    history: TrainHistory,
    fired: Vec<bool>,
    window: Vec<StepReport>,
    grads: Option<Gradients>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(cfg.n, dataset.dim(), cfg.seed);
        let batches = CyclingBatches::new(dataset, cfg.batch_size, cfg.total_examples, cfg.seed)?;
        Ok(Trainer {
            state: OptimizerState::new(&params),
            last_good: params.clone(),
            fired: vec![false; cfg.n],
            params,
            batches,
            history: TrainHistory::default(),
            window: Vec::new(),
            grads: None,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &SaeParams {
        &self.params
    }

    /// Parameters before the most recent step.
    pub fn last_good(&self) -> &SaeParams {
        &self.last_good
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn steps_done(&self) -> u64 {
        self.state.step
    }

    /// Projected gradients used by the most recent step.
    pub fn last_gradients(&self) -> Option<&Gradients> {
        self.grads.as_ref()
    }

    /// Runs one step. Returns `None` once every step has been taken.
    pub fn step(&mut self) -> Result<Option<StepReport>> {
        let Some(ids) = self.batches.next_ids() else {
            return Ok(None);
        };
        let batch = self.batches.dataset().gather(&ids)?.x;
        let step = self.state.step;
        let lr = lr_schedule(step, &self.cfg);
        let lambda = lambda_schedule(step, &self.cfg);
        let prefixes = match self.cfg.objective {
            Objective::Vanilla => None,
            Objective::Matryoshka => Some(sample_prefixes(
                self.cfg.n,
                self.cfg.prefix_count,
                step_seed(self.cfg.seed, step),
            )?),
        };
        let (loss, mut grads) = sae::backward(&self.params, batch.view(), lambda, prefixes.as_ref())?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let (_, codes) = sae::encode_batch(&self.params, batch.view())?;
        let mean_l0 = sae::mean_l0(codes.view());
        for row in codes.outer_iter() {
            for (f, &v) in self.fired.iter_mut().zip(row) {
                *f |= v > 0.0;
            }
        }

        self.last_good = self.params.clone();
        self.state.lr = lr;
        self.state.lambda = lambda;
        adam_step(&mut self.params, &mut grads, &mut self.state, &AdamSettings::from(&self.cfg))?;
        self.grads = Some(grads);

        let report = StepReport {
            step,
            lr,
            lambda,
            loss,
            mean_l0,
        };
        self.window.push(report.clone());
        let done = self.state.step;
        if done.is_multiple_of(self.cfg.log_every) || done == self.cfg.total_steps() {
            self.flush_window();
        }
        Ok(Some(report))
    }

    fn flush_window(&mut self) {
        if self.window.is_empty() {
            return;
        }
        let k = self.window.len() as f64;
        let last = self.window.last().unwrap();
        let mean = |f: fn(&StepReport) -> f64| self.window.iter().map(f).sum::<f64>() / k;
        let dead = self.fired.iter().filter(|&&f| !f).count() as f64 / self.fired.len() as f64;
        self.history.records.push(HistoryRecord {
            step: last.step,
            lr: last.lr,
            lambda: last.lambda,
            reconstruction: mean(|r| r.loss.reconstruction),
            sparsity: mean(|r| r.loss.sparsity),
            total: mean(|r| r.loss.total),
            mean_l0: mean(|r| r.mean_l0),
            dead_fraction: dead,
        });
        let r = self.history.records.last().unwrap();
        log::debug!(
            "step {} lr {:.3e} lambda {:.3e} loss {:.5} l0 {:.2} dead {:.3}",
            r.step,
            r.lr,
            r.lambda,
            r.total,
            r.mean_l0,
            r.dead_fraction
        );
        self.window.clear();
        self.fired.iter_mut().for_each(|f| *f = false);
    }

    /// Final parameters rounded to checkpoint precision.
    pub fn finish(mut self) -> TrainRun {
        self.flush_window();
        let mut params = self.params;
        params.round_to_f32();
        TrainRun {
            params,
            history: self.history,
            steps: self.state.step,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: SaeParams,
    pub history: TrainHistory,
    pub steps: u64,
}

/// A run that stopped early, with the last parameters known to be finite.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub step: u64,
    pub last_good: SaeParams,
    pub history: TrainHistory,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training aborted at step {}: {}", self.step, self.error)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> std::result::Result<TrainRun, TrainFailure> {
    let mut trainer = Trainer::new(cfg.clone(), dataset).map_err(|error| TrainFailure {
        error,
        step: 0,
        last_good: SaeParams::zeros(cfg.n, dataset.dim()),
        history: TrainHistory::default(),
    })?;
    loop {
        match trainer.step() {
            Ok(Some(_)) => {}
            Ok(None) => break,
            Err(error) => {
                let mut last_good = trainer.last_good().clone();
                last_good.round_to_f32();
                return Err(TrainFailure {
                    error,
                    step: trainer.steps_done(),
                    last_good,
                    history: trainer.history().clone(),
                });
            }
        }
    }
    Ok(trainer.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub learning_rates: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl SweepGrid {
    /// The canonical 6 x 4 grid used at full scale.
    pub fn reference() -> Self {
        SweepGrid {
            learning_rates: vec![3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.lambdas.is_empty() {
            return Err(Error::InvalidConfig("sweep grid lists must be non-empty".into()));
        }
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig("sparsity coefficients must be >= 0".into()));
        }
        Ok(())
    }

    /// Grid points in learning-rate-major order.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.learning_rates.len() * self.lambdas.len());
        for &lr in &self.learning_rates {
            for &lambda in &self.lambdas {
                let mut cfg = base.clone();
                cfg.lr_max = lr;
                cfg.lambda_max = lambda;
                out.push(cfg);
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct SweepRun {
    pub config: TrainConfig,
    pub outcome: std::result::Result<SweepResult, String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub run: TrainRun,
    pub val_nmse: f64,
    pub val_l0: f64,
}

/// Reconstruction NMSE and mean L0 of an SAE on a dataset.
pub fn validate_sae(params: &SaeParams, val: &Dataset) -> Result<(f64, f64)> {
    let batch = val.to_batch()?;
    let (_, codes) = sae::encode_batch(params, batch.x.view())?;
    let recon = sae::decode_batch(params, codes.view())?;
    Ok((metrics::nmse(batch.x.view(), recon.view())?, sae::mean_l0(codes.view())))
}

/// Trains one model per grid point. A failing run is recorded and the sweep
/// continues.
pub fn sweep(grid: &SweepGrid, base: &TrainConfig, train_set: &Dataset, val: &Dataset) -> Result<Vec<SweepRun>> {
    grid.validate()?;
    Ok(grid
        .configs(base)
        .into_iter()
        .map(|config| {
            let outcome = train(&config, train_set)
                .map_err(|f| f.to_string())
                .and_then(|run| {
                    let (val_nmse, val_l0) = validate_sae(&run.params, val).map_err(|e| e.to_string())?;
                    Ok(SweepResult { run, val_nmse, val_l0 })
                });
            SweepRun { config, outcome }
        })
        .collect())
}

/// Indices of points not dominated in (NMSE, L0), both minimized, sorted by
/// ascending L0. Exact duplicates keep the lowest index.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<usize> {
    let dominated = |i: usize| {
        let (ni, li) = points[i];
        points.iter().enumerate().any(|(j, &(nj, lj))| {
            j != i && ((nj <= ni && lj <= li && (nj < ni || lj < li)) || (nj == ni && lj == li && j < i))
        })
    };
    let mut front: Vec<usize> = (0..points.len())
        .filter(|&i| points[i].0.is_finite() && points[i].1.is_finite() && !dominated(i))
        .collect();
    front.sort_by(|&a, &b| points[a].1.total_cmp(&points[b].1).then(a.cmp(&b)));
    front
}
