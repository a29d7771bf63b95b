//! Browser bindings. Each export takes plain numbers and returns a JSON
//! string; the pure-Rust functions behind them are tested natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use patchsae::metrics::{self, ProbeSettings};
use patchsae::sae::Objective;
use patchsae::store::{make_synthetic, random_unit_dictionary, SyntheticSpec};
use patchsae::train::{lambda_schedule, lr_schedule, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleCurve {
    pub steps: Vec<u64>,
    pub lr: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Learning-rate and sparsity-coefficient schedules sampled at `points`
/// evenly spaced steps.
pub fn schedule_curve(lr_max: f64, lambda_max: f64, warmup: u64, total_steps: u64, points: usize) -> Result<ScheduleCurve, String> {
    let mut cfg = TrainConfig::reference(Objective::Vanilla, lr_max, lambda_max);
    cfg.batch_size = 1;
    cfg.total_examples = total_steps;
    cfg.warmup_steps = warmup;
    cfg.validate().map_err(|e| e.to_string())?;
    let points = points.max(2);
    let steps: Vec<u64> = (0..points)
        .map(|i| (i as u64 * total_steps) / (points as u64 - 1))
        .collect();
    Ok(ScheduleCurve {
        lr: steps.iter().map(|&s| lr_schedule(s, &cfg)).collect(),
        lambda: steps.iter().map(|&s| lambda_schedule(s, &cfg)).collect(),
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantedRun {
    pub steps: Vec<u64>,
    pub loss: Vec<f64>,
    pub l0: Vec<f64>,
    /// Best greedy-matched |cosine| per planted atom.
    pub atom_cosines: Vec<f64>,
    pub recovered: f64,
    pub nmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedSettings {
    pub d: usize,
    pub n_true: usize,
    pub n: usize,
    pub s: usize,
    pub matryoshka: bool,
    pub lr: f64,
    pub lambda: f64,
    pub steps: u64,
    pub seed: u64,
}

/// Trains an SAE on planted-dictionary data and reports how many atoms it
/// recovered at |cosine| >= 0.9.
pub fn planted_run(p: &PlantedSettings) -> Result<PlantedRun, String> {
    let err = |e: patchsae::Error| e.to_string();
    let dict = random_unit_dictionary(p.d, p.n_true, p.seed);
    let spec = SyntheticSpec::new(p.s, 20_000, 0.01, p.seed.wrapping_add(1));
    let (data, _) = make_synthetic(dict.view(), &spec).map_err(err)?;
    let batch = 128;
    let mut cfg = TrainConfig::reference(
        if p.matryoshka { Objective::Matryoshka } else { Objective::Vanilla },
        p.lr,
        p.lambda,
    );
    cfg.n = p.n;
    cfg.batch_size = batch;
    cfg.total_examples = p.steps * batch as u64;
    cfg.warmup_steps = (p.steps / 20).min(p.steps.saturating_sub(1));
    cfg.seed = p.seed;
    cfg.log_every = (p.steps / 50).max(1);
    let mut trainer = Trainer::new(cfg, &data).map_err(err)?;
    while trainer.step().map_err(err)?.is_some() {}
    let run = trainer.finish();
    let matches = metrics::match_dictionary(dict.view(), run.params.w_dec.view());
    let atom_cosines: Vec<f64> = matches.iter().map(|m| m.2).collect();
    let recovered = atom_cosines.iter().filter(|&&c| c >= 0.9).count() as f64 / p.n_true as f64;
    let (nmse, _) = patchsae::train::validate_sae(&run.params, &data).map_err(err)?;
    Ok(PlantedRun {
        steps: run.history.records.iter().map(|r| r.step).collect(),
        loss: run.history.records.iter().map(|r| r.total).collect(),
        l0: run.history.records.iter().map(|r| r.mean_l0).collect(),
        atom_cosines,
        recovered,
        nmse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeDemo {
    pub w: f64,
    pub b: f64,
    pub loss: f64,
    pub bias_loss: f64,
    pub r: f64,
    pub ap: f64,
    /// (recall, precision) at each positive in rank order.
    pub pr_curve: Vec<(f64, f64)>,
}

/// Scores for `rows` examples: positives drawn from N(separation, 1),
/// negatives from N(0, 1); fits the 1-D probe and ranks by its output.
pub fn probe_demo(separation: f64, prevalence: f64, rows: usize, seed: u64) -> Result<ProbeDemo, String> {
    if !(0.0..1.0).contains(&prevalence) || prevalence == 0.0 || rows < 2 {
        return Err("prevalence must lie in (0, 1) and rows must be at least 2".into());
    }
    let positives = ((rows as f64 * prevalence).round() as usize).clamp(1, rows - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
    let y: Vec<bool> = (0..rows).map(|i| i < positives).collect();
    let z: Vec<f64> = y
        .iter()
        .map(|&pos| noise.sample(&mut rng) + if pos { separation } else { 0.0 })
        .collect();
    let fit = metrics::fit_1d_probe(&z, &y, &ProbeSettings::default()).ok_or("single-class labels")?;
    let scores: Vec<f64> = z.iter().map(|&v| fit.w * v + fit.b).collect();
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut pr_curve = Vec::with_capacity(positives);
    let mut hits = 0;
    for (rank, &i) in order.iter().enumerate() {
        if y[i] {
            hits += 1;
            pr_curve.push((hits as f64 / positives as f64, hits as f64 / (rank + 1) as f64));
        }
    }
    Ok(ProbeDemo {
        w: fit.w,
        b: fit.b,
        loss: fit.loss,
        bias_loss: fit.bias_loss,
        r: fit.r,
        ap: metrics::average_precision(&scores, &y),
        pr_curve,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("serializable"))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn schedules(lr_max: f64, lambda_max: f64, warmup: u32, total_steps: u32, points: u32) -> Result<String, JsValue> {
    to_js(schedule_curve(lr_max, lambda_max, warmup as u64, total_steps as u64, points as usize))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn train_planted(
    d: u32,
    n_true: u32,
    n: u32,
    s: u32,
    matryoshka: bool,
    lr: f64,
    lambda: f64,
    steps: u32,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(planted_run(&PlantedSettings {
        d: d as usize,
        n_true: n_true as usize,
        n: n as usize,
        s: s as usize,
        matryoshka,
        lr,
        lambda,
        steps: steps as u64,
        seed: seed as u64,
    }))
}

#[wasm_bindgen]
pub fn probe(separation: f64, prevalence: f64, rows: u32, seed: u32) -> Result<String, JsValue> {
    to_js(probe_demo(separation, prevalence, rows as usize, seed as u64))
}
