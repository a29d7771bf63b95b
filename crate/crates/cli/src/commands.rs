use std::path::{Path, PathBuf};
use std::process::Command as Process;

use log::{info, warn};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use patchsae::baselines::{kmeans_fit, pca_fit, BaselineConfig};
use patchsae::metrics::{self, BiasInit, CodeMatrix, CodeMatrixBuilder, EvalSettings, LabeledCodes, MetricsReport, ProbeSettings};
use patchsae::model::{self, CodedSplit, Model, SaeCheckpoint};
use patchsae::store::{
    self, make_labeled_synthetic, make_synthetic, random_unit_dictionary, write_shard, Dataset, DatasetManifest,
    SyntheticSpec,
};
use patchsae::train::{self, pareto_frontier, SweepGrid, TrainConfig, TrainHistory};
use patchsae::Error;

use crate::args::{BaselineArg, BiasInitArg, EvalArgs, ExtractArgs, Global, ReportArgs, SweepArgs, SynthArgs, TrainArgs};
use crate::record::{Recorder, RunRecord};
use crate::{create_dir, manifest_path, read_text, to_json, write_file, CliError, CliResult};

pub struct SynthOutput {
    pub manifest: PathBuf,
    pub record: RunRecord,
}

pub fn synth(global: &Global, args: &SynthArgs) -> CliResult<SynthOutput> {
    let usage = |m: String| Err(CliError::Usage(m));
    if args.d == 0 || args.n_true == 0 || args.count == 0 {
        return usage("--d, --n-true and --count must be positive".into());
    }
    if args.s == 0 || args.s > args.n_true {
        return usage(format!("--s must lie in [1, {}]", args.n_true));
    }
    if !(args.noise >= 0.0) {
        return usage("--noise must be non-negative".into());
    }
    if let Some(c) = args.classes {
        if c == 0 || c >= args.n_true {
            return usage(format!("--classes must lie in [1, {})", args.n_true));
        }
    }
    let seed = global.seed.unwrap_or(0);
    let mut rec = Recorder::start("synth", seed);
    rec.config(&format!("{args:?}"));
    let dict = random_unit_dictionary(args.d, args.n_true, args.dict_seed.unwrap_or(seed));
    let spec = SyntheticSpec::new(args.s, args.count, args.noise, seed);
    let (dataset, codes) = match args.classes {
        Some(c) => make_labeled_synthetic(dict.view(), c, &spec)?,
        None => make_synthetic(dict.view(), &spec)?,
    };
    let out = &global.out;
    create_dir(out)?;
    let manifest = dataset.write(out, args.rows_per_shard, &DatasetManifest::synthetic())?;
    let written = DatasetManifest::load(&manifest)?;
    for name in written.shards.iter().chain(written.labels.iter()) {
        rec.output(&out.join(name))?;
    }
    rec.output(&manifest)?;

    let atoms = dict.t().mapv(|v| v as f32);
    let dict_path = out.join("dictionary.bin");
    write_shard(atoms.view(), args.d, &dict_path)?;
    rec.output(&dict_path)?;

    let mut builder = CodeMatrixBuilder::new(args.n_true);
    for start in (0..codes.rows()).step_by(4096) {
        let end = (start + 4096).min(codes.rows());
        let mut block = Array2::zeros((end - start, args.n_true));
        for i in start..end {
            for (a, v) in codes.row(i) {
                block[[i - start, a]] = v;
            }
        }
        builder.push_block(block.view());
    }
    let codes_path = out.join("codes.bin");
    rec.write(&codes_path, builder.finish().to_bytes())?;
    let (_, record) = rec.finish(out)?;
    info!("wrote {} rows to {}", args.count, manifest.display());
    Ok(SynthOutput { manifest, record })
}

pub fn extract(global: &Global, args: &ExtractArgs) -> CliResult<()> {
    let mut rec = Recorder::start("extract", global.seed.unwrap_or(0));
    rec.config(&args.passthrough.join(" "));
    create_dir(&global.out)?;
    let status = Process::new(&args.tool)
        .args(&args.passthrough)
        .arg("--out")
        .arg(&global.out)
        .status()
        .map_err(|e| CliError::Runtime(format!("cannot run extractor `{}`: {e}", args.tool)))?;
    if !status.success() {
        return Err(CliError::Runtime(format!("extractor `{}` failed with {status}", args.tool)));
    }
    let manifest = global.out.join("manifest.toml");
    let dataset = Dataset::open(&manifest)?;
    info!("extracted {} rows of width {}", dataset.count(), dataset.dim());
    rec.output(&manifest)?;
    rec.finish(&global.out)?;
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<(TrainConfig, String)> {
    let text = read_text(path)?;
    let mut cfg = TrainConfig::from_toml(&text)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok((cfg, text))
}

fn open_dataset(path: &Path) -> CliResult<(Dataset, PathBuf)> {
    let manifest = manifest_path(path);
    Ok((Dataset::open(&manifest)?, manifest))
}

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub record: RunRecord,
}

pub fn train(global: &Global, args: &TrainArgs) -> CliResult<TrainOutput> {
    let (dataset, manifest) = open_dataset(&args.data)?;
    if let Some(kind) = args.baseline {
        return fit_baseline(global, args, kind, &dataset, &manifest);
    }
    let config_path = args.config.as_ref().expect("clap requires --config without --baseline");
    let (cfg, _) = load_config(config_path, global.seed)?;
    let mut rec = Recorder::start("train", cfg.seed);
    let resolved = cfg.to_toml();
    rec.config(&resolved);
    rec.input_file(config_path)?;
    rec.input_dataset(&manifest)?;
    let out = &global.out;
    create_dir(out)?;
    rec.write(&out.join("config.toml"), &resolved)?;
    info!("training {} for {} steps", cfg.tag(), cfg.total_steps());
    match train::train(&cfg, &dataset) {
        Ok(run) => {
            let checkpoint = out.join("checkpoint.bin");
            let model = sae_model(&cfg, run.params, run.steps);
            rec.write(&checkpoint, model.to_bytes())?;
            rec.write(&out.join("history.jsonl"), run.history.to_jsonl())?;
            let (_, record) = rec.finish(out)?;
            Ok(TrainOutput { checkpoint, record })
        }
        Err(failure) => {
            let path = out.join("last_good.bin");
            rec.write(&path, sae_model(&cfg, failure.last_good.clone(), failure.step).to_bytes())?;
            rec.write(&out.join("history.jsonl"), failure.history.to_jsonl())?;
            rec.finish(out)?;
            eprintln!("last good checkpoint: {}", path.display());
            Err(CliError::Runtime(failure.to_string()))
        }
    }
}

fn sae_model(cfg: &TrainConfig, params: patchsae::sae::SaeParams, step: u64) -> Model {
    Model::Sae(SaeCheckpoint {
        params,
        objective: cfg.objective,
        prefix_count: match cfg.objective {
            patchsae::sae::Objective::Vanilla => 1,
            patchsae::sae::Objective::Matryoshka => cfg.prefix_count,
        },
        step,
    })
}

fn fit_baseline(
    global: &Global,
    args: &TrainArgs,
    kind: BaselineArg,
    dataset: &Dataset,
    manifest: &Path,
) -> CliResult<TrainOutput> {
    let size = args.size.expect("clap requires --size with --baseline");
    if args.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    let cfg = BaselineConfig {
        batch_size: args.batch_size,
        iterations: args.iterations,
        seed: global.seed.unwrap_or(0),
    };
    let mut rec = Recorder::start("train", cfg.seed);
    let description = format!("{kind:?} size={size} {}", serde_json::to_string(&cfg).expect("serializable"));
    rec.config(&description);
    rec.input_dataset(manifest)?;
    let model = match kind {
        BaselineArg::Kmeans => Model::KMeans(kmeans_fit(dataset, size, &cfg)?),
        BaselineArg::Pca => Model::Pca(pca_fit(dataset, size, &cfg)?),
    };
    let out = &global.out;
    create_dir(out)?;
    let checkpoint = out.join("checkpoint.bin");
    rec.write(&checkpoint, model.to_bytes())?;
    let (_, record) = rec.finish(out)?;
    Ok(TrainOutput { checkpoint, record })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub learning_rates: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub base: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub tag: String,
    pub config_digest: String,
    pub data_digest: String,
    pub val_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_nmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_l0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub tag: String,
    /// Macro-averaged best-latent training probe loss per successful run.
    pub losses: Vec<(String, f64)>,
}

pub struct SweepOutput {
    pub entries: Vec<SweepEntry>,
    /// Indices into `entries`, ascending L0.
    pub frontier: Vec<usize>,
    /// Tags of runs trained by this invocation.
    pub trained: Vec<String>,
    pub selection: Option<Selection>,
    pub record: RunRecord,
}

fn completed(dir: &Path, expected: &SweepEntry) -> Option<SweepEntry> {
    let text = std::fs::read_to_string(dir.join("result.json")).ok()?;
    let entry: SweepEntry = serde_json::from_str(&text).ok()?;
    let same_inputs = entry.config_digest == expected.config_digest
        && entry.data_digest == expected.data_digest
        && entry.val_digest == expected.val_digest;
    let digest = store::file_digest(&dir.join("checkpoint.bin")).ok()?;
    (same_inputs && entry.error.is_none() && entry.checkpoint_digest.as_deref() == Some(digest.as_str())).then_some(entry)
}

fn run_grid_point(cfg: &TrainConfig, dir: &Path, mut entry: SweepEntry, train_set: &Dataset, val: &Dataset) -> CliResult<SweepEntry> {
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    match train::train(cfg, train_set) {
        Ok(run) => {
            let bytes = sae_model(cfg, run.params.clone(), run.steps).to_bytes();
            write_file(&dir.join("checkpoint.bin"), &bytes)?;
            write_file(&dir.join("history.jsonl"), run.history.to_jsonl())?;
            let (nmse, l0) = train::validate_sae(&run.params, val)?;
            entry.checkpoint_digest = Some(store::hex_digest(&bytes));
            entry.val_nmse = Some(nmse);
            entry.val_l0 = Some(l0);
        }
        Err(failure) => {
            warn!("{}: {failure}", entry.tag);
            write_file(
                &dir.join("last_good.bin"),
                sae_model(cfg, failure.last_good.clone(), failure.step).to_bytes(),
            )?;
            write_file(&dir.join("history.jsonl"), failure.history.to_jsonl())?;
            entry.error = Some(failure.to_string());
        }
    }
    write_file(&dir.join("result.json"), to_json(&entry))?;
    Ok(entry)
}

pub fn sweep(global: &Global, args: &SweepArgs) -> CliResult<SweepOutput> {
    if args.parallel == 0 {
        return Err(CliError::Usage("--parallel must be positive".into()));
    }
    let text = read_text(&args.grid)?;
    let mut file: SweepFile = toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    if let Some(seed) = global.seed {
        file.base.seed = seed;
    }
    file.base.validate()?;
    let grid = SweepGrid {
        learning_rates: file.learning_rates.clone(),
        lambdas: file.lambdas.clone(),
    };
    grid.validate()?;

    let mut rec = Recorder::start("sweep", file.base.seed);
    rec.config(&toml::to_string(&file).map_err(|e| Error::Serde(e.to_string()))?);
    rec.input_file(&args.grid)?;
    let (train_set, train_manifest) = open_dataset(&args.data)?;
    let data_digest = rec.input_dataset(&train_manifest)?;
    let (val, val_digest) = match &args.val {
        Some(p) => {
            let (ds, m) = open_dataset(p)?;
            let digest = rec.input_dataset(&m)?;
            (ds, digest)
        }
        None => (train_set.clone(), data_digest.clone()),
    };

    let out = &global.out;
    create_dir(&out.join("runs"))?;
    let configs = grid.configs(&file.base);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.parallel)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let results: Vec<CliResult<(SweepEntry, bool)>> = pool.install(|| {
        configs
            .par_iter()
            .map(|cfg| {
                let tag = cfg.tag();
                let dir = out.join("runs").join(&tag);
                let entry = SweepEntry {
                    tag: tag.clone(),
                    config_digest: store::hex_digest(cfg.to_toml().as_bytes()),
                    data_digest: data_digest.clone(),
                    val_digest: val_digest.clone(),
                    checkpoint_digest: None,
                    val_nmse: None,
                    val_l0: None,
                    error: None,
                };
                if let Some(done) = completed(&dir, &entry) {
                    info!("{tag}: already complete");
                    return Ok((done, false));
                }
                info!("{tag}: training");
                run_grid_point(cfg, &dir, entry, &train_set, &val).map(|e| (e, true))
            })
            .collect()
    });
    let mut entries = Vec::with_capacity(results.len());
    let mut trained = Vec::new();
    for r in results {
        let (entry, fresh) = r?;
        if fresh {
            trained.push(entry.tag.clone());
        }
        entries.push(entry);
    }

    let ok: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].error.is_none()).collect();
    let points: Vec<(f64, f64)> = ok
        .iter()
        .map(|&i| (entries[i].val_nmse.unwrap(), entries[i].val_l0.unwrap()))
        .collect();
    let frontier: Vec<usize> = pareto_frontier(&points).into_iter().map(|j| ok[j]).collect();
    rec.write(&out.join("sweep.json"), to_json(&entries))?;
    let frontier_entries: Vec<&SweepEntry> = frontier.iter().map(|&i| &entries[i]).collect();
    rec.write(&out.join("frontier.json"), to_json(&frontier_entries))?;

    let selection = if args.select {
        let s = select_runs(out, &entries, &ok, &train_set, args.row_budget, file.base.seed)?;
        rec.write(&out.join("selection.json"), to_json(&s))?;
        Some(s)
    } else {
        None
    };
    let (_, record) = rec.finish(out)?;
    Ok(SweepOutput {
        entries,
        frontier,
        trained,
        selection,
        record,
    })
}

fn select_runs(
    out: &Path,
    entries: &[SweepEntry],
    ok: &[usize],
    train_set: &Dataset,
    row_budget: usize,
    seed: u64,
) -> CliResult<Selection> {
    let num_classes = model::shared_vocabulary(train_set, train_set)?;
    let ids = model::subsample_rows(train_set.count(), row_budget, seed);
    let probe = ProbeSettings::default();
    let mut losses = Vec::new();
    for &i in ok {
        let tag = &entries[i].tag;
        let model = Model::load(&out.join("runs").join(tag).join("checkpoint.bin"))?;
        let split = model::encode_rows(&model, train_set, &ids)?;
        let codes = LabeledCodes {
            codes: &split.codes,
            labels: &split.labels,
        };
        losses.push((tag.clone(), metrics::mean_best_probe_loss(&codes, num_classes, &probe)));
    }
    let best = losses
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (i, (_, l))| match best {
            Some((_, b)) if *l >= b => best,
            _ => Some((i, *l)),
        })
        .ok_or_else(|| CliError::Runtime("no successful runs to select from".into()))?;
    Ok(Selection {
        tag: losses[best.0].0.clone(),
        losses,
    })
}

/// Everything needed to rebuild a report from stored codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub name: String,
    pub model_kind: model::ModelKind,
    pub checkpoint_digest: String,
    pub num_classes: usize,
    pub settings: EvalSettings,
    pub train_count: u64,
    pub train_nmse: f64,
    pub train_mean_l0: f64,
    pub val_nmse: f64,
    pub val_mean_l0: f64,
}

pub struct EvalOutput {
    pub report: MetricsReport,
    pub record: RunRecord,
}

fn eval_settings(args: &EvalArgs, seed: u64) -> CliResult<EvalSettings> {
    if args.k == 0 {
        return Err(CliError::Usage("--k must be positive".into()));
    }
    if !(0.0..=1.0).contains(&args.tau) {
        return Err(CliError::Usage("--tau must lie in [0, 1]".into()));
    }
    if args.row_budget == 0 {
        return Err(CliError::Usage("--row-budget must be positive".into()));
    }
    Ok(EvalSettings {
        k: args.k,
        tau: args.tau,
        probe: ProbeSettings {
            bias_init: match args.bias_init {
                BiasInitArg::LogOdds => BiasInit::LogOdds,
                BiasInitArg::Prevalence => BiasInit::Prevalence,
            },
            ..ProbeSettings::default()
        },
        row_budget: args.row_budget,
        seed,
    })
}

pub fn eval(global: &Global, args: &EvalArgs) -> CliResult<EvalOutput> {
    let seed = global.seed.unwrap_or(0);
    let settings = eval_settings(args, seed)?;
    let mut rec = Recorder::start("eval", seed);
    rec.config(&serde_json::to_string(&settings).expect("serializable"));
    let checkpoint_digest = rec.input_file(&args.checkpoint)?;
    let model = Model::load(&args.checkpoint)?;
    let (train_set, train_manifest) = open_dataset(&args.train)?;
    let (val, val_manifest) = open_dataset(&args.val)?;
    rec.input_dataset(&train_manifest)?;
    rec.input_dataset(&val_manifest)?;
    let num_classes = model::shared_vocabulary(&train_set, &val)?;
    let evaluation = model::evaluate_model(&model, &train_set, &val, &settings)?;
    let name = args.name.clone().unwrap_or_else(|| kind_name(model.kind()).to_string());

    let out = &global.out;
    create_dir(out)?;
    rec.write(&out.join("codes-train.bin"), evaluation.train.codes.to_bytes())?;
    rec.write(&out.join("codes-val.bin"), evaluation.val.codes.to_bytes())?;
    store::write_labels(&out.join("labels-train.u16"), &evaluation.train.labels)?;
    rec.output(&out.join("labels-train.u16"))?;
    store::write_labels(&out.join("labels-val.u16"), &evaluation.val.labels)?;
    rec.output(&out.join("labels-val.u16"))?;
    let meta = EvalMeta {
        name: name.clone(),
        model_kind: model.kind(),
        checkpoint_digest,
        num_classes,
        settings,
        train_count: train_set.count(),
        train_nmse: evaluation.train.nmse,
        train_mean_l0: evaluation.train.mean_l0,
        val_nmse: evaluation.val.nmse,
        val_mean_l0: evaluation.val.mean_l0,
    };
    rec.write(&out.join("eval.json"), to_json(&meta))?;
    rec.write(&out.join("report.json"), to_json(&evaluation.report))?;
    rec.write(&out.join("report.txt"), render_report(&[(name, &evaluation.report)]))?;
    let (_, record) = rec.finish(out)?;
    println!("{}", MetricsReport::render_table(&[(meta.name.clone(), &evaluation.report)]));
    Ok(EvalOutput {
        report: evaluation.report,
        record,
    })
}

fn kind_name(kind: model::ModelKind) -> &'static str {
    match kind {
        model::ModelKind::Sae => "SAE",
        model::ModelKind::Kmeans => "k-Means",
        model::ModelKind::Pca => "PCA",
    }
}

fn render_report(rows: &[(String, &MetricsReport)]) -> String {
    let mut text = MetricsReport::render_table(rows);
    for (name, report) in rows {
        text.push_str(&format!("\n{name}\n{}", report.render_per_class()));
    }
    text
}

/// A stored evaluation reloaded from disk.
pub struct StoredEval {
    pub meta: EvalMeta,
    pub train: CodedSplit,
    pub val: CodedSplit,
    pub stored: MetricsReport,
}

pub fn load_eval(dir: &Path) -> CliResult<StoredEval> {
    let meta: EvalMeta =
        serde_json::from_str(&read_text(&dir.join("eval.json"))?).map_err(|e| Error::Serde(e.to_string()))?;
    let stored: MetricsReport =
        serde_json::from_str(&read_text(&dir.join("report.json"))?).map_err(|e| Error::Serde(e.to_string()))?;
    let split = |codes: &str, labels: &str, row_ids: Vec<u64>, nmse: f64, mean_l0: f64| -> CliResult<CodedSplit> {
        Ok(CodedSplit {
            codes: CodeMatrix::load(&dir.join(codes))?,
            labels: store::read_labels(&dir.join(labels))?,
            row_ids,
            nmse,
            mean_l0,
        })
    };
    let train_ids = model::subsample_rows(meta.train_count, meta.settings.row_budget, meta.settings.seed);
    let train = split("codes-train.bin", "labels-train.u16", train_ids, meta.train_nmse, meta.train_mean_l0)?;
    let val_rows = {
        let codes = CodeMatrix::load(&dir.join("codes-val.bin"))?;
        codes.rows() as u64
    };
    let val = split("codes-val.bin", "labels-val.u16", (0..val_rows).collect(), meta.val_nmse, meta.val_mean_l0)?;
    Ok(StoredEval {
        meta,
        train,
        val,
        stored,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub source: String,
    pub model_kind: model::ModelKind,
    pub report: MetricsReport,
    /// The recomputed report equals the one stored by `eval`.
    pub matches_stored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_probe_loss: Option<f64>,
    pub selected: bool,
}

pub struct ReportOutput {
    pub rows: Vec<ReportRow>,
    pub table: String,
    pub record: RunRecord,
}

pub fn report(global: &Global, args: &ReportArgs) -> CliResult<ReportOutput> {
    let mut rec = Recorder::start("report", global.seed.unwrap_or(0));
    rec.config(&format!("select={}", args.select));
    let mut rows = Vec::new();
    for dir in &args.evals {
        for file in ["eval.json", "codes-train.bin", "codes-val.bin"] {
            rec.input_file(&dir.join(file))?;
        }
        let stored = load_eval(dir)?;
        let report = model::report_from_codes(&stored.train, &stored.val, stored.meta.num_classes, &stored.meta.settings)?;
        let train_probe_loss = args.select.then(|| {
            let codes = LabeledCodes {
                codes: &stored.train.codes,
                labels: &stored.train.labels,
            };
            metrics::mean_best_probe_loss(&codes, stored.meta.num_classes, &stored.meta.settings.probe)
        });
        rows.push(ReportRow {
            name: stored.meta.name.clone(),
            source: dir.display().to_string(),
            model_kind: stored.meta.model_kind,
            matches_stored: report == stored.stored,
            report,
            train_probe_loss,
            selected: false,
        });
    }
    if args.select {
        for kind in [model::ModelKind::Kmeans, model::ModelKind::Pca, model::ModelKind::Sae] {
            let best = rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.model_kind == kind)
                .fold(None::<(usize, f64)>, |best, (i, r)| {
                    let l = r.train_probe_loss.unwrap_or(f64::INFINITY);
                    match best {
                        Some((_, b)) if l >= b => best,
                        _ => Some((i, l)),
                    }
                });
            if let Some((i, _)) = best {
                rows[i].selected = true;
            }
        }
    }
    let labelled: Vec<(String, &MetricsReport)> = rows
        .iter()
        .map(|r| (if r.selected { format!("{} *", r.name) } else { r.name.clone() }, &r.report))
        .collect();
    let table = render_report(&labelled);
    let out = &global.out;
    create_dir(out)?;
    rec.write(&out.join("report.txt"), &table)?;
    rec.write(&out.join("report.json"), to_json(&rows))?;
    let (_, record) = rec.finish(out)?;
    println!("{}", MetricsReport::render_table(&labelled));
    for r in rows.iter().filter(|r| !r.matches_stored) {
        warn!("{}: recomputed report differs from the stored one", r.source);
    }
    Ok(ReportOutput { rows, table, record })
}

/// Loads a history file written by `train`.
pub fn load_history(path: &Path) -> CliResult<TrainHistory> {
    Ok(TrainHistory::from_jsonl(&read_text(path)?)?)
}
