//! The subcommands. Each one writes its artifacts and a `config.resolved`
//! snapshot under `paths.out_dir`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use meter_core::checkpoint::{config_digest, Checkpoint};
use meter_core::config::{Objective, ObjectiveSet};
use meter_core::data::{fit_codebook, generate_corpus, Codebook, PairRecord};
use meter_core::model::Model;
use meter_core::train::{evaluate, train, Dataset, EvalTask, MetricsRecord, TrainConfig};
use meter_core::Tensor;
use serde::Serialize;
use serde_json::{json, Value};

use crate::attention::{attention_maps, write_maps};
use crate::bench::{benchmark_forward, median, parity, time_forward, BenchInput, InstantClock};
use crate::config::{vocabulary, ConfigError, RunConfig};
use crate::io::{read_corpus, write_corpus};
use crate::metrics::{record_json, MetricsWriter};

pub const SNAPSHOT: &str = "config.resolved";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";
pub const FINETUNED: &str = "finetuned.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    Finetune,
    Eval,
    Ablate,
    Benchmark,
    ExportAttn,
}

/// Failure split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

/// Checks what a command needs from the config before any work starts.
pub fn preflight(cmd: Command, cfg: &RunConfig) -> std::result::Result<(), ConfigError> {
    let needs_checkpoint = matches!(cmd, Command::Finetune | Command::Eval | Command::ExportAttn);
    if needs_checkpoint && cfg.paths.checkpoint.is_none() {
        return Err(ConfigError::Invariant("this command needs paths.checkpoint".into()));
    }
    if cmd == Command::Eval && cfg.eval.tasks.is_empty() {
        return Err(ConfigError::Invariant("eval.tasks is empty".into()));
    }
    if cmd == Command::Ablate {
        for point in cfg.grid_points() {
            for (k, _) in &point {
                if k != "train.lrs" && k.starts_with("ablate.") {
                    return Err(ConfigError::Invariant(format!("axis {k} cannot vary ablation settings")));
                }
            }
        }
    }
    Ok(())
}

pub fn run(cmd: Command, cfg: &RunConfig) -> std::result::Result<(), CliError> {
    preflight(cmd, cfg)?;
    match cmd {
        Command::GenData => gen_data(cfg).map(drop),
        Command::Pretrain => pretrain(cfg).map(drop),
        Command::Finetune => finetune(cfg).map(drop),
        Command::Eval => eval(cfg).map(drop),
        Command::Ablate => ablate(cfg).map(drop),
        Command::Benchmark => benchmark(cfg).map(drop),
        Command::ExportAttn => export_attn(cfg).map(drop),
    }?;
    Ok(())
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.paths.out_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(SNAPSHOT), cfg.render())?;
    Ok(dir)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// The configured corpus: read from `paths.manifest` when set, otherwise
/// generated from `data.seed` at `resolution`.
pub fn load_records(cfg: &RunConfig, resolution: usize, qa: bool) -> Result<Vec<PairRecord>> {
    match &cfg.paths.manifest {
        Some(m) => read_corpus(m),
        None => Ok(generate_corpus(cfg.data.seed, cfg.data.corpus_size, resolution, qa)?),
    }
}

/// Codebook fitted on every patch of `records`.
pub fn fit_patch_codebook(cfg: &RunConfig, records: &[PairRecord]) -> Result<Codebook> {
    let p = cfg.model.vision.patch_size;
    let mut data = Vec::new();
    let mut rows = 0;
    for r in records {
        let t = r.image.patches(p)?;
        rows += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    let points = Tensor::new(vec![rows, p * p * 3], data)?;
    Ok(fit_codebook(&points, cfg.model.codebook_size, cfg.data.seed, cfg.data.kmeans_iters)?.codebook)
}

pub fn build_dataset(cfg: &RunConfig, records: &[PairRecord], objectives: &ObjectiveSet) -> Result<Dataset> {
    let codebook = objectives
        .contains(Objective::MimDc)
        .then(|| fit_patch_codebook(cfg, records))
        .transpose()?;
    Ok(Dataset::from_records(records, &vocabulary(), cfg.model.vision.patch_size, codebook.as_ref())?)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_store(&model.store, &model.config.canonical()).encode();
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// A model of `cfg.model` with weights from `path`. The checkpoint must have
/// been written from the same architecture.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt = Checkpoint::decode(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let canonical = cfg.model.canonical();
    anyhow::ensure!(
        ckpt.config_digest == config_digest(&canonical),
        "{} was saved from a different model config",
        path.display()
    );
    let mut model = Model::new(cfg.model.clone())?;
    ckpt.load_into(&mut model.store)?;
    Ok(model)
}

pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = prepare_out_dir(cfg)?;
    let records = generate_corpus(cfg.data.seed, cfg.data.corpus_size, cfg.data.resolution, cfg.data.qa)?;
    write_corpus(dir, &records)
}

/// Trains with `tc`, streaming the metrics log, and saves the checkpoint.
fn train_and_save(
    model: &mut Model,
    data: &Dataset,
    tc: &TrainConfig,
    dir: &Path,
    ckpt_name: &str,
) -> Result<Vec<MetricsRecord>> {
    let mut log = MetricsWriter::create(&dir.join(METRICS))?;
    let mut write_err = None;
    let clock = InstantClock::start();
    let records = train(model, data, tc, &clock, |r| {
        if let Err(e) = log.write(r) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    save_checkpoint(model, &dir.join(ckpt_name))?;
    Ok(records)
}

pub struct TrainOutcome {
    pub model: Model,
    pub data: Dataset,
    pub records: Vec<MetricsRecord>,
}

pub fn pretrain(cfg: &RunConfig) -> Result<TrainOutcome> {
    let dir = prepare_out_dir(cfg)?;
    let records = load_records(cfg, cfg.data.resolution, cfg.data.qa)?;
    let data = build_dataset(cfg, &records, &cfg.train.objectives)?;
    let mut model = Model::new(cfg.model.clone())?;
    let records = train_and_save(&mut model, &data, &cfg.train, dir, CHECKPOINT)?;
    Ok(TrainOutcome { model, data, records })
}

/// Training settings of the answer-classification finetune.
pub fn finetune_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        steps: cfg.finetune.steps,
        lr_bottom: cfg.finetune.lr_bottom,
        lr_top: cfg.finetune.lr_top,
        objectives: ObjectiveSet::new([Objective::Vqa]),
        ..cfg.train.clone()
    }
}

/// Trains the answer head and everything below it starting from
/// `paths.checkpoint`, on question-answer data at `finetune.resolution`.
pub fn finetune(cfg: &RunConfig) -> Result<TrainOutcome> {
    let ckpt = cfg.paths.checkpoint.as_ref().context("paths.checkpoint is required")?;
    let mut model = load_model(cfg, ckpt)?;
    let dir = prepare_out_dir(cfg)?;
    let tc = finetune_config(cfg);
    let records = load_records(cfg, cfg.finetune.resolution, true)?;
    let data = build_dataset(cfg, &records, &tc.objectives)?;
    let records = train_and_save(&mut model, &data, &tc, dir, FINETUNED)?;
    Ok(TrainOutcome { model, data, records })
}

pub fn eval(cfg: &RunConfig) -> Result<BTreeMap<String, f64>> {
    let ckpt = cfg.paths.checkpoint.as_ref().context("paths.checkpoint is required")?;
    let model = load_model(cfg, ckpt)?;
    let dir = prepare_out_dir(cfg)?;
    let qa = cfg.data.qa || cfg.eval.tasks.contains(&EvalTask::Vqa);
    let records = load_records(cfg, cfg.data.resolution, qa)?;
    let data = build_dataset(cfg, &records, &ObjectiveSet::new([]))?;
    let mut out = BTreeMap::new();
    for &task in &cfg.eval.tasks {
        let name = match task {
            EvalTask::Itm => "itm_acc",
            EvalTask::Mlm => "mlm_acc",
            EvalTask::Vqa => "vqa_acc",
        };
        out.insert(name.to_string(), evaluate(&model, &data, task, cfg.train.seed, cfg.train.batch_size)?);
    }
    write_json(&dir.join("eval.json"), &out)?;
    println!("{}", serde_json::to_string(&out)?);
    Ok(out)
}

/// Named benchmark configs: the depth sweep for every kind, then both kinds
/// at their default depths.
pub fn bench_configs(cfg: &RunConfig) -> Vec<(String, meter_core::config::ModelConfig)> {
    let mut out = Vec::new();
    let mut push = |kind, layers: usize, name: String| {
        let mut m = cfg.model.clone();
        m.fusion.kind = kind;
        m.fusion.layers = layers;
        out.push((name, m));
    };
    for &kind in &cfg.bench.kinds {
        for &d in &cfg.bench.depths {
            push(kind, d, format!("{kind}_L{d}"));
        }
    }
    for &kind in &cfg.bench.kinds {
        push(kind, kind.default_layers(), format!("{kind}_M{}", kind.default_layers()));
    }
    out
}

pub struct BenchOutcome {
    pub reports: Vec<crate::bench::BenchReport>,
    pub parity: crate::bench::Parity,
}

/// Writes `bench.jsonl` (one record per config) and `parity.json` (both
/// kinds at default depth on the `paper_base` shapes).
pub fn benchmark(cfg: &RunConfig) -> Result<BenchOutcome> {
    let dir = prepare_out_dir(cfg)?;
    let records = load_records(cfg, cfg.data.resolution, true)?;
    let data = build_dataset(cfg, &records, &ObjectiveSet::new([]))?;
    let inp = BenchInput::from_dataset(&data, cfg.bench.batch)?;
    let reports = benchmark_forward(&bench_configs(cfg), &inp, cfg.bench.repeats, cfg.bench.warmup)?;
    let mut lines = String::new();
    for r in &reports {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(dir.join("bench.jsonl"), lines)?;
    let base = meter_core::config::ModelConfig::paper_base(vocabulary().len());
    let parity = parity(&base)?;
    write_json(&dir.join("parity.json"), &parity)?;
    Ok(BenchOutcome { reports, parity })
}

/// One row of the ablation summary.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct AblationRow {
    pub index: usize,
    pub settings: BTreeMap<String, String>,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub params: Option<usize>,
    pub median_ms: Option<f64>,
    /// Final logged record of the point's run.
    pub metrics: BTreeMap<String, Value>,
}

fn run_point(cfg: &RunConfig, point: &[(String, String)], dir: PathBuf) -> Result<(usize, f64, BTreeMap<String, Value>)> {
    let mut pc = cfg.with_point(point).map_err(anyhow::Error::from)?;
    pc.paths.out_dir = dir;
    let out = pretrain(&pc)?;
    let inp = BenchInput::from_dataset(&out.data, cfg.bench.batch.min(out.data.len()))?;
    let t = time_forward(&out.model, &inp, cfg.bench.repeats, cfg.bench.warmup)?;
    let last = out.records.last().map(record_json).unwrap_or_else(|| json!({}));
    let metrics = last.as_object().cloned().unwrap_or_default().into_iter().collect();
    Ok((out.model.num_parameters(), median(&t.total_ms), metrics))
}

/// Runs every grid point under `out_dir/point_NNN` and writes
/// `summary.jsonl` (grid order) and `summary.txt` (sorted by `ablate.sort_by`).
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let dir = prepare_out_dir(cfg)?.to_path_buf();
    let mut rows = Vec::new();
    for (index, point) in cfg.grid_points().into_iter().enumerate() {
        let settings: BTreeMap<String, String> = point.iter().cloned().collect();
        let row = match run_point(cfg, &point, dir.join(format!("point_{index:03}"))) {
            Ok((params, ms, metrics)) => AblationRow {
                index,
                settings,
                status: "ok".into(),
                error: None,
                params: Some(params),
                median_ms: Some(ms),
                metrics,
            },
            Err(e) => AblationRow {
                index,
                settings,
                status: "failed".into(),
                error: Some(format!("{e:#}")),
                params: None,
                median_ms: None,
                metrics: BTreeMap::new(),
            },
        };
        rows.push(row);
    }
    let mut lines = String::new();
    for r in &rows {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(dir.join("summary.jsonl"), lines)?;
    fs::write(dir.join("summary.txt"), render_table(&rows, &cfg.ablate.sort_by))?;
    Ok(rows)
}

/// Text table sorted by `sort_by` descending; rows without it go last in grid order.
pub fn render_table(rows: &[AblationRow], sort_by: &str) -> String {
    let key = |r: &AblationRow| r.metrics.get(sort_by).and_then(Value::as_f64);
    let mut order: Vec<&AblationRow> = rows.iter().collect();
    order.sort_by(|a, b| match (key(a), key(b)) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.index.cmp(&b.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.index.cmp(&b.index),
    });
    let mut metric_names: Vec<&str> = rows
        .iter()
        .flat_map(|r| r.metrics.keys())
        .map(String::as_str)
        .filter(|k| k.ends_with("_acc") || *k == "loss_total")
        .collect();
    metric_names.sort_unstable();
    metric_names.dedup();
    let mut header = vec!["#".to_string(), "settings".into(), "status".into(), "params".into(), "median_ms".into()];
    header.extend(metric_names.iter().map(|s| s.to_string()));
    let mut table = vec![header];
    for r in order {
        let settings: Vec<String> = r.settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let mut cells = vec![
            r.index.to_string(),
            if settings.is_empty() { "(base)".into() } else { settings.join(" ") },
            r.status.clone(),
            r.params.map_or("-".into(), |p| p.to_string()),
            r.median_ms.map_or("-".into(), |m| format!("{m:.3}")),
        ];
        for m in &metric_names {
            cells.push(r.metrics.get(*m).and_then(Value::as_f64).map_or("-".into(), |v| format!("{v:.4}")));
        }
        table.push(cells);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = format!("sorted by {sort_by}\n");
    for row in &table {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn export_attn(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ckpt = cfg.paths.checkpoint.as_ref().context("paths.checkpoint is required")?;
    let model = load_model(cfg, ckpt)?;
    let dir = prepare_out_dir(cfg)?;
    let records = load_records(cfg, cfg.data.resolution, cfg.data.qa)?;
    let data = build_dataset(cfg, &records, &ObjectiveSet::new([]))?;
    let maps = attention_maps(&model, &data, &vocabulary(), cfg.attn.record, &cfg.attn.layers, cfg.attn.token)?;
    write_maps(&maps, &dir.join("attention"))
}
