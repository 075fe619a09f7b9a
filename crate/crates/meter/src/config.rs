//! Flat `section.key = value` run configuration.
//!
//! A file is a set of lines; blank lines and `#` comments are ignored and the
//! order of lines does not matter. `preset` is applied first, every other key
//! then overrides one field of the preset. Rendering writes every key, so a
//! rendered snapshot re-parses to the same configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use meter_core::config::{Architecture, CrossOrder, FusionKind, ModelConfig, Objective, ObjectiveSet};
use meter_core::data::{grammar_terminals, Vocabulary};
use meter_core::objectives::CountRule;
use meter_core::train::{EvalTask, TrainConfig};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} appears more than once")]
    Duplicate(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Invariant(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    PaperBase,
}

impl Preset {
    fn keyword(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::PaperBase => "paper_base",
        }
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper_base" => Ok(Preset::PaperBase),
            _ => Err("expected toy or paper_base".into()),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub corpus_size: usize,
    pub resolution: usize,
    /// Attach a question-answer pair to every record.
    pub qa: bool,
    pub kmeans_iters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr_bottom: f64,
    pub lr_top: f64,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tasks: Vec<EvalTask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub kinds: Vec<FusionKind>,
    pub depths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnConfig {
    /// Corpus record to trace.
    pub record: usize,
    /// Fusion layers to export; empty selects every layer.
    pub layers: Vec<usize>,
    /// Text position to export; `None` exports every content token.
    pub token: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    /// Axis key to its values, in key order.
    pub axes: BTreeMap<String, Vec<String>>,
    pub sort_by: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub attn: AttnConfig,
    pub ablate: AblateConfig,
    pub paths: Paths,
}

/// The fixed vocabulary every run shares: specials, sentinels and every word
/// the caption and question grammars can emit.
pub fn vocabulary() -> Vocabulary {
    Vocabulary::build(grammar_terminals())
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.into(),
        value: v.into(),
        reason: e.to_string(),
    })
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| value(key, s)).collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn eval_keyword(t: EvalTask) -> &'static str {
    match t {
        EvalTask::Itm => "itm",
        EvalTask::Mlm => "mlm",
        EvalTask::Vqa => "vqa",
    }
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let vocab = vocabulary().len();
        let model = match preset {
            Preset::Toy => ModelConfig::toy(vocab),
            Preset::PaperBase => ModelConfig::paper_base(vocab),
        };
        Self {
            preset,
            model,
            train: TrainConfig::default(),
            data: DataConfig {
                seed: 0,
                corpus_size: 64,
                resolution: 32,
                qa: false,
                kmeans_iters: 20,
            },
            finetune: FinetuneConfig {
                steps: 600,
                lr_bottom: 2e-4,
                lr_top: 1e-3,
                resolution: 32,
            },
            eval: EvalConfig {
                tasks: vec![EvalTask::Itm, EvalTask::Mlm],
            },
            bench: BenchConfig {
                batch: 1,
                repeats: 10,
                warmup: 2,
                kinds: vec![FusionKind::Merged, FusionKind::CoAttention],
                depths: vec![1, 2, 4, 8],
            },
            attn: AttnConfig {
                record: 0,
                layers: Vec::new(),
                token: None,
            },
            ablate: AblateConfig {
                axes: BTreeMap::new(),
                sort_by: "itm_acc".into(),
            },
            paths: Paths {
                out_dir: PathBuf::from("runs/default"),
                manifest: None,
                checkpoint: None,
            },
        }
    }

    /// Parses config text, applies `overrides` on top and validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_assignment(line).ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.into(),
            })?;
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate(k.into()));
            }
        }
        for (k, v) in overrides {
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_entries(&entries)
    }

    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        let preset = match entries.get("preset") {
            Some(p) => value("preset", p)?,
            None => Preset::Toy,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in entries {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key without validating the whole config.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if let Some(axis) = key.strip_prefix("ablate.axis.") {
            let values: Vec<String> = v.split('|').map(|s| s.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                    reason: "empty axis value".into(),
                });
            }
            self.ablate.axes.insert(axis.to_string(), values);
            return Ok(());
        }
        if let Some(obj) = key.strip_prefix("weights.") {
            let o: Objective = value(key, obj)?;
            let w: f64 = value(key, v)?;
            if w == 1.0 {
                self.train.weights.remove(&o);
            } else {
                self.train.weights.insert(o, w);
            }
            return Ok(());
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "text.hidden" => m.text.hidden = value(key, v)?,
            "text.heads" => m.text.heads = value(key, v)?,
            "text.layers" => m.text.layers = value(key, v)?,
            "text.ffn_mult" => m.text.ffn_mult = value(key, v)?,
            "text.max_positions" => m.text.max_positions = value(key, v)?,
            "vision.hidden" => m.vision.hidden = value(key, v)?,
            "vision.heads" => m.vision.heads = value(key, v)?,
            "vision.layers" => m.vision.layers = value(key, v)?,
            "vision.ffn_mult" => m.vision.ffn_mult = value(key, v)?,
            "vision.patch_size" => m.vision.patch_size = value(key, v)?,
            "fusion.kind" => m.fusion.kind = value::<FusionKind>(key, v)?,
            "fusion.layers" => m.fusion.layers = value(key, v)?,
            "fusion.hidden" => m.fusion.hidden = value(key, v)?,
            "fusion.heads" => m.fusion.heads = value(key, v)?,
            "fusion.ffn_mult" => m.fusion.ffn_mult = value(key, v)?,
            "fusion.arch" => m.fusion.arch = value::<Architecture>(key, v)?,
            "fusion.dec_layers" => m.fusion.dec_layers = value(key, v)?,
            "fusion.cross_order" => m.fusion.cross_order = value::<CrossOrder>(key, v)?,
            "model.num_answers" => m.num_answers = value(key, v)?,
            "model.codebook_size" => m.codebook_size = value(key, v)?,
            "model.resolution" => m.resolution = value(key, v)?,
            "model.multiscale" => m.multiscale = value(key, v)?,
            "model.ln_eps" => m.ln_eps = value(key, v)?,
            "model.init_seed" => m.init_seed = value(key, v)?,
            "objectives" => t.objectives = value::<ObjectiveSet>(key, v)?,
            "train.steps" => t.steps = value(key, v)?,
            "train.batch_size" => t.batch_size = value(key, v)?,
            "train.lr_bottom" => t.lr_bottom = value(key, v)?,
            "train.lr_top" => t.lr_top = value(key, v)?,
            "train.warmup_ratio" => t.warmup_ratio = value(key, v)?,
            "train.seed" => t.seed = value(key, v)?,
            "train.eval_every" => t.eval_every = value(key, v)?,
            "train.eval" => t.eval = value(key, v)?,
            "train.mlm_ratio" => t.mlm_ratio = value(key, v)?,
            "train.mim_ratio" => t.mim_ratio = value(key, v)?,
            "train.span_ratio" => t.span_ratio = value(key, v)?,
            "train.mean_span" => t.mean_span = value(key, v)?,
            "train.count_rule" => t.count_rule = value::<CountRule>(key, v)?,
            "train.single_group" => t.single_group = value(key, v)?,
            "train.beta1" => t.adam.beta1 = value(key, v)?,
            "train.beta2" => t.adam.beta2 = value(key, v)?,
            "train.adam_eps" => t.adam.eps = value(key, v)?,
            "train.weight_decay" => t.adam.weight_decay = value(key, v)?,
            "data.seed" => self.data.seed = value(key, v)?,
            "data.corpus_size" => self.data.corpus_size = value(key, v)?,
            "data.resolution" => self.data.resolution = value(key, v)?,
            "data.qa" => self.data.qa = value(key, v)?,
            "data.kmeans_iters" => self.data.kmeans_iters = value(key, v)?,
            "finetune.steps" => self.finetune.steps = value(key, v)?,
            "finetune.lr_bottom" => self.finetune.lr_bottom = value(key, v)?,
            "finetune.lr_top" => self.finetune.lr_top = value(key, v)?,
            "finetune.resolution" => self.finetune.resolution = value(key, v)?,
            "eval.tasks" => self.eval.tasks = list(key, v)?,
            "bench.batch" => self.bench.batch = value(key, v)?,
            "bench.repeats" => self.bench.repeats = value(key, v)?,
            "bench.warmup" => self.bench.warmup = value(key, v)?,
            "bench.kinds" => self.bench.kinds = list(key, v)?,
            "bench.depths" => self.bench.depths = list(key, v)?,
            "attn.record" => self.attn.record = value(key, v)?,
            "attn.layers" => self.attn.layers = list(key, v)?,
            "attn.token" => self.attn.token = if v == "all" { None } else { Some(value(key, v)?) },
            "ablate.sort_by" => self.ablate.sort_by = v.to_string(),
            "paths.out_dir" => self.paths.out_dir = PathBuf::from(v),
            "paths.manifest" => self.paths.manifest = optional_path(v),
            "paths.checkpoint" => self.paths.checkpoint = optional_path(v),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        if key == "model.resolution" || key == "vision.patch_size" {
            self.sync_vision_positions();
        }
        Ok(())
    }

    fn sync_vision_positions(&mut self) {
        let p = self.model.vision.patch_size;
        if p > 0 {
            let g = self.model.resolution / p;
            self.model.vision.max_positions = g * g + 1;
        }
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let t = &self.train;
        let mut e: Vec<(String, String)> = vec![("preset".into(), self.preset.to_string())];
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        for (prefix, enc) in [("text", &m.text), ("vision", &m.vision)] {
            put(&format!("{prefix}.hidden"), enc.hidden.to_string());
            put(&format!("{prefix}.heads"), enc.heads.to_string());
            put(&format!("{prefix}.layers"), enc.layers.to_string());
            put(&format!("{prefix}.ffn_mult"), enc.ffn_mult.to_string());
        }
        put("text.max_positions", m.text.max_positions.to_string());
        put("vision.patch_size", m.vision.patch_size.to_string());
        put("fusion.kind", m.fusion.kind.to_string());
        put("fusion.layers", m.fusion.layers.to_string());
        put("fusion.hidden", m.fusion.hidden.to_string());
        put("fusion.heads", m.fusion.heads.to_string());
        put("fusion.ffn_mult", m.fusion.ffn_mult.to_string());
        put("fusion.arch", m.fusion.arch.to_string());
        put("fusion.dec_layers", m.fusion.dec_layers.to_string());
        put("fusion.cross_order", m.fusion.cross_order.to_string());
        put("model.num_answers", m.num_answers.to_string());
        put("model.codebook_size", m.codebook_size.to_string());
        put("model.resolution", m.resolution.to_string());
        put("model.multiscale", m.multiscale.to_string());
        put("model.ln_eps", m.ln_eps.to_string());
        put("model.init_seed", m.init_seed.to_string());
        put("objectives", t.objectives.to_string());
        put("train.steps", t.steps.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr_bottom", t.lr_bottom.to_string());
        put("train.lr_top", t.lr_top.to_string());
        put("train.warmup_ratio", t.warmup_ratio.to_string());
        put("train.seed", t.seed.to_string());
        put("train.eval_every", t.eval_every.to_string());
        put("train.eval", t.eval.to_string());
        put("train.mlm_ratio", t.mlm_ratio.to_string());
        put("train.mim_ratio", t.mim_ratio.to_string());
        put("train.span_ratio", t.span_ratio.to_string());
        put("train.mean_span", t.mean_span.to_string());
        put("train.count_rule", t.count_rule.to_string());
        put("train.single_group", t.single_group.to_string());
        put("train.beta1", t.adam.beta1.to_string());
        put("train.beta2", t.adam.beta2.to_string());
        put("train.adam_eps", t.adam.eps.to_string());
        put("train.weight_decay", t.adam.weight_decay.to_string());
        for o in Objective::ALL {
            put(&format!("weights.{o}"), t.weights.get(o).copied().unwrap_or(1.0).to_string());
        }
        put("data.seed", self.data.seed.to_string());
        put("data.corpus_size", self.data.corpus_size.to_string());
        put("data.resolution", self.data.resolution.to_string());
        put("data.qa", self.data.qa.to_string());
        put("data.kmeans_iters", self.data.kmeans_iters.to_string());
        put("finetune.steps", self.finetune.steps.to_string());
        put("finetune.lr_bottom", self.finetune.lr_bottom.to_string());
        put("finetune.lr_top", self.finetune.lr_top.to_string());
        put("finetune.resolution", self.finetune.resolution.to_string());
        let tasks: Vec<&str> = self.eval.tasks.iter().map(|&t| eval_keyword(t)).collect();
        put("eval.tasks", tasks.join(","));
        put("bench.batch", self.bench.batch.to_string());
        put("bench.repeats", self.bench.repeats.to_string());
        put("bench.warmup", self.bench.warmup.to_string());
        put("bench.kinds", join(&self.bench.kinds));
        put("bench.depths", join(&self.bench.depths));
        put("attn.record", self.attn.record.to_string());
        put("attn.layers", join(&self.attn.layers));
        put("attn.token", self.attn.token.map_or_else(|| "all".into(), |t| t.to_string()));
        for (axis, values) in &self.ablate.axes {
            put(&format!("ablate.axis.{axis}"), values.join("|"));
        }
        put("ablate.sort_by", self.ablate.sort_by.clone());
        put("paths.out_dir", self.paths.out_dir.display().to_string());
        put("paths.manifest", path_or_empty(&self.paths.manifest));
        put("paths.checkpoint", path_or_empty(&self.paths.checkpoint));
        e.into_iter().collect()
    }

    /// Sorted `key = value` text that [`RunConfig::parse`] reads back.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let inv = |e: meter_core::Error| ConfigError::Invariant(e.to_string());
        self.model.validate().map_err(inv)?;
        self.train.validate(&self.model).map_err(inv)?;
        if ![32, 64].contains(&self.data.resolution) || ![32, 64].contains(&self.finetune.resolution) {
            return Err(ConfigError::Invariant("data and finetune resolutions must be 32 or 64".into()));
        }
        for r in [self.data.resolution, self.finetune.resolution] {
            if r % self.model.vision.patch_size != 0 {
                return Err(ConfigError::Invariant(format!(
                    "resolution {r} is not divisible by vision.patch_size {}",
                    self.model.vision.patch_size
                )));
            }
        }
        if self.data.corpus_size == 0 {
            return Err(ConfigError::Invariant("data.corpus_size must be positive".into()));
        }
        if self.bench.repeats < 3 || self.bench.batch == 0 {
            return Err(ConfigError::Invariant("bench.repeats must be >= 3 and bench.batch >= 1".into()));
        }
        if let Some(&bad) = self.attn.layers.iter().find(|&&l| l >= self.model.fusion.layers) {
            return Err(ConfigError::Invariant(format!(
                "attn.layers entry {bad} exceeds fusion.layers {}",
                self.model.fusion.layers
            )));
        }
        for axis in self.ablate.axes.keys() {
            if axis == "train.lrs" {
                continue;
            }
            let mut probe = Self::preset(self.preset);
            if let Err(ConfigError::UnknownKey(_)) = probe.set(axis, "0") {
                return Err(ConfigError::UnknownKey(format!("ablate.axis.{axis}")));
            }
        }
        Ok(())
    }

    /// Grid points of the ablation axes in lexicographic axis order, the last
    /// axis varying fastest. Each point lists its `(key, value)` settings.
    /// The pseudo-axis `train.lrs` takes `bottom,top` pairs.
    pub fn grid_points(&self) -> Vec<Vec<(String, String)>> {
        let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (axis, values) in &self.ablate.axes {
            let mut next = Vec::with_capacity(points.len() * values.len());
            for p in &points {
                for v in values {
                    let mut q = p.clone();
                    q.push((axis.clone(), v.clone()));
                    next.push(q);
                }
            }
            points = next;
        }
        points
    }

    /// This config with one grid point applied and the ablation axes cleared.
    pub fn with_point(&self, point: &[(String, String)]) -> Result<Self> {
        let mut entries = self.entries();
        entries.retain(|k, _| !k.starts_with("ablate.axis."));
        for (k, v) in point {
            if k == "train.lrs" {
                let (b, t) = v.split_once(',').ok_or_else(|| ConfigError::Value {
                    key: k.clone(),
                    value: v.clone(),
                    reason: "expected `bottom,top`".into(),
                })?;
                entries.insert("train.lr_bottom".into(), b.trim().into());
                entries.insert("train.lr_top".into(), t.trim().into());
            } else {
                entries.insert(k.clone(), v.clone());
            }
        }
        Self::from_entries(&entries)
    }
}

fn split_assignment(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v.trim()))
}

/// Parses a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    split_assignment(s)
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| ConfigError::Syntax { line: 0, text: s.into() })
}
