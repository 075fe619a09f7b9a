//! Forward-pass latency measurement.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::Result;
use meter_core::config::{FusionKind, ModelConfig};
use meter_core::data::vocab::wrap_ids;
use meter_core::model::{count_parameters, Model, ModelInput};
use meter_core::train::{Clock, Dataset};
use meter_core::{Graph, Tensor};
use serde::Serialize;

/// Milliseconds since construction on the monotonic clock.
pub struct InstantClock(Instant);

impl InstantClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Clock for InstantClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

/// Tokens and patches of one benchmark batch.
#[derive(Clone, Debug)]
pub struct BenchInput {
    pub batch: usize,
    pub text_len: usize,
    pub text_ids: Vec<usize>,
    pub text_mask: Vec<bool>,
    pub patches: Tensor,
    pub grid: usize,
}

impl BenchInput {
    /// The first `batch` examples; the question is used when one exists,
    /// matching a single visual-question-answering query.
    pub fn from_dataset(data: &Dataset, batch: usize) -> Result<Self> {
        anyhow::ensure!(batch >= 1 && batch <= data.len(), "bench batch {batch} needs 1..={} examples", data.len());
        let idx: Vec<usize> = (0..batch).collect();
        let mut text_ids = Vec::with_capacity(batch * data.text_len);
        let mut text_mask = Vec::with_capacity(batch * data.text_len);
        for &i in &idx {
            let e = &data.examples[i];
            let enc = wrap_ids(e.question.as_ref().unwrap_or(&e.caption), data.text_len)?;
            text_ids.extend(enc.ids);
            text_mask.extend(enc.mask);
        }
        Ok(Self {
            batch,
            text_len: data.text_len,
            text_ids,
            text_mask,
            patches: data.patches(&idx),
            grid: data.grid,
        })
    }

    pub fn model_input(&self) -> ModelInput<'_> {
        ModelInput {
            batch: self.batch,
            text_len: self.text_len,
            text_ids: &self.text_ids,
            text_mask: &self.text_mask,
            patches: &self.patches,
            grid: self.grid,
            patch_mask: None,
        }
    }
}

/// Raw timings of repeated forward passes.
#[derive(Clone, Debug)]
pub struct Timing {
    pub total_ms: Vec<f64>,
    /// Stage name to per-repeat milliseconds, stages in forward order.
    pub stages: Vec<(String, Vec<f64>)>,
}

/// Times `repeats` forward passes after `warmup` untimed ones. Stage times
/// come from the model's stage probe and cover the interval since the
/// previous stage ended.
pub fn time_forward(model: &Model, inp: &BenchInput, repeats: usize, warmup: usize) -> Result<Timing> {
    let mi = inp.model_input();
    for _ in 0..warmup {
        let mut g = Graph::new();
        model.forward(&mut g, &mi, None, None)?;
    }
    let mut total_ms = Vec::with_capacity(repeats);
    let mut stages: Vec<(String, Vec<f64>)> = Vec::new();
    for _ in 0..repeats {
        let mut g = Graph::new();
        let mut marks: Vec<(String, Instant)> = Vec::new();
        let start = Instant::now();
        let mut probe = |stage: &str| marks.push((stage.to_string(), Instant::now()));
        model.forward(&mut g, &mi, None, Some(&mut probe))?;
        let end = Instant::now();
        total_ms.push((end - start).as_secs_f64() * 1e3);
        let mut prev = start;
        for (k, (name, t)) in marks.into_iter().enumerate() {
            let ms = (t - prev).as_secs_f64() * 1e3;
            prev = t;
            match stages.get_mut(k) {
                Some(s) => s.1.push(ms),
                None => stages.push((name, vec![ms])),
            }
        }
        // graph teardown is not part of the forward pass
        drop(g);
    }
    Ok(Timing { total_ms, stages })
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = (q * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Median absolute deviation from the median.
pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// One line of the benchmark report.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct BenchReport {
    pub config_name: String,
    pub params: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub repeats: usize,
    /// Run-to-run noise band of the median.
    pub mad_ms: f64,
    pub fusion_kind: String,
    pub fusion_layers: usize,
    /// Median milliseconds per stage.
    pub breakdown: BTreeMap<String, f64>,
}

pub fn report(name: &str, model: &Model, t: &Timing) -> BenchReport {
    BenchReport {
        config_name: name.to_string(),
        params: model.num_parameters(),
        median_ms: median(&t.total_ms),
        p90_ms: percentile(&t.total_ms, 0.9),
        repeats: t.total_ms.len(),
        mad_ms: mad(&t.total_ms),
        fusion_kind: model.config.fusion.kind.to_string(),
        fusion_layers: model.config.fusion.layers,
        breakdown: t.stages.iter().map(|(n, v)| (n.clone(), median(v))).collect(),
    }
}

/// Times a freshly initialized model for each named config.
pub fn benchmark_forward(
    configs: &[(String, ModelConfig)],
    inp: &BenchInput,
    repeats: usize,
    warmup: usize,
) -> Result<Vec<BenchReport>> {
    anyhow::ensure!(repeats >= 3, "benchmark needs at least 3 repeats, got {repeats}");
    let mut out = Vec::with_capacity(configs.len());
    for (name, cfg) in configs {
        let model = Model::new(cfg.clone())?;
        let t = time_forward(&model, inp, repeats, warmup)?;
        out.push(report(name, &model, &t));
    }
    Ok(out)
}

/// Parameter counts of both fusion kinds at their default depths on `base`.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Parity {
    pub hidden: usize,
    pub merged_layers: usize,
    pub merged_params: usize,
    pub coattn_layers: usize,
    pub coattn_params: usize,
    /// |merged - coattn| / max(merged, coattn)
    pub relative_diff: f64,
}

pub fn parity(base: &ModelConfig) -> Result<Parity> {
    let count = |kind: FusionKind| -> Result<(usize, usize)> {
        let mut c = base.clone();
        c.fusion.kind = kind;
        c.fusion.layers = kind.default_layers();
        Ok((c.fusion.layers, count_parameters(&c)?))
    };
    let (ml, mp) = count(FusionKind::Merged)?;
    let (cl, cp) = count(FusionKind::CoAttention)?;
    Ok(Parity {
        hidden: base.fusion.hidden,
        merged_layers: ml,
        merged_params: mp,
        coattn_layers: cl,
        coattn_params: cp,
        relative_diff: mp.abs_diff(cp) as f64 / mp.max(cp) as f64,
    })
}
