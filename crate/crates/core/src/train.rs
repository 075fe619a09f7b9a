//! Batch assembly, the training loop and evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Objective, ObjectiveSet};
use crate::data::vocab::{wrap_ids, EncodedText, Vocabulary, PAD};
use crate::data::{Codebook, PairRecord, Scene};
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::model::{Encoded, Model, ModelInput};
use crate::objectives::{self, CountRule, LossBundle, LossTerm};
use crate::optim::{schedule_lr, AdamW, AdamWHyper};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Source of wall-clock milliseconds for the metrics stream.
pub trait Clock {
    fn now_ms(&self) -> f64;
}

/// A clock that always reads 0, for `no_std` use and reproducible logs.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

/// One image-caption pair prepared for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub scene: Scene,
    /// Caption word ids without markers.
    pub caption: Vec<usize>,
    pub question: Option<Vec<usize>>,
    pub answer: Option<usize>,
    /// `[grid², patch_dim]`
    pub patches: Tensor,
    /// Code id of every patch, empty without a codebook.
    pub codes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub grid: usize,
    /// Padded text length shared by every batch.
    pub text_len: usize,
    pub vocab_size: usize,
}

impl Dataset {
    pub fn from_records(
        records: &[PairRecord],
        vocab: &Vocabulary,
        patch_size: usize,
        codebook: Option<&Codebook>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid("dataset needs at least one record"));
        }
        let mut examples = Vec::with_capacity(records.len());
        let mut grid = None;
        let mut longest = 0;
        for r in records {
            let patches = r.image.patches(patch_size)?;
            let g = r.image.height / patch_size;
            if *grid.get_or_insert(g) != g {
                return Err(invalid("all images of a dataset must share one resolution"));
            }
            let caption = vocab.word_ids(&r.caption)?;
            let question = r.qa.as_ref().map(|q| vocab.word_ids(&q.question)).transpose()?;
            longest = longest.max(caption.len()).max(question.as_ref().map_or(0, Vec::len));
            let codes = match codebook {
                Some(cb) => cb.quantize(&patches)?,
                None => Vec::new(),
            };
            examples.push(Example {
                id: r.id,
                scene: r.scene.clone(),
                caption,
                question,
                answer: r.qa.as_ref().map(|q| q.answer_id),
                patches,
                codes,
            });
        }
        Ok(Self {
            examples,
            grid: grid.expect("non-empty"),
            text_len: longest + 2,
            vocab_size: vocab.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn wrap(&self, words: &[usize]) -> Result<EncodedText> {
        wrap_ids(words, self.text_len)
    }

    /// Stacked `[batch * grid², patch_dim]` patches of `idx`.
    pub fn patches(&self, idx: &[usize]) -> Tensor {
        let dim = self.examples[0].patches.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * self.grid * self.grid * dim);
        for &i in idx {
            data.extend_from_slice(self.examples[i].patches.data());
        }
        Tensor::new(vec![idx.len() * self.grid * self.grid, dim], data).expect("consistent patch shapes")
    }
}

/// Token matrix of one batch, row-major `[batch, text_len]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TextBatch {
    fn push(&mut self, e: EncodedText) {
        self.ids.extend(e.ids);
        self.mask.extend(e.mask);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_bottom: f64,
    pub lr_top: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub objectives: ObjectiveSet,
    /// Metrics (and evaluation) every this many steps, and after the last.
    pub eval_every: usize,
    /// Run evaluation at logging steps.
    pub eval: bool,
    pub weights: BTreeMap<Objective, f64>,
    pub mlm_ratio: f64,
    pub mim_ratio: f64,
    pub span_ratio: f64,
    pub mean_span: f64,
    pub count_rule: CountRule,
    pub adam: AdamWHyper,
    /// One learning rate (`lr_bottom`) for every parameter without consulting groups.
    pub single_group: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr_bottom: 2e-4,
            lr_top: 1e-3,
            warmup_ratio: 0.1,
            seed: 0,
            objectives: ObjectiveSet::new([Objective::Mlm, Objective::Itm]),
            eval_every: 100,
            eval: true,
            weights: BTreeMap::new(),
            mlm_ratio: 0.15,
            mim_ratio: 0.15,
            span_ratio: 0.15,
            mean_span: 3.0,
            count_rule: CountRule::Stochastic,
            adam: AdamWHyper::default(),
            single_group: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::Config(format!("warmup_ratio {} must lie in (0, 1)", self.warmup_ratio)));
        }
        if self.lr_bottom < 0.0 || self.lr_top < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        for r in [self.mlm_ratio, self.mim_ratio, self.span_ratio] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("masking ratio {r} must lie in (0, 1)")));
            }
        }
        self.objectives.validate(model.fusion.arch)?;
        if self.objectives.contains(Objective::Itm) && self.batch_size < 2 {
            return Err(Error::Config("itm needs batch_size >= 2".into()));
        }
        Ok(())
    }
}

/// Parameters of each learning-rate group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    pub bottom: Vec<ParamId>,
    pub top: Vec<ParamId>,
}

pub fn build_param_groups(store: &ParamStore) -> Result<ParamGroups> {
    let mut groups = ParamGroups {
        bottom: Vec::new(),
        top: Vec::new(),
    };
    for (id, p) in store.iter() {
        match p.group {
            Some(Group::Bottom) => groups.bottom.push(id),
            Some(Group::Top) => groups.top.push(id),
            None => return Err(Error::UntaggedParameter(p.name.clone())),
        }
    }
    Ok(groups)
}

fn forward_batch(
    g: &mut Graph,
    model: &Model,
    data: &Dataset,
    text: &TextBatch,
    patches: &Tensor,
    batch: usize,
    patch_mask: Option<&[bool]>,
) -> Result<Encoded> {
    model.forward(
        g,
        &ModelInput {
            batch,
            text_len: data.text_len,
            text_ids: &text.ids,
            text_mask: &text.mask,
            patches,
            grid: data.grid,
            patch_mask,
        },
        None,
        None,
    )
}

fn captions(data: &Dataset, idx: &[usize]) -> Result<TextBatch> {
    let mut t = TextBatch::default();
    for &i in idx {
        t.push(data.wrap(&data.examples[i].caption)?);
    }
    Ok(t)
}

/// Builds every enabled objective's loss for the examples `idx` in one graph.
///
/// Each objective runs its own forward pass on its own corrupted view of the
/// batch; the bundle's total sums them.
pub fn compute_losses(
    g: &mut Graph,
    model: &Model,
    data: &Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<LossBundle> {
    let b = idx.len();
    let patches = data.patches(idx);
    let mut terms: Vec<(Objective, LossTerm)> = Vec::new();
    for obj in cfg.objectives.iter() {
        let term = match obj {
            Objective::Mlm => {
                let mut text = TextBatch::default();
                let mut targets = Vec::with_capacity(b * data.text_len);
                for &i in idx {
                    let e = data.wrap(&data.examples[i].caption)?;
                    let c = objectives::mlm_corrupt(&e.ids, &e.mask, cfg.mlm_ratio, data.vocab_size, cfg.count_rule, rng)?;
                    targets.extend(c.targets);
                    text.push(EncodedText { ids: c.ids, mask: e.mask });
                }
                let enc = forward_batch(g, model, data, &text, &patches, b, None)?;
                objectives::mlm_loss(g, model, &enc, &targets)?
            }
            Objective::Itm => {
                let scenes: Vec<Scene> = idx.iter().map(|&i| data.examples[i].scene.clone()).collect();
                let pairs = objectives::sample_itm_pairs(&scenes, rng)?;
                let chosen: Vec<usize> = pairs.iter().map(|p| idx[p.caption]).collect();
                let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
                let text = captions(data, &chosen)?;
                let enc = forward_batch(g, model, data, &text, &patches, b, None)?;
                let pooled = model.pooled(g, &enc)?;
                objectives::itm_loss(g, model, pooled, &labels)?
            }
            Objective::MimIbn | Objective::MimDc => {
                let n = data.grid * data.grid;
                let mask = objectives::mask_patches(b, n, cfg.mim_ratio, cfg.count_rule, rng)?;
                let text = captions(data, idx)?;
                let enc = forward_batch(g, model, data, &text, &patches, b, Some(&mask))?;
                if obj == Objective::MimIbn {
                    objectives::mim_ibn_loss(g, model, &enc, &mask)?
                } else {
                    let mut codes = Vec::with_capacity(b * n);
                    for &i in idx {
                        if data.examples[i].codes.len() != n {
                            return Err(invalid("mim_dc requires a dataset quantized with a codebook"));
                        }
                        codes.extend_from_slice(&data.examples[i].codes);
                    }
                    objectives::mim_dc_loss(g, model, &enc, &mask, &codes)?
                }
            }
            Objective::SpanLm => {
                let mut text = TextBatch::default();
                let mut corrupted = Vec::with_capacity(b);
                for &i in idx {
                    let c = objectives::span_corrupt(
                        &data.examples[i].caption,
                        cfg.span_ratio,
                        cfg.mean_span,
                        cfg.count_rule,
                        rng,
                    )?;
                    text.push(data.wrap(&c.encoder)?);
                    corrupted.push(c.target);
                }
                let dec_len = corrupted.iter().map(Vec::len).max().unwrap_or(1);
                let mut dec_in = Vec::with_capacity(b * dec_len);
                let mut targets = Vec::with_capacity(b * dec_len);
                for t in &corrupted {
                    let mut input = objectives::shift_right(t, PAD);
                    input.resize(dec_len, PAD);
                    dec_in.extend(input);
                    targets.extend(t.iter().map(|&x| Some(x)));
                    targets.extend(core::iter::repeat_n(None, dec_len - t.len()));
                }
                let enc = forward_batch(g, model, data, &text, &patches, b, None)?;
                let states = model.decode(g, &enc, &dec_in, dec_len, None)?;
                objectives::span_lm_loss(g, model, states, &targets)?
            }
            Objective::Vqa => {
                let mut text = TextBatch::default();
                let mut answers = Vec::with_capacity(b);
                for &i in idx {
                    let e = &data.examples[i];
                    let (Some(q), Some(a)) = (&e.question, e.answer) else {
                        return Err(invalid(format!("example {} has no question", e.id)));
                    };
                    text.push(data.wrap(q)?);
                    answers.push(a);
                }
                let enc = forward_batch(g, model, data, &text, &patches, b, None)?;
                let pooled = model.pooled(g, &enc)?;
                objectives::vqa_loss(g, model, pooled, &answers)?
            }
        };
        terms.push((obj, term));
    }
    objectives::combine_losses(g, &terms, &cfg.weights)
}

/// Parameters that receive a gradient from the enabled objectives.
///
/// Found by one probe backward pass with every masking forced on, so that
/// heads of objectives that happen to score nothing in a batch still count.
pub fn trainable_params(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<ParamId>> {
    let probe_cfg = TrainConfig {
        mlm_ratio: 0.5,
        mim_ratio: 0.5,
        span_ratio: 0.5,
        count_rule: CountRule::Round,
        ..cfg.clone()
    };
    let idx: Vec<usize> = (0..cfg.batch_size.min(data.len())).collect();
    let mut store = model.store.clone();
    store.zero_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = Graph::new();
    let bundle = compute_losses(&mut g, model, data, &idx, &probe_cfg, &mut rng)?;
    g.backward(bundle.total, &mut store)?;
    Ok(store.iter().filter(|(_, p)| p.grad.is_some()).map(|(id, _)| id).collect())
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_total: f64,
    /// Weighted sum components, unweighted values.
    pub losses: BTreeMap<Objective, f64>,
    pub weights: BTreeMap<Objective, f64>,
    pub lr_bottom: f64,
    pub lr_top: f64,
    pub wall_ms: f64,
    pub eval: BTreeMap<String, f64>,
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

/// Example indices of every step: shuffled epochs cut into batches, where a
/// batch may span an epoch boundary.
pub fn batch_schedule(seed: u64, steps: usize, batch: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0;
    let mut order = epoch_order(seed, epoch, n);
    let mut pos = 0;
    for _ in 0..steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch.min(n) {
            if pos == n {
                epoch += 1;
                order = epoch_order(seed, epoch, n);
                pos = 0;
            }
            idx.push(order[pos]);
            pos += 1;
        }
        out.push(idx);
    }
    out
}

/// Trains `model` in place and returns the metrics stream.
///
/// `on_record` sees every record as soon as it is produced.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    clock: &dyn Clock,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    cfg.validate(&model.config)?;
    build_param_groups(&model.store)?;
    let mut records = Vec::new();
    if cfg.steps == 0 {
        return Ok(records);
    }
    let ids = trainable_params(model, data, cfg)?;
    let mut opt = AdamW::new(cfg.adam, &model.store, ids.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = batch_schedule(cfg.seed, cfg.steps, cfg.batch_size, data.len());
    let start = clock.now_ms();
    model.store.zero_grads();
    for (step, idx) in schedule.iter().enumerate() {
        let lr_bottom = schedule_lr(step, cfg.steps, cfg.lr_bottom, cfg.warmup_ratio)?;
        let lr_top = schedule_lr(step, cfg.steps, cfg.lr_top, cfg.warmup_ratio)?;
        let mut g = Graph::new();
        let bundle = compute_losses(&mut g, model, data, idx, cfg, &mut rng)?;
        if !bundle.total_value.is_finite() {
            let breakdown: Vec<String> = bundle
                .components
                .iter()
                .map(|(o, c)| format!("{o}={}", c.value))
                .collect();
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: breakdown.join(", "),
            });
        }
        g.backward(bundle.total, &mut model.store)?;
        drop(g);
        // an objective that scored nothing this step leaves its head without a gradient
        for &id in &ids {
            if model.store.grad(id).is_none() {
                let zeros = Tensor::zeros(model.store.value(id).shape());
                model.store.get_mut(id).grad = Some(zeros);
            }
        }
        if cfg.single_group {
            opt.step(&mut model.store, lr_bottom)?;
        } else {
            opt.step_grouped(&mut model.store, |grp| match grp {
                Group::Bottom => lr_bottom,
                Group::Top => lr_top,
            })?;
        }
        model.store.zero_grads();
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let mut eval = BTreeMap::new();
            if cfg.eval {
                for (name, task) in eval_tasks(&cfg.objectives) {
                    eval.insert(String::from(name), evaluate(model, data, task, cfg.seed, cfg.batch_size)?);
                }
            }
            let rec = MetricsRecord {
                step: done,
                loss_total: bundle.total_value,
                losses: bundle.components.iter().map(|(o, c)| (*o, c.value)).collect(),
                weights: bundle.components.iter().map(|(o, c)| (*o, c.weight)).collect(),
                lr_bottom,
                lr_top: if cfg.single_group { lr_bottom } else { lr_top },
                wall_ms: clock.now_ms() - start,
                eval,
            };
            on_record(&rec);
            records.push(rec);
        }
    }
    Ok(records)
}

fn eval_tasks(objectives: &ObjectiveSet) -> Vec<(&'static str, EvalTask)> {
    let mut v = Vec::new();
    if objectives.contains(Objective::Itm) {
        v.push(("itm_acc", EvalTask::Itm));
    }
    if objectives.contains(Objective::Mlm) {
        v.push(("mlm_acc", EvalTask::Mlm));
    }
    if objectives.contains(Objective::Vqa) {
        v.push(("vqa_acc", EvalTask::Vqa));
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTask {
    Itm,
    Mlm,
    Vqa,
}

impl core::str::FromStr for EvalTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "itm" => Ok(EvalTask::Itm),
            "mlm" => Ok(EvalTask::Mlm),
            "vqa" => Ok(EvalTask::Vqa),
            _ => Err(Error::Config(format!("invalid eval task {s:?}, expected itm, mlm or vqa"))),
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of `task` on `data`; the model is not modified.
///
/// `itm` scores every image against its own caption and against one caption
/// of a different scene (a balanced set of `2n` pairs). `mlm` masks each
/// caption with pure `[MASK]` replacement at the training ratio.
pub fn evaluate(model: &Model, data: &Dataset, task: EvalTask, seed: u64, batch_size: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    let n = data.len();
    let heads = &model.layout.heads;
    let mut correct = 0usize;
    let mut total = 0usize;
    match task {
        EvalTask::Itm => {
            let mut pairs: Vec<(usize, usize, usize)> = Vec::with_capacity(2 * n);
            for i in 0..n {
                pairs.push((i, i, 1));
                let scene = &data.examples[i].scene;
                let others: Vec<usize> = (0..n).filter(|&j| !data.examples[j].scene.same_layout(scene)).collect();
                if !others.is_empty() {
                    pairs.push((i, others[rng.random_range(0..others.len())], 0));
                }
            }
            for chunk in pairs.chunks(batch_size.max(1)) {
                let images: Vec<usize> = chunk.iter().map(|p| p.0).collect();
                let caps: Vec<usize> = chunk.iter().map(|p| p.1).collect();
                let mut g = Graph::new();
                let enc = forward_batch(&mut g, model, data, &captions(data, &caps)?, &data.patches(&images), chunk.len(), None)?;
                let pooled = model.pooled(&mut g, &enc)?;
                let logits = heads.itm.forward(&mut g, &model.store, pooled)?;
                let l = g.value(logits);
                for (r, p) in chunk.iter().enumerate() {
                    correct += usize::from(argmax(l.row(r)) == p.2);
                }
                total += chunk.len();
            }
        }
        EvalTask::Mlm => {
            let all: Vec<usize> = (0..n).collect();
            for chunk in all.chunks(batch_size.max(1)) {
                let mut text = TextBatch::default();
                let mut targets = Vec::new();
                for &i in chunk {
                    let e = data.wrap(&data.examples[i].caption)?;
                    let c = objectives::mlm_mask_only(&e.ids, &e.mask, 0.15, CountRule::Stochastic, &mut rng)?;
                    targets.extend(c.targets);
                    text.push(EncodedText { ids: c.ids, mask: e.mask });
                }
                let mut g = Graph::new();
                let enc = forward_batch(&mut g, model, data, &text, &data.patches(chunk), chunk.len(), None)?;
                let rows: Vec<usize> = (0..targets.len()).filter(|&r| targets[r].is_some()).collect();
                if rows.is_empty() {
                    continue;
                }
                let x = g.embedding(enc.fused.text, &rows)?;
                let logits = heads.mlm.forward(&mut g, &model.store, x)?;
                let l = g.value(logits);
                for (k, &r) in rows.iter().enumerate() {
                    correct += usize::from(Some(argmax(l.row(k))) == targets[r]);
                }
                total += rows.len();
            }
        }
        EvalTask::Vqa => {
            let all: Vec<usize> = (0..n).filter(|&i| data.examples[i].answer.is_some()).collect();
            for chunk in all.chunks(batch_size.max(1)) {
                let mut text = TextBatch::default();
                for &i in chunk {
                    text.push(data.wrap(data.examples[i].question.as_ref().expect("filtered"))?);
                }
                let mut g = Graph::new();
                let enc = forward_batch(&mut g, model, data, &text, &data.patches(chunk), chunk.len(), None)?;
                let pooled = model.pooled(&mut g, &enc)?;
                let logits = heads.vqa.forward(&mut g, &model.store, pooled)?;
                let l = g.value(logits);
                for (r, &i) in chunk.iter().enumerate() {
                    correct += usize::from(Some(argmax(l.row(r))) == data.examples[i].answer);
                }
                total += chunk.len();
            }
        }
    }
    if total == 0 {
        return Err(invalid("evaluation set has nothing to score"));
    }
    Ok(correct as f64 / total as f64)
}
