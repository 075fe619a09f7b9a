//! Input corruptions and loss heads of the pre-training objectives.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::Objective;
use crate::data::vocab::{is_sentinel, is_special, sentinel, FIRST_WORD, MASK, NUM_SENTINELS};
use crate::data::Scene;
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Encoded, Model};
use crate::tensor::Tensor;

/// How a fractional selection count `ratio * n` becomes an integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountRule {
    /// Round half away from zero; the same count on every call.
    Round,
    /// `floor(ratio * n + u)` with `u ~ U[0, 1)`; unbiased in expectation.
    Stochastic,
}

impl core::str::FromStr for CountRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round" => Ok(CountRule::Round),
            "stochastic" => Ok(CountRule::Stochastic),
            _ => Err(Error::Config(format!("invalid count rule {s:?}, expected round or stochastic"))),
        }
    }
}

impl core::fmt::Display for CountRule {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            CountRule::Round => "round",
            CountRule::Stochastic => "stochastic",
        })
    }
}

pub fn selection_count(ratio: f64, n: usize, rule: CountRule, rng: &mut impl Rng) -> usize {
    let expected = ratio * n as f64;
    let nearest = libm::round(expected);
    let count = if libm::fabs(expected - nearest) < 1e-9 {
        nearest
    } else {
        match rule {
            CountRule::Round => nearest,
            CountRule::Stochastic => libm::floor(expected + rng.random::<f64>()),
        }
    };
    (count as usize).min(n)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("masking ratio must lie in (0, 1), got {ratio}")))
    }
}

/// `k` distinct entries of `pool` in ascending order.
fn choose_sorted(pool: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p = pool.to_vec();
    let (chosen, _) = p.partial_shuffle(rng, k);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    chosen
}

/// Text after masked-language-model corruption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmCorruption {
    pub ids: Vec<usize>,
    /// Original id at every selected position.
    pub targets: Vec<Option<usize>>,
}

/// Selects `ratio` of the real word positions of one sentence and replaces
/// them with `[MASK]` (80%), a random word (10%) or leaves them (10%).
///
/// Markers, padding and sentinels are never selected.
pub fn mlm_corrupt(
    ids: &[usize],
    mask: &[bool],
    ratio: f64,
    vocab_size: usize,
    rule: CountRule,
    rng: &mut impl Rng,
) -> Result<MlmCorruption> {
    check_ratio(ratio)?;
    if ids.len() != mask.len() {
        return Err(invalid("ids and mask differ in length"));
    }
    let pool: Vec<usize> = (0..ids.len()).filter(|&i| mask[i] && !is_special(ids[i])).collect();
    let k = selection_count(ratio, pool.len(), rule, rng);
    let mut out = MlmCorruption {
        ids: ids.to_vec(),
        targets: vec![None; ids.len()],
    };
    for i in choose_sorted(&pool, k, rng) {
        out.targets[i] = Some(ids[i]);
        let r: f64 = rng.random();
        if r < 0.8 {
            out.ids[i] = MASK;
        } else if r < 0.9 {
            out.ids[i] = rng.random_range(FIRST_WORD..vocab_size);
        }
    }
    Ok(out)
}

/// Evaluation masking: selects like training, but at least one position
/// when any is maskable, and always substitutes `[MASK]`.
pub fn mlm_mask_only(ids: &[usize], mask: &[bool], ratio: f64, rule: CountRule, rng: &mut impl Rng) -> Result<MlmCorruption> {
    check_ratio(ratio)?;
    let pool: Vec<usize> = (0..ids.len()).filter(|&i| mask[i] && !is_special(ids[i])).collect();
    let k = selection_count(ratio, pool.len(), rule, rng).max(usize::from(!pool.is_empty()));
    let mut out = MlmCorruption {
        ids: ids.to_vec(),
        targets: vec![None; ids.len()],
    };
    for i in choose_sorted(&pool, k, rng) {
        out.targets[i] = Some(ids[i]);
        out.ids[i] = MASK;
    }
    Ok(out)
}

/// One image-caption assignment for image-text matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItmPair {
    /// Index of the caption paired with image `i`.
    pub caption: usize,
    /// 1 when the caption describes the image.
    pub label: usize,
}

/// Keeps each image's own caption or, with probability 0.5, swaps in the
/// caption of a uniformly chosen batch member showing a different scene.
pub fn sample_itm_pairs(scenes: &[Scene], rng: &mut impl Rng) -> Result<Vec<ItmPair>> {
    if scenes.len() < 2 {
        return Err(invalid("image-text matching needs a batch of at least 2"));
    }
    if scenes.iter().all(|s| s.same_layout(&scenes[0])) {
        return Err(Error::NoMismatch(format!("all {} scenes are identical", scenes.len())));
    }
    Ok(scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            if rng.random_bool(0.5) {
                ItmPair { caption: i, label: 1 }
            } else {
                let others: Vec<usize> = (0..scenes.len()).filter(|&j| !scenes[j].same_layout(scene)).collect();
                ItmPair {
                    caption: others[rng.random_range(0..others.len())],
                    label: 0,
                }
            }
        })
        .collect())
}

/// Patch mask of `batch` images with `patches` patches each; the class
/// token is not part of the patch grid and so is never selected.
pub fn mask_patches(batch: usize, patches: usize, ratio: f64, rule: CountRule, rng: &mut impl Rng) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    let pool: Vec<usize> = (0..patches).collect();
    let mut mask = vec![false; batch * patches];
    for b in 0..batch {
        let k = selection_count(ratio, patches, rule, rng);
        for p in choose_sorted(&pool, k, rng) {
            mask[b * patches + p] = true;
        }
    }
    Ok(mask)
}

/// Result of span corruption on one word sequence (no markers).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanCorruption {
    /// Words with each span replaced by its sentinel.
    pub encoder: Vec<usize>,
    /// `<extra_0> span0 <extra_1> span1 ... <extra_k>`
    pub target: Vec<usize>,
    /// `(start, len)` of every removed span.
    pub spans: Vec<(usize, usize)>,
}

impl SpanCorruption {
    pub fn noise_tokens(&self) -> usize {
        self.spans.iter().map(|s| s.1).sum()
    }
}

/// Replaces the given sorted, disjoint spans of `words` by sentinels.
pub fn span_corrupt_with(words: &[usize], spans: &[(usize, usize)]) -> Result<SpanCorruption> {
    if spans.len() + 1 > NUM_SENTINELS {
        return Err(Error::TooManySpans {
            spans: spans.len(),
            available: NUM_SENTINELS - 1,
        });
    }
    let mut pos = 0;
    for &(start, len) in spans {
        if len == 0 || start < pos || start + len > words.len() {
            return Err(invalid(format!("span ({start}, {len}) is empty, overlapping or out of range")));
        }
        pos = start + len;
    }
    let mut encoder = Vec::with_capacity(words.len());
    let mut target = Vec::new();
    let mut cursor = 0;
    for (k, &(start, len)) in spans.iter().enumerate() {
        encoder.extend_from_slice(&words[cursor..start]);
        encoder.push(sentinel(k));
        target.push(sentinel(k));
        target.extend_from_slice(&words[start..start + len]);
        cursor = start + len;
    }
    encoder.extend_from_slice(&words[cursor..]);
    target.push(sentinel(spans.len()));
    Ok(SpanCorruption {
        encoder,
        target,
        spans: spans.to_vec(),
    })
}

/// Splits `total` into `parts` positive integers uniformly at random.
fn positive_composition(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    if parts == 1 {
        return vec![total];
    }
    let cuts: Vec<usize> = (1..total).collect();
    let mut cuts = choose_sorted(&cuts, parts - 1, rng);
    cuts.push(total);
    let mut prev = 0;
    cuts.into_iter()
        .map(|c| {
            let len = c - prev;
            prev = c;
            len
        })
        .collect()
}

/// T5-style span corruption over `words`.
///
/// About `ratio * n` tokens are removed in `round(noise / mean_span)` spans;
/// kept words between spans are never empty, so spans do not touch.
pub fn span_corrupt(
    words: &[usize],
    ratio: f64,
    mean_span: f64,
    rule: CountRule,
    rng: &mut impl Rng,
) -> Result<SpanCorruption> {
    check_ratio(ratio)?;
    if mean_span < 1.0 {
        return Err(invalid("mean span length must be at least 1"));
    }
    let n = words.len();
    let noise = selection_count(ratio, n, rule, rng).min(n.saturating_sub(1));
    if noise == 0 {
        return span_corrupt_with(words, &[]);
    }
    let kept = n - noise;
    let spans = (libm::round(noise as f64 / mean_span) as usize).clamp(1, noise.min(kept + 1));
    if spans + 1 > NUM_SENTINELS {
        return Err(Error::TooManySpans {
            spans,
            available: NUM_SENTINELS - 1,
        });
    }
    let noise_lens = positive_composition(noise, spans, rng);
    // spans + 1 gaps; the inner ones need at least one word
    let mut gaps = positive_composition(kept + 2, spans + 1, rng);
    gaps[0] -= 1;
    gaps[spans] -= 1;
    let mut out = Vec::with_capacity(spans);
    let mut pos = 0;
    for k in 0..spans {
        pos += gaps[k];
        out.push((pos, noise_lens[k]));
        pos += noise_lens[k];
    }
    span_corrupt_with(words, &out)
}

/// Splices the target spans back into the sentinel positions of `encoder`.
pub fn span_decorrupt(encoder: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    let mut spans: BTreeMap<usize, &[usize]> = BTreeMap::new();
    let mut i = 0;
    while i < target.len() {
        let s = target[i];
        if !is_sentinel(s) {
            return Err(invalid(format!("target position {i} should hold a sentinel")));
        }
        let end = (i + 1..target.len()).find(|&j| is_sentinel(target[j])).unwrap_or(target.len());
        spans.insert(s, &target[i + 1..end]);
        i = end;
    }
    let mut out = Vec::with_capacity(encoder.len() + target.len());
    for &t in encoder {
        if is_sentinel(t) {
            let span = spans
                .get(&t)
                .ok_or_else(|| invalid(format!("sentinel {t} has no span in the target")))?;
            out.extend_from_slice(span);
        } else {
            out.push(t);
        }
    }
    Ok(out)
}

/// Teacher-forcing decoder input: the target shifted right behind `start`.
pub fn shift_right(target: &[usize], start: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(target.len());
    v.push(start);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

/// A loss and how many positions it scored.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub value: Var,
    pub token_count: usize,
}

fn zero_term(g: &mut Graph) -> Result<LossTerm> {
    Ok(LossTerm {
        value: g.constant(Tensor::scalar(0.0))?,
        token_count: 0,
    })
}

/// Rows of `targets` that carry a target, with the targets themselves.
fn scored(targets: &[Option<usize>]) -> (Vec<usize>, Vec<Option<usize>>) {
    targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, Some(t))))
        .unzip()
}

/// Cross-entropy of `head(states)` over the rows that carry a target.
fn gathered_ce(
    g: &mut Graph,
    model: &Model,
    states: Var,
    targets: &[Option<usize>],
    head: &crate::nn::Linear,
) -> Result<LossTerm> {
    if g.shape(states)[0] != targets.len() {
        return Err(invalid(format!(
            "{} target slots for {} state rows",
            targets.len(),
            g.shape(states)[0]
        )));
    }
    let (rows, t) = scored(targets);
    if rows.is_empty() {
        return zero_term(g);
    }
    let x = g.embedding(states, &rows)?;
    let logits = head.forward(g, &model.store, x)?;
    Ok(LossTerm {
        value: g.cross_entropy(logits, &t)?,
        token_count: rows.len(),
    })
}

/// Mean cross-entropy over masked text positions (`[batch * text_len]` targets).
pub fn mlm_loss(g: &mut Graph, model: &Model, enc: &Encoded, targets: &[Option<usize>]) -> Result<LossTerm> {
    gathered_ce(g, model, enc.fused.text, targets, &model.layout.heads.mlm)
}

/// 2-way cross-entropy of the pooled representation.
pub fn itm_loss(g: &mut Graph, model: &Model, pooled: Var, labels: &[usize]) -> Result<LossTerm> {
    let logits = model.layout.heads.itm.forward(g, &model.store, pooled)?;
    let t: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    Ok(LossTerm {
        value: g.cross_entropy(logits, &t)?,
        token_count: labels.len(),
    })
}

pub fn vqa_loss(g: &mut Graph, model: &Model, pooled: Var, answers: &[usize]) -> Result<LossTerm> {
    let logits = model.layout.heads.vqa.forward(g, &model.store, pooled)?;
    let t: Vec<Option<usize>> = answers.iter().map(|&a| Some(a)).collect();
    Ok(LossTerm {
        value: g.cross_entropy(logits, &t)?,
        token_count: answers.len(),
    })
}

/// Vision-state rows of the masked patches (skipping each class token).
pub fn masked_vision_rows(enc: &Encoded, patch_mask: &[bool]) -> Vec<usize> {
    let n = enc.vision_len - 1;
    (0..patch_mask.len())
        .filter(|&k| patch_mask[k])
        .map(|k| (k / n) * enc.vision_len + 1 + k % n)
        .collect()
}

/// Scores of masked-position predictions `h` (`[m, d]`) against every
/// candidate `c` (`[B * (V - 1), d]`), one row per masked position.
pub fn mim_ibn_logits(g: &mut Graph, h: Var, candidates: Var) -> Result<Var> {
    let ct = g.transpose(candidates)?;
    g.matmul(h, ct)
}

/// In-batch-negative masked image modeling.
///
/// Each masked patch's fused state is projected by `h` and compared by dot
/// product with every patch projection in the batch; the true patch must win
/// a softmax over all `B * (V - 1)` candidates. Candidates are detached.
pub fn mim_ibn_loss(g: &mut Graph, model: &Model, enc: &Encoded, patch_mask: &[bool]) -> Result<LossTerm> {
    let targets: Vec<Option<usize>> = (0..patch_mask.len()).filter(|&k| patch_mask[k]).map(Some).collect();
    if targets.is_empty() {
        return zero_term(g);
    }
    let rows = masked_vision_rows(enc, patch_mask);
    let x = g.embedding(enc.fused.vision, &rows)?;
    let h = model.layout.heads.mim_ibn.forward(g, &model.store, x)?;
    let c = g.detach(enc.patch_proj)?;
    let logits = mim_ibn_logits(g, h, c)?;
    Ok(LossTerm {
        value: g.cross_entropy(logits, &targets)?,
        token_count: targets.len(),
    })
}

/// Discrete-code masked image modeling: predict each masked patch's code id.
pub fn mim_dc_loss(g: &mut Graph, model: &Model, enc: &Encoded, patch_mask: &[bool], codes: &[usize]) -> Result<LossTerm> {
    if codes.len() != patch_mask.len() {
        return Err(invalid("one code per patch is required"));
    }
    let rows = masked_vision_rows(enc, patch_mask);
    let t: Vec<Option<usize>> = (0..patch_mask.len()).filter(|&k| patch_mask[k]).map(|k| Some(codes[k])).collect();
    if rows.is_empty() {
        return zero_term(g);
    }
    let x = g.embedding(enc.fused.vision, &rows)?;
    let logits = model.layout.heads.mim_dc.forward(g, &model.store, x)?;
    Ok(LossTerm {
        value: g.cross_entropy(logits, &t)?,
        token_count: rows.len(),
    })
}

/// Mean cross-entropy of the span head over the scored decoder positions.
pub fn span_lm_loss(g: &mut Graph, model: &Model, dec_states: Var, targets: &[Option<usize>]) -> Result<LossTerm> {
    let head = model
        .layout
        .heads
        .span
        .as_ref()
        .ok_or_else(|| invalid("span_lm requires a decoder"))?;
    gathered_ce(g, model, dec_states, targets, head)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossComponent {
    pub value: f64,
    pub weight: f64,
    pub token_count: usize,
}

#[derive(Clone, Debug)]
pub struct LossBundle {
    pub total: Var,
    pub total_value: f64,
    pub components: BTreeMap<Objective, LossComponent>,
}

/// `total = sum(weight * value)` over the given components; objectives
/// without an explicit weight get 1.
pub fn combine_losses(
    g: &mut Graph,
    terms: &[(Objective, LossTerm)],
    weights: &BTreeMap<Objective, f64>,
) -> Result<LossBundle> {
    if terms.is_empty() {
        return Err(invalid("no loss components to combine"));
    }
    let mut total: Option<Var> = None;
    let mut components = BTreeMap::new();
    for &(o, term) in terms {
        let w = weights.get(&o).copied().unwrap_or(1.0);
        let scaled = if w == 1.0 { term.value } else { g.scale(term.value, w)? };
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
        let prev = components.insert(
            o,
            LossComponent {
                value: g.item(term.value)?,
                weight: w,
                token_count: term.token_count,
            },
        );
        if prev.is_some() {
            return Err(invalid(format!("objective {o} given twice")));
        }
    }
    let total = total.expect("non-empty");
    Ok(LossBundle {
        total,
        total_value: g.item(total)?,
        components,
    })
}
