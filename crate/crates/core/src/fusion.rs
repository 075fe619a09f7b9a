//! Cross-modal fusion: merged attention, co-attention and the decoder.

use alloc::format;
use alloc::vec::Vec;

use crate::config::{CrossOrder, ModelConfig};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{AttentionRecord, AttnLayout, Builder, FeedForward, LayerNorm, MultiHeadAttention, TransformerLayer};
use crate::params::{Group, Init, ParamId, ParamStore};

/// Projected unimodal states entering the fusion stack.
#[derive(Clone, Copy, Debug)]
pub struct FusionInput<'a> {
    /// `[batch * text_len, d]`
    pub text: Var,
    /// `[batch * vision_len, d]`
    pub vision: Var,
    pub batch: usize,
    pub text_len: usize,
    pub vision_len: usize,
    pub text_mask: &'a [bool],
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub text: Var,
    pub vision: Var,
}

type Trace<'t> = Option<&'t mut Vec<AttentionRecord>>;

fn traced<R>(
    trace: &mut Trace<'_>,
    module: impl FnOnce() -> alloc::string::String,
    f: impl FnOnce(Option<&mut Vec<Vec<crate::Tensor>>>) -> Result<R>,
) -> Result<R> {
    match trace.as_deref_mut() {
        None => f(None),
        Some(t) => {
            let mut rec = AttentionRecord::new(module());
            let out = f(Some(&mut rec.weights))?;
            t.push(rec);
            Ok(out)
        }
    }
}

#[derive(Clone, Debug)]
pub struct MergedFusion {
    /// Row 0 is added to text tokens and row 1 to vision tokens.
    pub modality_embed: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub text_ln: LayerNorm,
    pub vision_ln: LayerNorm,
}

impl MergedFusion {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let f = &cfg.fusion;
        Self {
            modality_embed: b.param("fusion.modality_embed", &[2, f.hidden], Group::Top, Init::Uniform(0.05)),
            layers: (0..f.layers)
                .map(|i| {
                    TransformerLayer::new(
                        b,
                        &format!("fusion.layer{i}"),
                        f.hidden,
                        f.heads,
                        f.ffn_dim(),
                        Group::Top,
                        cfg.ln_eps,
                    )
                })
                .collect(),
            text_ln: LayerNorm::new(b, "fusion.text_ln", f.hidden, Group::Top, cfg.ln_eps),
            vision_ln: LayerNorm::new(b, "fusion.vision_ln", f.hidden, Group::Top, cfg.ln_eps),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        inp: &FusionInput<'_>,
        mut trace: Trace<'_>,
        mut probe: Option<&mut dyn FnMut(&str)>,
    ) -> Result<FusionOutput> {
        let FusionInput {
            batch,
            text_len: t,
            vision_len: v,
            ..
        } = *inp;
        let modal = g.param(s, self.modality_embed);
        let text_tag = g.slice(modal, 0, 0, 1)?;
        let vision_tag = g.slice(modal, 0, 1, 1)?;
        let text = g.add(inp.text, text_tag)?;
        let vision = g.add(inp.vision, vision_tag)?;
        let mut parts = Vec::with_capacity(2 * batch);
        let mut mask = Vec::with_capacity(batch * (t + v));
        for bi in 0..batch {
            parts.push(g.slice(text, 0, bi * t, t)?);
            parts.push(g.slice(vision, 0, bi * v, v)?);
            mask.extend_from_slice(&inp.text_mask[bi * t..(bi + 1) * t]);
            mask.extend(core::iter::repeat_n(true, v));
        }
        let mut x = g.concat(&parts, 0)?;
        let layout = AttnLayout {
            batch,
            q_len: t + v,
            k_len: t + v,
            key_mask: Some(&mask),
            causal: false,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            x = traced(&mut trace, || format!("fusion.layer{i}.attn"), |w| layer.forward(g, s, x, &layout, w))?;
            if let Some(p) = probe.as_deref_mut() {
                p(&format!("fusion.layer{i}"));
            }
        }
        let mut texts = Vec::with_capacity(batch);
        let mut visions = Vec::with_capacity(batch);
        for bi in 0..batch {
            texts.push(g.slice(x, 0, bi * (t + v), t)?);
            visions.push(g.slice(x, 0, bi * (t + v) + t, v)?);
        }
        let text = g.concat(&texts, 0)?;
        let vision = g.concat(&visions, 0)?;
        Ok(FusionOutput {
            text: self.text_ln.forward(g, s, text)?,
            vision: self.vision_ln.forward(g, s, vision)?,
        })
    }
}

/// One modality's half of a co-attention layer.
#[derive(Clone, Debug)]
pub struct CoAttentionTower {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_query: LayerNorm,
    pub ln_context: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl CoAttentionTower {
    fn new(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Self {
        let f = &cfg.fusion;
        let (d, h, eps) = (f.hidden, f.heads, cfg.ln_eps);
        Self {
            ln_self: LayerNorm::new(b, &format!("{name}.ln_self"), d, Group::Top, eps),
            self_attn: MultiHeadAttention::new(b, &format!("{name}.self_attn"), d, h, Group::Top),
            ln_query: LayerNorm::new(b, &format!("{name}.ln_query"), d, Group::Top, eps),
            ln_context: LayerNorm::new(b, &format!("{name}.ln_context"), d, Group::Top, eps),
            cross_attn: MultiHeadAttention::new(b, &format!("{name}.cross_attn"), d, h, Group::Top),
            ln_ffn: LayerNorm::new(b, &format!("{name}.ln_ffn"), d, Group::Top, eps),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), d, f.ffn_dim(), Group::Top),
        }
    }

    fn self_block(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x: Var,
        layout: &AttnLayout<'_>,
        w: Option<&mut Vec<Vec<crate::Tensor>>>,
    ) -> Result<Var> {
        let h = self.ln_self.forward(g, s, x)?;
        let a = self.self_attn.forward(g, s, h, h, layout, w)?;
        g.add(x, a)
    }

    fn cross_block(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x: Var,
        context: Var,
        layout: &AttnLayout<'_>,
        w: Option<&mut Vec<Vec<crate::Tensor>>>,
    ) -> Result<Var> {
        let q = self.ln_query.forward(g, s, x)?;
        let c = self.ln_context.forward(g, s, context)?;
        let a = self.cross_attn.forward(g, s, q, c, layout, w)?;
        g.add(x, a)
    }

    fn ffn_block(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln_ffn.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, h)?;
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct CoAttentionLayer {
    pub text: CoAttentionTower,
    pub vision: CoAttentionTower,
}

#[derive(Clone, Debug)]
pub struct CoAttentionFusion {
    pub layers: Vec<CoAttentionLayer>,
    pub text_ln: LayerNorm,
    pub vision_ln: LayerNorm,
}

impl CoAttentionFusion {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let d = cfg.fusion.hidden;
        Self {
            layers: (0..cfg.fusion.layers)
                .map(|i| CoAttentionLayer {
                    text: CoAttentionTower::new(b, &format!("fusion.layer{i}.text"), cfg),
                    vision: CoAttentionTower::new(b, &format!("fusion.layer{i}.vision"), cfg),
                })
                .collect(),
            text_ln: LayerNorm::new(b, "fusion.text_ln", d, Group::Top, cfg.ln_eps),
            vision_ln: LayerNorm::new(b, "fusion.vision_ln", d, Group::Top, cfg.ln_eps),
        }
    }

    /// Each layer self-attends both streams, then every stream cross-attends
    /// the other stream's post-self-attention states of the same layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        inp: &FusionInput<'_>,
        mut trace: Trace<'_>,
        mut probe: Option<&mut dyn FnMut(&str)>,
    ) -> Result<FusionOutput> {
        let FusionInput {
            batch,
            text_len: t,
            vision_len: v,
            text_mask,
            ..
        } = *inp;
        let all = |q, k, key_mask| AttnLayout {
            batch,
            q_len: q,
            k_len: k,
            key_mask,
            causal: false,
        };
        let text_self = all(t, t, Some(text_mask));
        let vision_self = all(v, v, None);
        let text_cross = all(t, v, None);
        let vision_cross = all(v, t, Some(text_mask));
        let (mut x, mut y) = (inp.text, inp.vision);
        for (i, layer) in self.layers.iter().enumerate() {
            let xs = traced(&mut trace, || format!("fusion.layer{i}.text.self_attn"), |w| {
                layer.text.self_block(g, s, x, &text_self, w)
            })?;
            let ys = traced(&mut trace, || format!("fusion.layer{i}.vision.self_attn"), |w| {
                layer.vision.self_block(g, s, y, &vision_self, w)
            })?;
            let xc = traced(&mut trace, || format!("fusion.layer{i}.text.cross_attn"), |w| {
                layer.text.cross_block(g, s, xs, ys, &text_cross, w)
            })?;
            let yc = traced(&mut trace, || format!("fusion.layer{i}.vision.cross_attn"), |w| {
                layer.vision.cross_block(g, s, ys, xs, &vision_cross, w)
            })?;
            x = layer.text.ffn_block(g, s, xc)?;
            y = layer.vision.ffn_block(g, s, yc)?;
            if let Some(p) = probe.as_deref_mut() {
                p(&format!("fusion.layer{i}"));
            }
        }
        Ok(FusionOutput {
            text: self.text_ln.forward(g, s, x)?,
            vision: self.vision_ln.forward(g, s, y)?,
        })
    }
}

#[derive(Clone, Debug)]
pub enum FusionStack {
    Merged(MergedFusion),
    CoAttention(CoAttentionFusion),
}

impl FusionStack {
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        inp: &FusionInput<'_>,
        trace: Trace<'_>,
        probe: Option<&mut dyn FnMut(&str)>,
    ) -> Result<FusionOutput> {
        if inp.text_mask.len() != inp.batch * inp.text_len {
            return Err(invalid("text mask length does not match the fusion input"));
        }
        match self {
            FusionStack::Merged(m) => m.forward(g, s, inp, trace, probe),
            FusionStack::CoAttention(c) => c.forward(g, s, inp, trace, probe),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_text: LayerNorm,
    pub text_attn: MultiHeadAttention,
    pub ln_vision: LayerNorm,
    pub vision_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// Autoregressive decoder attending the fused text and vision states.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_ln: LayerNorm,
    pub order: CrossOrder,
    pub max_len: usize,
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let f = &cfg.fusion;
        let (d, h, eps) = (f.hidden, f.heads, cfg.ln_eps);
        let max_len = cfg.text.max_positions;
        Self {
            token_embed: b.param("decoder.token_embed", &[cfg.vocab_size, d], Group::Top, Init::Uniform(0.05)),
            pos_embed: b.param("decoder.pos_embed", &[max_len, d], Group::Top, Init::Uniform(0.05)),
            layers: (0..f.dec_layers)
                .map(|i| {
                    let n = format!("decoder.layer{i}");
                    DecoderLayer {
                        ln_self: LayerNorm::new(b, &format!("{n}.ln_self"), d, Group::Top, eps),
                        self_attn: MultiHeadAttention::new(b, &format!("{n}.self_attn"), d, h, Group::Top),
                        ln_text: LayerNorm::new(b, &format!("{n}.ln_text"), d, Group::Top, eps),
                        text_attn: MultiHeadAttention::new(b, &format!("{n}.text_attn"), d, h, Group::Top),
                        ln_vision: LayerNorm::new(b, &format!("{n}.ln_vision"), d, Group::Top, eps),
                        vision_attn: MultiHeadAttention::new(b, &format!("{n}.vision_attn"), d, h, Group::Top),
                        ln_ffn: LayerNorm::new(b, &format!("{n}.ln_ffn"), d, Group::Top, eps),
                        ffn: FeedForward::new(b, &format!("{n}.ffn"), d, f.ffn_dim(), Group::Top),
                    }
                })
                .collect(),
            final_ln: LayerNorm::new(b, "decoder.final_ln", d, Group::Top, cfg.ln_eps),
            order: f.cross_order,
            max_len,
        }
    }

    /// Decoder states `[batch * dec_len, d]` for teacher-forced inputs `dec_ids`.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        enc: &FusionOutput,
        inp: &FusionInput<'_>,
        dec_ids: &[usize],
        dec_len: usize,
        mut trace: Trace<'_>,
    ) -> Result<Var> {
        let batch = inp.batch;
        if dec_ids.len() != batch * dec_len || dec_len == 0 {
            return Err(invalid(format!("{} decoder ids for batch {batch} x {dec_len}", dec_ids.len())));
        }
        if dec_len > self.max_len {
            return Err(Error::SequenceOverflow {
                len: dec_len,
                max_len: self.max_len,
            });
        }
        let table = g.param(s, self.token_embed);
        let x = g.embedding(table, dec_ids)?;
        let pos = g.param(s, self.pos_embed);
        let pos = g.slice(pos, 0, 0, dec_len)?;
        let d = g.shape(x)[1];
        let x3 = g.reshape(x, &[batch, dec_len, d])?;
        let x3 = g.add(x3, pos)?;
        let mut x = g.reshape(x3, &[batch * dec_len, d])?;
        let causal = AttnLayout {
            batch,
            q_len: dec_len,
            k_len: dec_len,
            key_mask: None,
            causal: true,
        };
        let to_text = AttnLayout {
            batch,
            q_len: dec_len,
            k_len: inp.text_len,
            key_mask: Some(inp.text_mask),
            causal: false,
        };
        let to_vision = AttnLayout {
            batch,
            q_len: dec_len,
            k_len: inp.vision_len,
            key_mask: None,
            causal: false,
        };
        for (i, l) in self.layers.iter().enumerate() {
            let h = l.ln_self.forward(g, s, x)?;
            let a = traced(&mut trace, || format!("decoder.layer{i}.self_attn"), |w| {
                l.self_attn.forward(g, s, h, h, &causal, w)
            })?;
            x = g.add(x, a)?;
            let order = match self.order {
                CrossOrder::TextFirst => [true, false],
                CrossOrder::VisionFirst => [false, true],
            };
            for is_text in order {
                let h = if is_text { l.ln_text.forward(g, s, x)? } else { l.ln_vision.forward(g, s, x)? };
                let a = if is_text {
                    traced(&mut trace, || format!("decoder.layer{i}.text_attn"), |w| {
                        l.text_attn.forward(g, s, h, enc.text, &to_text, w)
                    })?
                } else {
                    traced(&mut trace, || format!("decoder.layer{i}.vision_attn"), |w| {
                        l.vision_attn.forward(g, s, h, enc.vision, &to_vision, w)
                    })?
                };
                x = g.add(x, a)?;
            }
            let h = l.ln_ffn.forward(g, s, x)?;
            let f = l.ffn.forward(g, s, h)?;
            x = g.add(x, f)?;
        }
        self.final_ln.forward(g, s, x)
    }
}

/// Row indices `[b * len]` of the first token of every sample.
pub fn first_rows(batch: usize, len: usize) -> Vec<usize> {
    (0..batch).map(|b| b * len).collect()
}

/// `[batch, d]` text-branch class-token states.
pub fn pool_cls(g: &mut Graph, out: &FusionOutput, inp: &FusionInput<'_>) -> Result<Var> {
    g.embedding(out.text, &first_rows(inp.batch, inp.text_len))
}
