//! Unimodal text and vision encoders.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{EncoderConfig, ModelConfig};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{AttentionRecord, AttnLayout, Builder, LayerNorm, Linear, TransformerLayer};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

const EMBED_INIT: Init = Init::Uniform(0.05);

/// Hidden states of every encoder layer plus the normalized top output.
#[derive(Clone, Debug)]
pub struct LayerOutputs {
    /// `N + 1` states: the embeddings followed by each layer's output.
    pub hidden: Vec<Var>,
    /// Final layer norm of the last state.
    pub output: Var,
}

fn encoder_layers(b: &mut Builder, prefix: &str, cfg: &EncoderConfig, eps: f64) -> Vec<TransformerLayer> {
    (0..cfg.layers)
        .map(|i| {
            TransformerLayer::new(
                b,
                &format!("{prefix}.layer{i}"),
                cfg.hidden,
                cfg.heads,
                cfg.ffn_dim(),
                Group::Bottom,
                eps,
            )
        })
        .collect()
}

fn run_layers(
    g: &mut Graph,
    s: &ParamStore,
    layers: &[TransformerLayer],
    final_ln: &LayerNorm,
    x: Var,
    layout: &AttnLayout<'_>,
    prefix: &str,
    mut trace: Option<&mut Vec<AttentionRecord>>,
) -> Result<LayerOutputs> {
    let mut hidden = Vec::with_capacity(layers.len() + 1);
    hidden.push(x);
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let mut rec = trace.as_ref().map(|_| AttentionRecord::new(format!("{prefix}.layer{i}.attn")));
        h = layer.forward(g, s, h, layout, rec.as_mut().map(|r| &mut r.weights))?;
        if let (Some(t), Some(r)) = (trace.as_deref_mut(), rec) {
            t.push(r);
        }
        hidden.push(h);
    }
    let output = final_ln.forward(g, s, h)?;
    Ok(LayerOutputs { hidden, output })
}

/// Adds a `[len, d]` position table to `[batch * len, d]` rows.
fn add_positions(g: &mut Graph, x: Var, pos: Var, batch: usize, len: usize) -> Result<Var> {
    let d = g.shape(x)[1];
    let x3 = g.reshape(x, &[batch, len, d])?;
    let y = g.add(x3, pos)?;
    g.reshape(y, &[batch * len, d])
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    pub max_positions: usize,
}

impl TextEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let t = &cfg.text;
        Self {
            token_embed: b.param("text.token_embed", &[cfg.vocab_size, t.hidden], Group::Bottom, EMBED_INIT),
            pos_embed: b.param("text.pos_embed", &[t.max_positions, t.hidden], Group::Bottom, EMBED_INIT),
            layers: encoder_layers(b, "text", t, cfg.ln_eps),
            final_ln: LayerNorm::new(b, "text.final_ln", t.hidden, Group::Bottom, cfg.ln_eps),
            max_positions: t.max_positions,
        }
    }

    /// Encodes `batch` sequences of `len` ids; `mask` marks real tokens.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ids: &[usize],
        mask: &[bool],
        batch: usize,
        len: usize,
        trace: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<LayerOutputs> {
        if ids.len() != batch * len || mask.len() != ids.len() {
            return Err(invalid(format!(
                "text batch of {} ids / {} mask entries does not match {batch}x{len}",
                ids.len(),
                mask.len()
            )));
        }
        if len > self.max_positions {
            return Err(Error::SequenceOverflow {
                len,
                max_len: self.max_positions,
            });
        }
        let table = g.param(s, self.token_embed);
        let x = g.embedding(table, ids)?;
        let pos = g.param(s, self.pos_embed);
        let pos = g.slice(pos, 0, 0, len)?;
        let x = add_positions(g, x, pos, batch, len)?;
        let layout = AttnLayout {
            batch,
            q_len: len,
            k_len: len,
            key_mask: Some(mask),
            causal: false,
        };
        run_layers(g, s, &self.layers, &self.final_ln, x, &layout, "text", trace)
    }
}

/// Token rows fed to the vision transformer and the raw patch projections.
#[derive(Clone, Copy, Debug)]
pub struct VisionEmbedding {
    /// `[batch * (patches + 1), d]` with the class token first in each sample.
    pub tokens: Var,
    /// `[batch * patches, d]` projection of the unmasked patches.
    pub patch_proj: Var,
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub mask_token: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    /// Patches per side of the learned position table.
    pub grid: usize,
}

impl VisionEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let v = &cfg.vision;
        Self {
            patch_embed: Linear::new(b, "vision.patch_embed", cfg.patch_dim(), v.hidden, Group::Bottom),
            cls_token: b.param("vision.cls_token", &[1, v.hidden], Group::Bottom, EMBED_INIT),
            mask_token: b.param("vision.mask_patch", &[1, v.hidden], Group::Bottom, EMBED_INIT),
            pos_embed: b.param("vision.pos_embed", &[v.max_positions, v.hidden], Group::Bottom, EMBED_INIT),
            layers: encoder_layers(b, "vision", v, cfg.ln_eps),
            final_ln: LayerNorm::new(b, "vision.final_ln", v.hidden, Group::Bottom, cfg.ln_eps),
            grid: cfg.grid(),
        }
    }

    /// Projects `[batch * grid², patch_dim]` patches, swaps masked rows for the
    /// mask token, prepends the class token and adds (interpolated) positions.
    pub fn embed(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        patches: Var,
        batch: usize,
        grid: usize,
        patch_mask: Option<&[bool]>,
    ) -> Result<VisionEmbedding> {
        let n = grid * grid;
        if g.shape(patches)[0] != batch * n {
            return Err(invalid(format!(
                "{} patch rows do not match batch {batch} of {grid}x{grid}",
                g.shape(patches)[0]
            )));
        }
        let proj = self.patch_embed.forward(g, s, patches)?;
        let d = g.shape(proj)[1];
        let mut x = proj;
        if let Some(mask) = patch_mask {
            if mask.len() != batch * n {
                return Err(invalid("patch mask length does not match the batch"));
            }
            if mask.iter().any(|&m| m) {
                let keep: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
                let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
                let keep = g.constant(Tensor::from_parts_unchecked(vec![batch * n, 1], keep))?;
                let drop = g.constant(Tensor::from_parts_unchecked(vec![batch * n, 1], drop))?;
                let tok = g.param(s, self.mask_token);
                let kept = g.mul(proj, keep)?;
                let filled = g.mul(drop, tok)?;
                x = g.add(kept, filled)?;
            }
        }
        let cls = g.param(s, self.cls_token);
        let mut rows = Vec::with_capacity(2 * batch);
        for bi in 0..batch {
            rows.push(cls);
            rows.push(g.slice(x, 0, bi * n, n)?);
        }
        let seq = g.concat(&rows, 0)?;
        let mut pos = g.param(s, self.pos_embed);
        if grid != self.grid {
            let m = g.constant(interpolation_matrix(self.grid, grid))?;
            pos = g.matmul(m, pos)?;
        }
        let tokens = add_positions(g, seq, pos, batch, n + 1)?;
        debug_assert_eq!(g.shape(tokens), [batch * (n + 1), d]);
        Ok(VisionEmbedding { tokens, patch_proj: proj })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        embedded: &VisionEmbedding,
        batch: usize,
        grid: usize,
        trace: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<LayerOutputs> {
        let len = grid * grid + 1;
        let layout = AttnLayout {
            batch,
            q_len: len,
            k_len: len,
            key_mask: None,
            causal: false,
        };
        run_layers(g, s, &self.layers, &self.final_ln, embedded.tokens, &layout, "vision", trace)
    }
}

/// Linear interpolation weights from `from` to `to` samples with aligned corners.
fn axis_weights(from: usize, to: usize) -> Vec<(usize, usize, f64)> {
    (0..to)
        .map(|t| {
            if from == 1 || to == 1 {
                return (0, 0, 0.0);
            }
            let src = t as f64 * (from - 1) as f64 / (to - 1) as f64;
            let lo = (libm::floor(src) as usize).min(from - 1);
            let hi = (lo + 1).min(from - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// `[to² + 1, from² + 1]` matrix that resamples a class-token-first position
/// table from a `from x from` grid to a `to x to` grid bilinearly.
pub fn interpolation_matrix(from: usize, to: usize) -> Tensor {
    let (rows, cols) = (to * to + 1, from * from + 1);
    let mut m = vec![0.0; rows * cols];
    m[0] = 1.0;
    let w = axis_weights(from, to);
    for (ty, &(y0, y1, fy)) in w.iter().enumerate() {
        for (tx, &(x0, x1, fx)) in w.iter().enumerate() {
            let r = 1 + ty * to + tx;
            for (sy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (sx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    m[r * cols + 1 + sy * from + sx] += wy * wx;
                }
            }
        }
    }
    Tensor::from_parts_unchecked(vec![rows, cols], m)
}

/// Bilinearly resamples a `[from², d]` grid position table (no class slot)
/// to `[to², d]`.
pub fn interpolate_pos_embed(grid_table: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let (n, d) = grid_table.dims2()?;
    if to == 0 {
        return Err(invalid("new grid must be at least 1"));
    }
    if n != from * from {
        return Err(Error::ShapeMismatch {
            op: "interpolate_pos_embed",
            lhs: grid_table.shape().to_vec(),
            rhs: vec![from * from, d],
        });
    }
    let m = interpolation_matrix(from, to);
    let mut out = vec![0.0; to * to * d];
    for r in 0..to * to {
        for (c, &w) in m.row(r + 1)[1..].iter().enumerate() {
            if w != 0.0 {
                for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(grid_table.row(c)) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![to * to, d], out))
}

/// Scalar gates for the layer-output fusion, one per non-final layer state.
#[derive(Clone, Debug)]
pub struct MultiscaleGates {
    pub gates: Vec<Linear>,
}

impl MultiscaleGates {
    pub fn new(b: &mut Builder, prefix: &str, dim: usize, layers: usize) -> Self {
        Self {
            gates: (0..layers)
                .map(|j| Linear::with_init(b, &format!("{prefix}.gate{j}"), dim, 1, Group::Top, Init::Zeros))
                .collect(),
        }
    }
}

/// `output + sum_j gate_j(h_j) * h_j` over the non-final states `h_0..h_{N-1}`.
///
/// Gates start at zero, which leaves `output` unchanged.
pub fn multiscale_fuse(g: &mut Graph, s: &ParamStore, outputs: &LayerOutputs, gates: &MultiscaleGates) -> Result<Var> {
    let lower = &outputs.hidden[..outputs.hidden.len() - 1];
    if lower.len() != gates.gates.len() {
        return Err(invalid(format!(
            "{} gates for {} intermediate states",
            gates.gates.len(),
            lower.len()
        )));
    }
    let mut acc = outputs.output;
    for (&h, gate) in lower.iter().zip(&gates.gates) {
        let w = gate.forward(g, s, h)?;
        let term = g.mul(w, h)?;
        acc = g.add(acc, term)?;
    }
    Ok(acc)
}
