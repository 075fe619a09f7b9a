//! Transformer building blocks over the autodiff graph.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var, MASK_VALUE};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Shape and initializer of one parameter, recorded before allocation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub init: Init,
}

/// Collects parameter specs while modules are being laid out.
///
/// Ids are handed out in declaration order, so counting parameters needs no
/// allocation and [`Builder::materialize`] yields a store whose ids match.
#[derive(Debug, Default)]
pub struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], group: Group, init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            group,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_elements(&self) -> usize {
        self.specs.iter().map(|s| numel(&s.shape)).sum()
    }

    /// Samples every parameter from one seeded stream, in declaration order.
    pub fn materialize(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for s in &self.specs {
            store.add(s.name.clone(), s.group, s.init.sample(&s.shape, &mut rng))?;
        }
        Ok(store)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize, group: Group) -> Self {
        Self::with_init(b, name, in_dim, out_dim, group, Init::Xavier)
    }

    pub fn with_init(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize, group: Group, init: Init) -> Self {
        Self {
            weight: b.param(format!("{name}.weight"), &[in_dim, out_dim], group, init),
            bias: b.param(format!("{name}.bias"), &[out_dim], group, Init::Zeros),
            in_dim,
            out_dim,
        }
    }

    /// `x W + b` for `x` of shape `[n, in_dim]`.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = g.param(s, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Layer normalization over the last axis with a learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize, group: Group, eps: f64) -> Self {
        Self {
            gamma: b.param(format!("{name}.gamma"), &[dim], group, Init::Ones),
            beta: b.param(format!("{name}.beta"), &[dim], group, Init::Zeros),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, self.eps)?;
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        let y = g.mul(n, gamma)?;
        g.add(y, beta)
    }
}

/// Batch layout for attention: `batch` sequences flattened row-major into
/// `[batch * len, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout<'a> {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `[batch * k_len]`, true for keys that may be attended.
    pub key_mask: Option<&'a [bool]>,
    /// Query `i` may only attend keys `j <= i`.
    pub causal: bool,
}

/// Post-softmax weights of one attention module, `weights[sample][head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub module: String,
    pub weights: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn new(module: String) -> Self {
        Self {
            module,
            weights: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, group: Group) -> Self {
        Self::with_output_init(b, name, dim, heads, group, Init::Xavier)
    }

    pub fn with_output_init(b: &mut Builder, name: &str, dim: usize, heads: usize, group: Group, out_init: Init) -> Self {
        Self {
            query: Linear::new(b, &format!("{name}.query"), dim, dim, group),
            key: Linear::new(b, &format!("{name}.key"), dim, dim, group),
            value: Linear::new(b, &format!("{name}.value"), dim, dim, group),
            output: Linear::with_init(b, &format!("{name}.output"), dim, dim, group, out_init),
            heads,
        }
    }

    /// Scaled dot-product attention of `queries` over `keys_values`.
    ///
    /// When `trace` is given, the post-softmax weights are appended as
    /// `weights[sample][head]`, each `[q_len, k_len]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        queries: Var,
        keys_values: Var,
        layout: &AttnLayout<'_>,
        trace: Option<&mut Vec<Vec<Tensor>>>,
    ) -> Result<Var> {
        let dim = self.query.out_dim;
        let AttnLayout { batch, q_len, k_len, .. } = *layout;
        if g.shape(queries) != [batch * q_len, dim] || g.shape(keys_values) != [batch * k_len, dim] {
            return Err(invalid(format!(
                "attention inputs {:?} / {:?} do not match layout {batch}x{q_len} / {batch}x{k_len} dim {dim}",
                g.shape(queries),
                g.shape(keys_values)
            )));
        }
        if let Some(m) = layout.key_mask {
            if m.len() != batch * k_len {
                return Err(invalid("key mask length does not match the layout"));
            }
        }
        let dh = dim / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let q = self.query.forward(g, s, queries)?;
        let k = self.key.forward(g, s, keys_values)?;
        let v = self.value.forward(g, s, keys_values)?;
        let mut trace = trace;
        let mut samples = Vec::with_capacity(batch);
        for bi in 0..batch {
            let qb = if batch == 1 { q } else { g.slice(q, 0, bi * q_len, q_len)? };
            let kb = if batch == 1 { k } else { g.slice(k, 0, bi * k_len, k_len)? };
            let vb = if batch == 1 { v } else { g.slice(v, 0, bi * k_len, k_len)? };
            let kt = g.transpose(kb)?;
            let blocked = score_mask(layout, bi);
            let mut heads = Vec::with_capacity(self.heads);
            let mut weights = Vec::new();
            for h in 0..self.heads {
                let qh = g.slice(qb, 1, h * dh, dh)?;
                let kh = g.slice(kt, 0, h * dh, dh)?;
                let vh = g.slice(vb, 1, h * dh, dh)?;
                let scores = g.matmul(qh, kh)?;
                let mut scores = g.scale(scores, scale)?;
                if let Some(m) = &blocked {
                    scores = g.mask_fill(scores, m, MASK_VALUE)?;
                }
                let p = g.softmax(scores, 1)?;
                if trace.is_some() {
                    weights.push(g.value(p).clone());
                }
                heads.push(g.matmul(p, vh)?);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(weights);
            }
            samples.push(if self.heads == 1 { heads[0] } else { g.concat(&heads, 1)? });
        }
        let merged = if batch == 1 { samples[0] } else { g.concat(&samples, 0)? };
        self.output.forward(g, s, merged)
    }
}

/// Blocked score positions of sample `bi`, or `None` when nothing is blocked.
fn score_mask(layout: &AttnLayout<'_>, bi: usize) -> Option<Vec<bool>> {
    let (q, k) = (layout.q_len, layout.k_len);
    let keys = layout.key_mask.map(|m| &m[bi * k..(bi + 1) * k]);
    let any_key = keys.is_some_and(|m| m.iter().any(|ok| !ok));
    if !any_key && !layout.causal {
        return None;
    }
    let mut blocked = vec![false; q * k];
    for i in 0..q {
        for j in 0..k {
            blocked[i * k + j] = keys.is_some_and(|m| !m[j]) || (layout.causal && j > i);
        }
    }
    Some(blocked)
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize, group: Group) -> Self {
        Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), dim, hidden, group),
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, dim, group),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, s, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, s, h)
    }
}

/// Pre-norm transformer layer: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, ffn_dim: usize, group: Group, eps: f64) -> Self {
        Self {
            ln_attn: LayerNorm::new(b, &format!("{name}.ln_attn"), dim, group, eps),
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), dim, heads, group),
            ln_ffn: LayerNorm::new(b, &format!("{name}.ln_ffn"), dim, group, eps),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), dim, ffn_dim, group),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x: Var,
        layout: &AttnLayout<'_>,
        trace: Option<&mut Vec<Vec<Tensor>>>,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, s, x)?;
        let a = self.attn.forward(g, s, h, h, layout, trace)?;
        let x = g.add(x, a)?;
        self.ffn_residual(g, s, x)
    }

    pub fn ffn_residual(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln_ffn.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, h)?;
        g.add(x, f)
    }
}
