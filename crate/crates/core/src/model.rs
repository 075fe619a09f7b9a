//! The assembled vision-and-language model.

use alloc::vec::Vec;

use crate::config::{Architecture, FusionKind, ModelConfig};
use crate::data::vocab::CLS;
use crate::encoders::{multiscale_fuse, MultiscaleGates, TextEncoder, VisionEncoder};
use crate::error::{invalid, Result};
use crate::fusion::{
    pool_cls, CoAttentionFusion, Decoder, FusionInput, FusionOutput, FusionStack, MergedFusion,
};
use crate::graph::{Graph, Var};
use crate::nn::{AttentionRecord, Builder, Linear, ParamSpec};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Heads {
    pub mlm: Linear,
    pub itm: Linear,
    pub vqa: Linear,
    /// The projection `h` of the in-batch-negative image objective.
    pub mim_ibn: Linear,
    pub mim_dc: Linear,
    /// Present only with a decoder.
    pub span: Option<Linear>,
}

/// Module structure of a model; parameter ids point into [`Model::store`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub text_gates: Option<MultiscaleGates>,
    pub vision_gates: Option<MultiscaleGates>,
    pub text_proj: Linear,
    pub vision_proj: Linear,
    pub fusion: FusionStack,
    pub decoder: Option<Decoder>,
    pub heads: Heads,
}

impl Layout {
    /// Declares every parameter of `cfg` without allocating any tensor.
    pub fn declare(cfg: &ModelConfig) -> Result<(Layout, Builder)> {
        cfg.validate()?;
        let mut b = Builder::new();
        let text = TextEncoder::new(&mut b, cfg);
        let vision = VisionEncoder::new(&mut b, cfg);
        let (text_gates, vision_gates) = if cfg.multiscale {
            (
                Some(MultiscaleGates::new(&mut b, "text.gates", cfg.text.hidden, cfg.text.layers)),
                Some(MultiscaleGates::new(&mut b, "vision.gates", cfg.vision.hidden, cfg.vision.layers)),
            )
        } else {
            (None, None)
        };
        let d = cfg.fusion.hidden;
        let text_proj = Linear::new(&mut b, "fusion.text_proj", cfg.text.hidden, d, Group::Top);
        let vision_proj = Linear::new(&mut b, "fusion.vision_proj", cfg.vision.hidden, d, Group::Top);
        let fusion = match cfg.fusion.kind {
            FusionKind::Merged => FusionStack::Merged(MergedFusion::new(&mut b, cfg)),
            FusionKind::CoAttention => FusionStack::CoAttention(CoAttentionFusion::new(&mut b, cfg)),
        };
        let decoder = (cfg.fusion.arch == Architecture::EncoderDecoder).then(|| Decoder::new(&mut b, cfg));
        let heads = Heads {
            mlm: Linear::new(&mut b, "heads.mlm", d, cfg.vocab_size, Group::Top),
            itm: Linear::new(&mut b, "heads.itm", d, 2, Group::Top),
            vqa: Linear::new(&mut b, "heads.vqa", d, cfg.num_answers, Group::Top),
            mim_ibn: Linear::new(&mut b, "heads.mim_ibn", d, cfg.vision.hidden, Group::Top),
            mim_dc: Linear::new(&mut b, "heads.mim_dc", d, cfg.codebook_size, Group::Top),
            span: decoder
                .is_some()
                .then(|| Linear::new(&mut b, "heads.span_lm", d, cfg.vocab_size, Group::Top)),
        };
        let layout = Layout {
            text,
            vision,
            text_gates,
            vision_gates,
            text_proj,
            vision_proj,
            fusion,
            decoder,
            heads,
        };
        Ok((layout, b))
    }
}

/// Every parameter of `cfg` in declaration order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    Ok(Layout::declare(cfg)?.1.specs().to_vec())
}

/// Total parameter count of `cfg`, computed from shapes alone.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(Layout::declare(cfg)?.1.num_elements())
}

/// One batch of image-text inputs.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub batch: usize,
    pub text_len: usize,
    /// `[batch * text_len]`
    pub text_ids: &'a [usize],
    pub text_mask: &'a [bool],
    /// `[batch * grid², patch_dim]`
    pub patches: &'a Tensor,
    pub grid: usize,
    /// `[batch * grid²]`, true where the patch is replaced by the mask token.
    pub patch_mask: Option<&'a [bool]>,
}

/// Fused states of one forward pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub fused: FusionOutput,
    /// `[batch * grid², d_vision]` projected patches before masking.
    pub patch_proj: Var,
    pub batch: usize,
    pub text_len: usize,
    /// `grid² + 1`
    pub vision_len: usize,
    pub text_mask: Vec<bool>,
}

impl Encoded {
    pub fn fusion_input(&self) -> FusionInput<'_> {
        FusionInput {
            text: self.fused.text,
            vision: self.fused.vision,
            batch: self.batch,
            text_len: self.text_len,
            vision_len: self.vision_len,
            text_mask: &self.text_mask,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (layout, builder) = Layout::declare(&config)?;
        let store = builder.materialize(config.init_seed)?;
        Ok(Self { config, layout, store })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    /// Encoders, projections and the fusion stack.
    ///
    /// `probe` is called with a stage name after each major stage finishes,
    /// which lets callers time the forward pass piecewise.
    pub fn forward(
        &self,
        g: &mut Graph,
        inp: &ModelInput<'_>,
        mut trace: Option<&mut Vec<AttentionRecord>>,
        mut probe: Option<&mut dyn FnMut(&str)>,
    ) -> Result<Encoded> {
        let s = &self.store;
        let l = &self.layout;
        let n = inp.grid * inp.grid;
        if inp.patches.shape() != [inp.batch * n, self.config.patch_dim()] {
            return Err(invalid(alloc::format!(
                "patches {:?} do not match batch {} of {n} patches with dim {}",
                inp.patches.shape(),
                inp.batch,
                self.config.patch_dim()
            )));
        }
        let text_out = l.text.forward(
            g,
            s,
            inp.text_ids,
            inp.text_mask,
            inp.batch,
            inp.text_len,
            trace.as_deref_mut(),
        )?;
        let text = match &l.text_gates {
            Some(gates) => multiscale_fuse(g, s, &text_out, gates)?,
            None => text_out.output,
        };
        if let Some(p) = probe.as_deref_mut() {
            p("text_encoder");
        }
        let patches = g.constant(inp.patches.clone())?;
        let emb = l.vision.embed(g, s, patches, inp.batch, inp.grid, inp.patch_mask)?;
        let vision_out = l.vision.forward(g, s, &emb, inp.batch, inp.grid, trace.as_deref_mut())?;
        let vision = match &l.vision_gates {
            Some(gates) => multiscale_fuse(g, s, &vision_out, gates)?,
            None => vision_out.output,
        };
        if let Some(p) = probe.as_deref_mut() {
            p("vision_encoder");
        }
        let text = l.text_proj.forward(g, s, text)?;
        let vision = l.vision_proj.forward(g, s, vision)?;
        let fin = FusionInput {
            text,
            vision,
            batch: inp.batch,
            text_len: inp.text_len,
            vision_len: n + 1,
            text_mask: inp.text_mask,
        };
        let fused = l.fusion.forward(g, s, &fin, trace, probe)?;
        Ok(Encoded {
            fused,
            patch_proj: emb.patch_proj,
            batch: inp.batch,
            text_len: inp.text_len,
            vision_len: n + 1,
            text_mask: inp.text_mask.to_vec(),
        })
    }

    /// Decoder states for teacher-forced `dec_ids` (`[batch * dec_len]`).
    pub fn decode(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        dec_ids: &[usize],
        dec_len: usize,
        trace: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var> {
        let dec = self
            .layout
            .decoder
            .as_ref()
            .ok_or_else(|| invalid("decoding requires fusion.arch = encoder_decoder"))?;
        dec.forward(g, &self.store, &enc.fused, &enc.fusion_input(), dec_ids, dec_len, trace)
    }

    /// `[batch, d]` representation for the classification heads.
    ///
    /// Encoder-only models use the text class-token state; encoder-decoder
    /// models feed the decoder a lone `[CLS]` token and use its output.
    pub fn pooled(&self, g: &mut Graph, enc: &Encoded) -> Result<Var> {
        match self.config.fusion.arch {
            Architecture::EncoderOnly => pool_cls(g, &enc.fused, &enc.fusion_input()),
            Architecture::EncoderDecoder => {
                let ids = alloc::vec![CLS; enc.batch];
                self.decode(g, enc, &ids, 1, None)
            }
        }
    }
}
