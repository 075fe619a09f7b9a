//! Architecture and objective configuration.
//!
//! Every ablation axis lives here. [`ModelConfig::canonical`] renders the
//! architecture as sorted `key = value` lines; the checkpoint digest is
//! computed from that text.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: f64,
    /// Vision only.
    pub patch_size: usize,
    pub max_positions: usize,
}

impl EncoderConfig {
    pub fn ffn_dim(&self) -> usize {
        libm::round(self.hidden as f64 * self.ffn_mult) as usize
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{what}: hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config(format!("{what}: layers must be >= 1")));
        }
        if self.ffn_dim() == 0 || self.max_positions == 0 {
            return Err(Error::Config(format!("{what}: ffn and positions must be non-empty")));
        }
        Ok(())
    }
}

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $kw:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn keyword(self) -> &'static str {
                match self { $($name::$variant => $kw),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.keyword())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($kw => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("invalid ", stringify!($name), " {:?}, expected one of {:?}"),
                        s,
                        [$($kw),+]
                    ))),
                }
            }
        }
    };
}

keyword_enum!(FusionKind { Merged => "merged", CoAttention => "coattn" });
keyword_enum!(Architecture { EncoderOnly => "encoder_only", EncoderDecoder => "encoder_decoder" });
keyword_enum!(CrossOrder { TextFirst => "text_first", VisionFirst => "vision_first" });
keyword_enum!(Objective {
    Mlm => "mlm",
    Itm => "itm",
    MimIbn => "mim_ibn",
    MimDc => "mim_dc",
    SpanLm => "span_lm",
    Vqa => "vqa",
});

impl FusionKind {
    /// Layer counts that give the two fusion kinds comparable sizes.
    pub fn default_layers(self) -> usize {
        match self {
            FusionKind::Merged => 12,
            FusionKind::CoAttention => 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: f64,
    pub arch: Architecture,
    pub dec_layers: usize,
    pub cross_order: CrossOrder,
}

impl FusionConfig {
    pub fn ffn_dim(&self) -> usize {
        libm::round(self.hidden as f64 * self.ffn_mult) as usize
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "fusion: hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("fusion: layers must be >= 1".into()));
        }
        if self.arch == Architecture::EncoderDecoder && self.dec_layers == 0 {
            return Err(Error::Config("encoder_decoder requires dec_layers >= 1".into()));
        }
        Ok(())
    }
}

/// An ordered set of enabled objectives.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ObjectiveSet(BTreeSet<Objective>);

impl ObjectiveSet {
    pub fn new(items: impl IntoIterator<Item = Objective>) -> Self {
        Self(items.into_iter().collect())
    }

    pub fn contains(&self, o: Objective) -> bool {
        self.0.contains(&o)
    }

    pub fn iter(&self) -> impl Iterator<Item = Objective> + '_ {
        self.0.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn uses_mim(&self) -> bool {
        self.contains(Objective::MimIbn) || self.contains(Objective::MimDc)
    }

    pub fn validate(&self, arch: Architecture) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("at least one objective must be enabled".into()));
        }
        if self.contains(Objective::MimIbn) && self.contains(Objective::MimDc) {
            return Err(Error::Config("mim_ibn and mim_dc cannot both be enabled".into()));
        }
        if self.contains(Objective::SpanLm) && arch != Architecture::EncoderDecoder {
            return Err(Error::Config("span_lm requires fusion.arch = encoder_decoder".into()));
        }
        Ok(())
    }
}

impl fmt::Display for ObjectiveSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self.0.iter().map(|o| o.keyword()).collect();
        f.write_str(&words.join(","))
    }
}

impl FromStr for ObjectiveSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .map(Objective::from_str)
            .collect::<Result<BTreeSet<_>>>()
            .map(ObjectiveSet)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub text: EncoderConfig,
    pub vision: EncoderConfig,
    pub fusion: FusionConfig,
    pub vocab_size: usize,
    pub num_answers: usize,
    pub codebook_size: usize,
    /// Square input resolution in pixels.
    pub resolution: usize,
    /// Gated sum over encoder layer outputs before fusion.
    pub multiscale: bool,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// CPU-sized preset used by the tests and the default CLI runs.
    pub fn toy(vocab_size: usize) -> Self {
        let enc = EncoderConfig {
            hidden: 64,
            heads: 4,
            layers: 2,
            ffn_mult: 4.0,
            patch_size: 8,
            max_positions: 32,
        };
        Self {
            text: enc.clone(),
            vision: EncoderConfig {
                max_positions: 17,
                ..enc
            },
            fusion: FusionConfig {
                kind: FusionKind::CoAttention,
                layers: 2,
                hidden: 64,
                heads: 4,
                ffn_mult: 4.0,
                arch: Architecture::EncoderOnly,
                dec_layers: 1,
                cross_order: CrossOrder::TextFirst,
            },
            vocab_size,
            num_answers: crate::data::ANSWERS.len(),
            codebook_size: 64,
            resolution: 32,
            multiscale: false,
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }

    /// Base-size shapes: hidden 768, 12 heads, 12-layer encoders, M = 6 co-attention.
    pub fn paper_base(vocab_size: usize) -> Self {
        let enc = EncoderConfig {
            hidden: 768,
            heads: 12,
            layers: 12,
            ffn_mult: 4.0,
            patch_size: 8,
            max_positions: 40,
        };
        Self {
            text: enc.clone(),
            vision: EncoderConfig {
                max_positions: 17,
                ..enc
            },
            fusion: FusionConfig {
                kind: FusionKind::CoAttention,
                layers: 6,
                hidden: 768,
                heads: 12,
                ffn_mult: 4.0,
                arch: Architecture::EncoderOnly,
                dec_layers: 3,
                cross_order: CrossOrder::TextFirst,
            },
            vocab_size,
            num_answers: crate::data::ANSWERS.len(),
            codebook_size: 64,
            resolution: 32,
            multiscale: false,
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }

    /// Number of image patches per side.
    pub fn grid(&self) -> usize {
        self.resolution / self.vision.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.vision.patch_size * self.vision.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate("text")?;
        self.vision.validate("vision")?;
        self.fusion.validate()?;
        let p = self.vision.patch_size;
        if p == 0 || !self.resolution.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by patch size {p}",
                self.resolution
            )));
        }
        if self.vision.max_positions != self.num_patches() + 1 {
            return Err(Error::Config(format!(
                "vision.max_positions {} must equal patches + 1 = {}",
                self.vision.max_positions,
                self.num_patches() + 1
            )));
        }
        if self.vocab_size <= crate::data::vocab::FIRST_WORD {
            return Err(Error::Config("vocab_size must exceed the reserved ids".into()));
        }
        if self.codebook_size < 2 || self.num_answers == 0 {
            return Err(Error::Config("codebook_size >= 2 and num_answers >= 1 required".into()));
        }
        Ok(())
    }

    /// Sorted `key = value` lines describing the architecture.
    pub fn canonical(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        for (prefix, e) in [("text", &self.text), ("vision", &self.vision)] {
            lines.push(format!("{prefix}.hidden = {}", e.hidden));
            lines.push(format!("{prefix}.heads = {}", e.heads));
            lines.push(format!("{prefix}.layers = {}", e.layers));
            lines.push(format!("{prefix}.ffn_mult = {:?}", e.ffn_mult));
            lines.push(format!("{prefix}.max_positions = {}", e.max_positions));
        }
        lines.push(format!("vision.patch_size = {}", self.vision.patch_size));
        let f = &self.fusion;
        lines.push(format!("fusion.kind = {}", f.kind));
        lines.push(format!("fusion.layers = {}", f.layers));
        lines.push(format!("fusion.hidden = {}", f.hidden));
        lines.push(format!("fusion.heads = {}", f.heads));
        lines.push(format!("fusion.ffn_mult = {:?}", f.ffn_mult));
        lines.push(format!("fusion.arch = {}", f.arch));
        lines.push(format!("fusion.dec_layers = {}", f.dec_layers));
        lines.push(format!("fusion.cross_order = {}", f.cross_order));
        lines.push(format!("model.vocab_size = {}", self.vocab_size));
        lines.push(format!("model.num_answers = {}", self.num_answers));
        lines.push(format!("model.codebook_size = {}", self.codebook_size));
        lines.push(format!("model.resolution = {}", self.resolution));
        lines.push(format!("model.multiscale = {}", self.multiscale));
        lines.push(format!("model.ln_eps = {:?}", self.ln_eps));
        lines.push(format!("model.init_seed = {}", self.init_seed));
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}
