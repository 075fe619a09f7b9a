//! Text-to-image attention maps as grayscale images.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use meter_core::config::FusionKind;
use meter_core::data::vocab::wrap_ids;
use meter_core::data::Vocabulary;
use meter_core::model::{Model, ModelInput};
use meter_core::nn::AttentionRecord;
use meter_core::train::Dataset;
use meter_core::Graph;

use crate::io::encode_pgm;

/// Min-max scales `values` to 0..=255. A constant map becomes all zeros.
pub fn normalize_map(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    /// Position in the wrapped text sequence (0 is `[CLS]`).
    pub token_index: usize,
    pub token: String,
    pub grid: usize,
    /// Attention over the image patches in row-major patch order.
    pub raw: Vec<f64>,
}

impl AttentionMap {
    pub fn file_name(&self) -> String {
        format!("attn_L{}_H{}_T{}_{}.pgm", self.layer, self.head, self.token_index, self.token)
    }

    pub fn pgm(&self) -> Vec<u8> {
        encode_pgm(self.grid, self.grid, &normalize_map(&self.raw))
    }
}

/// Runs a traced forward pass on example `record` and collects the
/// text-to-patch attention of the selected fusion layers.
///
/// Co-attention exports each text token's cross-attention row; merged
/// attention exports the patch columns of the text row of the joint map.
/// `layers` empty selects all layers; `token` `None` selects every caption word.
pub fn attention_maps(
    model: &Model,
    data: &Dataset,
    vocab: &Vocabulary,
    record: usize,
    layers: &[usize],
    token: Option<usize>,
) -> Result<Vec<AttentionMap>> {
    ensure!(record < data.len(), "record {record} out of range for {} examples", data.len());
    let e = &data.examples[record];
    let text = wrap_ids(&e.caption, data.text_len)?;
    let words = e.caption.len();
    let tokens: Vec<usize> = match token {
        Some(t) if (1..=words).contains(&t) => vec![t],
        Some(t) => bail!("token index {t} out of range: caption words occupy positions 1..={words}"),
        None => (1..=words).collect(),
    };
    let patches = data.patches(&[record]);
    let inp = ModelInput {
        batch: 1,
        text_len: data.text_len,
        text_ids: &text.ids,
        text_mask: &text.mask,
        patches: &patches,
        grid: data.grid,
        patch_mask: None,
    };
    let mut trace: Vec<AttentionRecord> = Vec::new();
    let mut g = Graph::new();
    model.forward(&mut g, &inp, Some(&mut trace), None)?;
    let depth = model.config.fusion.layers;
    let selected: Vec<usize> = if layers.is_empty() { (0..depth).collect() } else { layers.to_vec() };
    let n = data.grid * data.grid;
    let t_len = data.text_len;
    let mut out = Vec::new();
    for &layer in &selected {
        ensure!(layer < depth, "layer {layer} out of range for {depth} fusion layers");
        let (module, col0) = match model.config.fusion.kind {
            FusionKind::CoAttention => (format!("fusion.layer{layer}.text.cross_attn"), 1),
            FusionKind::Merged => (format!("fusion.layer{layer}.attn"), t_len + 1),
        };
        let rec = trace
            .iter()
            .find(|r| r.module == module)
            .with_context(|| format!("no attention trace for {module}"))?;
        for (head, w) in rec.weights[0].iter().enumerate() {
            for &t in &tokens {
                let row = w.row(t);
                out.push(AttentionMap {
                    layer,
                    head,
                    token_index: t,
                    token: vocab.token(text.ids[t]).unwrap_or("unk").to_string(),
                    grid: data.grid,
                    raw: row[col0..col0 + n].to_vec(),
                });
            }
        }
    }
    Ok(out)
}

pub fn write_maps(maps: &[AttentionMap], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut paths = Vec::with_capacity(maps.len());
    for m in maps {
        let p = out_dir.join(m.file_name());
        fs::write(&p, m.pgm()).with_context(|| format!("writing {}", p.display()))?;
        paths.push(p);
    }
    Ok(paths)
}
