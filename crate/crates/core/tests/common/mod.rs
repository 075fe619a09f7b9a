#![allow(dead_code)]

pub mod grad_cases;
pub mod naive;

use meter_core::config::{Architecture, FusionKind, ModelConfig};
use meter_core::data::{fit_codebook, generate_corpus, grammar_terminals, PairRecord, Vocabulary};
use meter_core::model::Model;
use meter_core::train::Dataset;
use meter_core::Tensor;

pub fn vocab() -> Vocabulary {
    Vocabulary::build(grammar_terminals())
}

/// Hidden 8, one layer everywhere: small enough for exhaustive finite differences.
pub fn micro_config(kind: FusionKind, arch: Architecture) -> ModelConfig {
    let mut c = ModelConfig::toy(vocab().len());
    for e in [&mut c.text, &mut c.vision] {
        e.hidden = 8;
        e.heads = 2;
        e.layers = 1;
        e.ffn_mult = 2.0;
    }
    c.text.max_positions = 24;
    c.fusion.kind = kind;
    c.fusion.arch = arch;
    c.fusion.hidden = 8;
    c.fusion.heads = 2;
    c.fusion.layers = 1;
    c.fusion.ffn_mult = 2.0;
    c.fusion.dec_layers = 1;
    c.codebook_size = 4;
    c
}

pub fn micro_model(kind: FusionKind, arch: Architecture, seed: u64) -> Model {
    let mut c = micro_config(kind, arch);
    c.init_seed = seed;
    Model::new(c).unwrap()
}

/// A quantized question-answer dataset of `n` pairs.
pub fn dataset(seed: u64, n: usize, resolution: usize, codebook_size: usize) -> (Vec<PairRecord>, Dataset) {
    let records = generate_corpus(seed, n, resolution, true).unwrap();
    let mut rows = 0;
    let mut data = Vec::new();
    for r in &records {
        let p = r.image.patches(8).unwrap();
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let points = Tensor::new(vec![rows, 192], data).unwrap();
    let cb = fit_codebook(&points, codebook_size, seed, 10).unwrap().codebook;
    let ds = Dataset::from_records(&records, &vocab(), 8, Some(&cb)).unwrap();
    (records, ds)
}

/// A model sharing `m`'s layout with its weights taken from `store`.
pub fn with_store(m: &Model, store: &meter_core::ParamStore) -> Model {
    Model {
        config: m.config.clone(),
        layout: m.layout.clone(),
        store: store.clone(),
    }
}
