//! Loop-based reference implementations used as test oracles.

use meter_core::config::{Architecture, FusionKind};
use meter_core::fusion::FusionOutput;
use meter_core::model::{Encoded, Model};
use meter_core::{Graph, Init, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn rows_of(t: &Tensor) -> Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, &v)| v * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn linear(s: &ParamStore, w: ParamId, b: ParamId, x: &Mat) -> Mat {
    let mut y = matmul(x, &rows_of(s.value(w)));
    let bias = s.value(b).data();
    for row in &mut y {
        for (v, bb) in row.iter_mut().zip(bias) {
            *v += bb;
        }
    }
    y
}

/// Hand-built fused states for a batch of `b` images with `v1` patches each.
pub fn ibn_case(model: &Model, g: &mut Graph, rng: &mut ChaCha8Rng, b: usize, v1: usize) -> (Encoded, Mat, Mat) {
    let d = model.config.fusion.hidden;
    let dv = model.config.vision.hidden;
    let vision = random(rng, b * (v1 + 1), d);
    let proj = random(rng, b * v1, dv);
    let text = random(rng, b, d);
    let enc = Encoded {
        fused: FusionOutput {
            text: g.constant(tensor(&text)).unwrap(),
            vision: g.leaf(tensor(&vision), true).unwrap(),
        },
        patch_proj: g.leaf(tensor(&proj), true).unwrap(),
        batch: b,
        text_len: 1,
        vision_len: v1 + 1,
        text_mask: vec![true; b],
    };
    (enc, vision, proj)
}

/// Mean over masked patches of `-log exp(h_i . c_i) / sum_j exp(h_i . c_j)`,
/// enumerating every candidate explicitly.
pub fn ibn_brute_force(model: &Model, vision: &Mat, proj: &Mat, v1: usize, mask: &[bool]) -> f64 {
    let head = &model.layout.heads.mim_ibn;
    let mut total = 0.0;
    let mut count = 0;
    for (k, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let row = (k / v1) * (v1 + 1) + 1 + k % v1;
        let h = &linear(&model.store, head.weight, head.bias, &vec![vision[row].clone()])[0];
        let dot = |c: &Vec<f64>| h.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
        let denom: f64 = proj.iter().map(|c| dot(c).exp()).sum();
        total += -(dot(&proj[k]).exp() / denom).ln();
        count += 1;
    }
    total / count as f64
}

pub fn ibn_model(seed: u64) -> Model {
    let mut m = super::micro_model(FusionKind::CoAttention, Architecture::EncoderOnly, seed);
    let head = m.layout.heads.mim_ibn.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1b4);
    for id in [head.weight, head.bias] {
        let shape = m.store.value(id).shape().to_vec();
        m.store.replace_value(id, Init::Uniform(1.0).sample(&shape, &mut rng));
    }
    m
}
