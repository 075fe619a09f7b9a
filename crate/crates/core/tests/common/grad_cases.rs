//! Gradient-check cases shared by the core gradient tests and the acceptance run.

use meter_core::config::{Architecture, CrossOrder, FusionKind, ObjectiveSet};
use meter_core::gradcheck::{check_gradients, check_gradients_at, GradCheckReport};
use meter_core::train::{compute_losses, trainable_params, TrainConfig};
use meter_core::{Graph, Group, ParamId, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn store_of(tensors: &[Tensor]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = tensors
        .iter()
        .enumerate()
        .map(|(i, t)| s.add(format!("x{i}"), Group::Top, t.clone()).unwrap())
        .collect();
    (s, ids)
}

/// `sum(x * w)` for a fixed `w`, so every output element gets a distinct weight.
pub fn project(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let c = g.constant(w.clone())?;
    let p = g.mul(x, c)?;
    g.sum(p)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn check(tensors: &[Tensor], f: impl Fn(&mut Graph, &ParamStore, &[ParamId]) -> Result<Var>) -> GradCheckReport {
    let (mut s, ids) = store_of(tensors);
    check_gradients(&mut s, &ids, |g, s| f(g, s, &ids), EPS, TOL).unwrap()
}

/// One seeded check of every graph primitive at a random small shape.
pub fn primitive_reports(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9121);
    let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let (r, c) = (rng.random_range(2..4), rng.random_range(2..5));
    let a = uniform(&mut rng, &[m, k]);
    let b = uniform(&mut rng, &[k, n]);
    let wmn = uniform(&mut rng, &[m, n]);
    let x = uniform(&mut rng, &[r, c]);
    let y = uniform(&mut rng, &[r, c]);
    let w = uniform(&mut rng, &[r, c]);
    let row = uniform(&mut rng, &[1, c]);
    let col = uniform(&mut rng, &[r, 1]);
    let mut out = Vec::new();
    out.push(("matmul", check(&[a, b], |g, s, ids| {
        let (p, q) = (g.param(s, ids[0]), g.param(s, ids[1]));
        let z = g.matmul(p, q)?;
        project(g, z, &wmn)
    })));
    for (name, small) in [("add_mul_row_broadcast", &row), ("add_mul_col_broadcast", &col), ("add_mul", &y)] {
        out.push((name, check(&[x.clone(), small.clone()], |g, s, ids| {
            let (p, q) = (g.param(s, ids[0]), g.param(s, ids[1]));
            let z = g.add(p, q)?;
            let z = g.mul(z, q)?;
            project(g, z, &w)
        })));
    }
    let flat = Tensor::new(vec![r * c], w.data().to_vec()).unwrap();
    out.push(("scale_transpose_reshape", check(std::slice::from_ref(&x), |g, s, ids| {
        let p = g.param(s, ids[0]);
        let z = g.scale(p, -1.7)?;
        let z = g.transpose(z)?;
        let z = g.reshape(z, &[r * c])?;
        project(g, z, &flat)
    })));
    for axis in [0, 1] {
        let name = if axis == 0 { "concat_slice_rows" } else { "concat_slice_cols" };
        out.push((name, check(&[x.clone(), y.clone()], |g, s, ids| {
            let (p, q) = (g.param(s, ids[0]), g.param(s, ids[1]));
            let cat = g.concat(&[p, q], axis)?;
            let len = if axis == 0 { r } else { c };
            let part = g.slice(cat, axis, len / 2, len)?;
            project(g, part, &w)
        })));
        let name = if axis == 0 { "softmax_axis0" } else { "softmax_axis1" };
        out.push((name, check(std::slice::from_ref(&x), |g, s, ids| {
            let p = g.param(s, ids[0]);
            let z = g.softmax(p, axis)?;
            project(g, z, &w)
        })));
    }
    // rows spread far enough apart that layer norm sits away from its singular point
    let spread = Tensor::new(
        vec![r, c],
        (0..r * c).map(|i| x.data()[i] + (i % c) as f64 * 0.8).collect(),
    )
    .unwrap();
    out.push(("layer_norm", check(&[spread], |g, s, ids| {
        let p = g.param(s, ids[0]);
        let z = g.layer_norm(p, 1e-5)?;
        project(g, z, &w)
    })));
    out.push(("gelu", check(std::slice::from_ref(&x), |g, s, ids| {
        let p = g.param(s, ids[0]);
        let z = g.gelu(p)?;
        project(g, z, &w)
    })));
    let table = uniform(&mut rng, &[5, 3]);
    let picks: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
    let we = uniform(&mut rng, &[6, 3]);
    out.push(("embedding", check(&[table], |g, s, ids| {
        let t = g.param(s, ids[0]);
        let z = g.embedding(t, &picks)?;
        project(g, z, &we)
    })));
    let mut targets: Vec<Option<usize>> = (0..r).map(|_| Some(rng.random_range(0..c))).collect();
    targets[r - 1] = None;
    out.push(("cross_entropy", check(std::slice::from_ref(&x), |g, s, ids| {
        let p = g.param(s, ids[0]);
        g.cross_entropy(p, &targets)
    })));
    let mut mask: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.4)).collect();
    out.push(("mean_sum_mask_fill", check(std::slice::from_ref(&x), |g, s, ids| {
        let p = g.param(s, ids[0]);
        let m = g.mask_fill(p, &mask, -3.0)?;
        let sq = g.mul(m, m)?;
        let a = g.mean(sq)?;
        let b = project(g, m, &w)?;
        let t = g.add(a, b)?;
        g.sum(t)
    })));
    for i in 0..r {
        mask[i * c] = false;
    }
    out.push(("masked_softmax", check(std::slice::from_ref(&x), |g, s, ids| {
        let p = g.param(s, ids[0]);
        let m = g.mask_fill(p, &mask, meter_core::graph::MASK_VALUE)?;
        let z = g.softmax(m, 1)?;
        project(g, z, &w)
    })));
    out
}

pub struct Case {
    pub kind: FusionKind,
    pub arch: Architecture,
    pub multiscale: bool,
    pub order: CrossOrder,
    pub objectives: &'static str,
}

pub const CASES: [Case; 7] = [
    Case { kind: FusionKind::CoAttention, arch: Architecture::EncoderOnly, multiscale: false, order: CrossOrder::TextFirst, objectives: "mlm" },
    Case { kind: FusionKind::Merged, arch: Architecture::EncoderOnly, multiscale: false, order: CrossOrder::TextFirst, objectives: "itm" },
    Case { kind: FusionKind::CoAttention, arch: Architecture::EncoderOnly, multiscale: false, order: CrossOrder::TextFirst, objectives: "mim_ibn" },
    Case { kind: FusionKind::Merged, arch: Architecture::EncoderOnly, multiscale: true, order: CrossOrder::TextFirst, objectives: "mim_dc" },
    Case { kind: FusionKind::CoAttention, arch: Architecture::EncoderDecoder, multiscale: false, order: CrossOrder::TextFirst, objectives: "span_lm" },
    Case { kind: FusionKind::Merged, arch: Architecture::EncoderDecoder, multiscale: false, order: CrossOrder::VisionFirst, objectives: "span_lm,itm" },
    Case { kind: FusionKind::CoAttention, arch: Architecture::EncoderOnly, multiscale: true, order: CrossOrder::TextFirst, objectives: "vqa" },
];

/// Coordinates checked per tensor in the whole-model cases. The full sweep
/// over every scalar of every tensor takes about three minutes per seed.
pub const SAMPLED_COORDS: usize = 32;

/// Which flat indices of a tensor of `len` scalars to perturb: all of them
/// for small tensors, otherwise both ends plus a seeded sample. Tensors the
/// loss does not reach get only the ends, which must show a zero derivative.
pub fn sampled_coords(len: usize, reached: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let budget = if reached { SAMPLED_COORDS } else { 2 };
    if len <= budget {
        return (0..len).collect();
    }
    let mut ks: Vec<usize> = rand::seq::index::sample(rng, len - 2, budget - 2).into_iter().map(|k| k + 1).collect();
    ks.extend([0, len - 1]);
    ks.sort_unstable();
    ks
}

/// A micro model against central differences of one training loss. The
/// in-batch-negative candidates are detached projected patches, so the patch
/// projection is excluded for that objective: its numeric derivative also
/// moves the candidates.
///
/// Embedding tables and learned tokens are redrawn uniformly in [-1, 1]. At
/// their small initial scale a masked patch row (mask token plus position)
/// reaches layer norm with tiny variance, where the third derivative is large
/// enough that the eps = 1e-5 central difference itself misses by more than
/// the tolerance.
pub fn check_case(c: &Case, seed: u64) -> GradCheckReport {
    let mut cfg = super::micro_config(c.kind, c.arch);
    cfg.multiscale = c.multiscale;
    cfg.fusion.cross_order = c.order;
    cfg.init_seed = seed;
    let mut model = meter_core::model::Model::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let p = model.store.get_mut(id);
        let learned_vectors = ["_embed", "cls_token", "mask_patch"];
        if learned_vectors.iter().any(|s| p.name.ends_with(s)) {
            for v in p.value.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    let (_, data) = super::dataset(100 + seed, 3, 32, model.config.codebook_size);
    let tc = TrainConfig {
        objectives: c.objectives.parse::<ObjectiveSet>().unwrap(),
        batch_size: 3,
        mlm_ratio: 0.3,
        mim_ratio: 0.3,
        span_ratio: 0.3,
        seed,
        ..TrainConfig::default()
    };
    let reached = trainable_params(&model, &data, &tc).unwrap();
    let detached = tc.objectives.contains(meter_core::config::Objective::MimIbn);
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| !(detached && p.name.starts_with("vision.patch_embed")))
        .map(|(id, _)| id)
        .collect();
    let coords: Vec<Vec<usize>> = ids
        .iter()
        .map(|id| sampled_coords(model.store.value(*id).len(), reached.contains(id), &mut rng))
        .collect();
    let mut store = model.store.clone();
    check_gradients_at(
        &mut store,
        &ids,
        &coords,
        |g, s| {
            let m = super::with_store(&model, s);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(compute_losses(g, &m, &data, &[0, 1, 2], &tc, &mut rng)?.total)
        },
        EPS,
        TOL,
    )
    .unwrap()
}
