//! Finite-difference checks of every graph primitive and of each training
//! objective through the whole model.

mod common;

use common::grad_cases::{check_case, primitive_reports, project, store_of, CASES, EPS, TOL};
use meter_core::gradcheck::{check_gradients, GradCheckReport};
use meter_core::Tensor;
use proptest::prelude::*;

fn assert_passes(report: &GradCheckReport) -> std::result::Result<(), TestCaseError> {
    let worst: Vec<_> = report.failures().collect();
    prop_assert!(report.passed(), "worst {:?}", worst);
    Ok(())
}

fn tensor(shape: &[usize]) -> impl Strategy<Value = Tensor> {
    let shape = shape.to_vec();
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..4, 1usize..4, 1usize..4)
}

fn matmul_case() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
    dims().prop_flat_map(|(m, k, n)| (tensor(&[m, k]), tensor(&[k, n]), tensor(&[m, n])))
}

fn same_shape_case(count: usize) -> impl Strategy<Value = Vec<Tensor>> {
    (1usize..4, 2usize..5).prop_flat_map(move |(r, c)| prop::collection::vec(tensor(&[r, c]), count))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradient((a, b, w) in matmul_case()) {
        let (mut s, ids) = store_of(&[a, b]);
        let r = check_gradients(&mut s, &ids, |g, s| {
            let (x, y) = (g.param(s, ids[0]), g.param(s, ids[1]));
            let p = g.matmul(x, y)?;
            project(g, p, &w)
        }, EPS, TOL).unwrap();
        assert_passes(&r)?;
    }

    #[test]
    fn add_and_mul_with_broadcasting(t in same_shape_case(3), col in 0usize..3) {
        let (r, c) = (t[0].shape()[0], t[0].shape()[1]);
        // shape [r, 1], [1, c] or full
        let shape = match col { 0 => vec![r, 1], 1 => vec![1, c], _ => vec![r, c] };
        let small = Tensor::new(shape.clone(), t[1].data()[..shape.iter().product::<usize>()].to_vec()).unwrap();
        let (mut s, ids) = store_of(&[t[0].clone(), small]);
        let w = t[2].clone();
        let rep = check_gradients(&mut s, &ids, |g, s| {
            let (x, y) = (g.param(s, ids[0]), g.param(s, ids[1]));
            let a = g.add(x, y)?;
            let m = g.mul(a, y)?;
            project(g, m, &w)
        }, EPS, TOL).unwrap();
        assert_passes(&rep)?;
    }

    #[test]
    fn scale_transpose_reshape(t in same_shape_case(2), c in -3.0f64..3.0) {
        let (r, k) = (t[0].shape()[0], t[0].shape()[1]);
        let w = Tensor::new(vec![r * k], t[1].data().to_vec()).unwrap();
        let (mut s, ids) = store_of(&t[..1]);
        let rep = check_gradients(&mut s, &ids, |g, s| {
            let x = g.param(s, ids[0]);
            let y = g.scale(x, c)?;
            let y = g.transpose(y)?;
            let y = g.reshape(y, &[r * k])?;
            project(g, y, &w)
        }, EPS, TOL).unwrap();
        assert_passes(&rep)?;
    }

    #[test]
    fn concat_and_slice(t in same_shape_case(3), axis in 0usize..2) {
        let (r, c) = (t[0].shape()[0], t[0].shape()[1]);
        let (mut s, ids) = store_of(&t[..2]);
        let w = t[2].clone();
        let rep = check_gradients(&mut s, &ids, |g, s| {
            let (x, y) = (g.param(s, ids[0]), g.param(s, ids[1]));
            let cat = g.concat(&[x, y], axis)?;
            let n = if axis == 0 { r } else { c };
            // a window straddling both parts
            let start = n / 2;
            let part = g.slice(cat, axis, start, n)?;
            project(g, part, &w)
        }, EPS, TOL).unwrap();
        assert_passes(&rep)?;
    }

    #[test]
    fn softmax_both_axes(t in same_shape_case(2), axis in 0usize..2) {
        let (mut s, ids) = store_of(&t[..1]);
        let w = t[1].clone();
        let rep = check_gradients(&mut s, &ids, |g, s| {
            let x = g.param(s, ids[0]);
            let y = g.softmax(x, axis)?;
            project(g, y, &w)
        }, EPS, TOL).unwrap();
        assert_passes(&rep)?;
    }

    #[test]
    fn layer_norm_gradient(t in same_shape_case(2)) {
        let c = t[0].shape()[1];
        for row in t[0].data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assume!(var > 0.05);
        }
        let (mut s, ids) = store_of(&t[..1]);
        let w = t[1].clone();
        let rep = check_gradients(&mut s, &ids, |g, s| {
            let x = g.param(s, ids[0]);
            let y = g.layer_norm(x, 1e-5)?;
            project(g, y, &w)
        }, EPS, TOL).unwrap();
        assert_passes(&rep)?;
    }

    #[test]
    fn gelu_gradient(t in same_shape_case(2)) {
        let (mut s, ids) = store_of(&t[..1]);
        let w = t[1].clone();
        let rep = check_gradients(&mut s, &ids, |g, s| {
            let x = g.param(s, ids[0]);
            let y = g.gelu(x)?;
            project(g, y, &w)
        }, EPS, TOL).unwrap();
        assert_passes(&rep)?;
    }

    #[test]
    fn embedding_gradient(table in tensor(&[5, 3]), ids in prop::collection::vec(0usize..5, 1..7), w in tensor(&[6, 3])) {
        let (mut s, pid) = store_of(&[table]);
        let w = Tensor::new(vec![ids.len(), 3], w.data()[..ids.len() * 3].to_vec()).unwrap();
        let rep = check_gradients(&mut s, &pid, |g, s| {
            let t = g.param(s, pid[0]);
            let y = g.embedding(t, &ids)?;
            project(g, y, &w)
        }, EPS, TOL).unwrap();
        assert_passes(&rep)?;
    }

    #[test]
    fn cross_entropy_gradient(t in same_shape_case(1), picks in prop::collection::vec(prop::option::weighted(0.7, 0usize..8), 3)) {
        let (r, c) = (t[0].shape()[0], t[0].shape()[1]);
        let targets: Vec<Option<usize>> = (0..r).map(|i| picks[i].map(|p| p % c)).collect();
        prop_assume!(targets.iter().any(Option::is_some));
        let (mut s, ids) = store_of(&t);
        let rep = check_gradients(&mut s, &ids, |g, s| {
            let x = g.param(s, ids[0]);
            g.cross_entropy(x, &targets)
        }, EPS, TOL).unwrap();
        assert_passes(&rep)?;
    }

    #[test]
    fn mean_sum_mask_fill(t in same_shape_case(2), bits in prop::collection::vec(any::<bool>(), 16)) {
        let n = t[0].len();
        let mask: Vec<bool> = bits[..n].to_vec();
        let (mut s, ids) = store_of(&t[..1]);
        let w = t[1].clone();
        let rep = check_gradients(&mut s, &ids, |g, s| {
            let x = g.param(s, ids[0]);
            let m = g.mask_fill(x, &mask, -3.0)?;
            let sq = g.mul(m, m)?;
            let a = g.mean(sq)?;
            let b = project(g, m, &w)?;
            let total = g.add(a, b)?;
            let e = g.sum(total)?;
            Ok(e)
        }, EPS, TOL).unwrap();
        assert_passes(&rep)?;
    }

    /// Masked scores go through softmax the way attention uses them.
    #[test]
    fn masked_softmax_gradient(t in same_shape_case(2), bits in prop::collection::vec(any::<bool>(), 16)) {
        let (r, c) = (t[0].shape()[0], t[0].shape()[1]);
        let mut mask: Vec<bool> = bits[..r * c].to_vec();
        for row in 0..r {
            mask[row * c] = false;
        }
        let (mut s, ids) = store_of(&t[..1]);
        let w = t[1].clone();
        let rep = check_gradients(&mut s, &ids, |g, s| {
            let x = g.param(s, ids[0]);
            let m = g.mask_fill(x, &mask, meter_core::graph::MASK_VALUE)?;
            let p = g.softmax(m, 1)?;
            project(g, p, &w)
        }, EPS, TOL).unwrap();
        assert_passes(&rep)?;
    }
}

#[test]
fn seeded_primitive_sweep() {
    for seed in 0..20 {
        for (name, r) in primitive_reports(seed) {
            let worst: Vec<_> = r.failures().collect();
            assert!(r.passed(), "{name} seed {seed}: {worst:?}");
        }
    }
}

#[test]
fn every_objective_end_to_end() {
    for seed in 0..5 {
        for c in &CASES {
            let r = check_case(c, seed);
            let worst: Vec<_> = r.failures().collect();
            assert!(r.passed(), "{} {:?} seed {seed}: {worst:?}", c.objectives, c.kind);
        }
    }
}
