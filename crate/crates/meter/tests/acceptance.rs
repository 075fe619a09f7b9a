//! The thirteen acceptance criteria at their stated tolerances.
//!
//! Everything runs in one test so the training runs execute back to back on
//! an otherwise idle machine, and later criteria reuse earlier checkpoints.
//! Each criterion prints one PASS/FAIL line straight to stdout.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use common::grad_cases::{check_case, primitive_reports, CASES};
use common::naive::{ibn_brute_force, ibn_case, ibn_model, random, tensor};
use meter::bench::parity;
use meter::commands::{self, CHECKPOINT, FINETUNED, METRICS};
use meter::config::{vocabulary, RunConfig};
use meter::io::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use meter::metrics::{read_metrics, without_wall_clock};
use meter_core::checkpoint::Checkpoint;
use meter_core::config::{FusionKind, ModelConfig};
use meter_core::data::vocab::{is_special, wrap_ids};
use meter_core::data::{fit_codebook, generate_pair, parse_caption, Image, Scene};
use meter_core::encoders::interpolate_pos_embed;
use meter_core::model::{count_parameters, Model};
use meter_core::objectives::{
    mask_patches, mim_ibn_logits, mim_ibn_loss, mlm_corrupt, sample_itm_pairs, span_corrupt, span_decorrupt, CountRule,
};
use meter_core::train::{evaluate, train, EvalTask, MetricsRecord, NoClock, TrainConfig};
use meter_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn announce(id: usize, name: &str, v: &Verdict, secs: f64) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    if id == 1 {
        let _ = writeln!(out);
    }
    let _ = writeln!(out, "criterion {id:>2} [{status}] {name}: {} ({secs:.1} s)", v.detail);
    let _ = out.flush();
}

fn toy(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse("", &[]).unwrap();
    cfg.paths.out_dir = out.to_path_buf();
    cfg
}

fn with(cfg: &RunConfig, settings: &[(&str, &str)]) -> RunConfig {
    let mut c = cfg.clone();
    for (k, v) in settings {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

fn final_eval(records: &[MetricsRecord], key: &str) -> f64 {
    records.last().and_then(|r| r.eval.get(key).copied()).unwrap_or(f64::NAN)
}

// 1
fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let (mut checks, mut worst, mut failed) = (0, 0.0f64, Vec::new());
    for seed in 0..5 {
        for (name, r) in primitive_reports(seed) {
            checks += 1;
            worst = worst.max(r.max_rel_error());
            if !r.passed() {
                failed.push(format!("{name}@{seed}"));
            }
        }
        for c in &CASES {
            let r = check_case(c, seed);
            checks += 1;
            worst = worst.max(r.max_rel_error());
            if !r.passed() {
                failed.push(format!("{}/{}/{}@{seed}", c.kind, c.arch, c.objectives));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        failed.is_empty() && secs < 300.0,
        format!("{checks} checks over 5 seeds, worst relative error {worst:.2e}, failed {failed:?}, {secs:.0} s of 300"),
    )
}

// 2
fn ibn_loss_fidelity() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let model = ibn_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let (enc, vision, proj) = ibn_case(&model, &mut g, &mut rng, 2, 2);
        for mask in [[true, false, false, true], [true, true, true, true], [false, false, true, false]] {
            let term = mim_ibn_loss(&mut g, &model, &enc, &mask).unwrap();
            let got = g.item(term.value).unwrap();
            worst = worst.max((got - ibn_brute_force(&model, &vision, &proj, 2, &mask)).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut g = Graph::new();
    let h = g.constant(tensor(&random(&mut rng, 4, 8))).unwrap();
    let c = g.constant(tensor(&random(&mut rng, 4, 8))).unwrap();
    let logits = mim_ibn_logits(&mut g, h, c).unwrap();
    let p = g.softmax(logits, 1).unwrap();
    let sum_err = (0..4)
        .map(|r| (g.value(p).row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let model = ibn_model(1);
    let mut g = Graph::new();
    let (enc, _, _) = ibn_case(&model, &mut g, &mut rng, 1, 1);
    let term = mim_ibn_loss(&mut g, &model, &enc, &[true]).unwrap();
    let single = g.item(term.value).unwrap();
    verdict(
        worst < 1e-9 && sum_err < 1e-9 && single == 0.0,
        format!("brute-force gap {worst:.1e}, probability-sum error {sum_err:.1e}, single-candidate loss {single}"),
    )
}

// 3
fn masking_rates() -> Verdict {
    let v = vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut eligible, mut picked, mut special_hits, mut seed) = (0usize, 0usize, 0usize, 0u64);
    while eligible < 100_000 {
        let words = v.word_ids(&Scene::generate(seed).caption()).unwrap();
        seed += 1;
        let e = wrap_ids(&words, words.len() + 4).unwrap();
        let c = mlm_corrupt(&e.ids, &e.mask, 0.15, v.len(), CountRule::Stochastic, &mut rng).unwrap();
        for (i, t) in c.targets.iter().enumerate() {
            if is_special(e.ids[i]) || !e.mask[i] {
                special_hits += usize::from(t.is_some());
            } else {
                eligible += 1;
                picked += usize::from(t.is_some());
            }
        }
    }
    let (mut patches, mut masked) = (0usize, 0usize);
    while patches < 100_000 {
        let m = mask_patches(16, 16, 0.15, CountRule::Stochastic, &mut rng).unwrap();
        patches += m.len();
        masked += m.iter().filter(|&&b| b).count();
    }
    let mlm = picked as f64 / eligible as f64;
    let mim = masked as f64 / patches as f64;
    // the patch mask indexes image patches only, so the vision class slot cannot be chosen
    verdict(
        (mlm - 0.15).abs() <= 0.01 && (mim - 0.15).abs() <= 0.01 && special_hits == 0,
        format!("MLM {mlm:.4} over {eligible} tokens, MIM {mim:.4} over {patches} patches, specials selected {special_hits}"),
    )
}

// 4
fn itm_sampling() -> Verdict {
    let scenes: Vec<Scene> = (0..512).map(Scene::generate).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut pairs, mut mismatched, mut bad) = (0usize, 0usize, 0usize);
    for _ in 0..10_000 {
        let batch: Vec<Scene> = (0..16).map(|_| scenes[rng.random_range(0..scenes.len())].clone()).collect();
        for (i, p) in sample_itm_pairs(&batch, &mut rng).unwrap().iter().enumerate() {
            pairs += 1;
            if p.label == 0 {
                mismatched += 1;
                let mut parsed = parse_caption(&batch[p.caption].caption()).unwrap();
                parsed.sort_by_key(|o| o.cell);
                bad += usize::from(parsed == batch[i].objects);
            }
        }
    }
    let frac = mismatched as f64 / pairs as f64;
    verdict(
        (frac - 0.5).abs() <= 0.02 && bad == 0,
        format!("mismatch fraction {frac:.4} over {pairs} pairs, mismatched captions describing their image {bad}"),
    )
}

// 5 and 6
#[derive(Clone, Copy)]
struct Pretrained {
    label: &'static str,
    itm: f64,
    mlm: Option<f64>,
    secs: f64,
}

fn pretrain_point(base: &RunConfig, label: &'static str, settings: &[(&str, &str)], dir: &Path) -> Pretrained {
    let mut cfg = with(base, settings);
    cfg.paths.out_dir = dir.to_path_buf();
    let start = Instant::now();
    let out = commands::pretrain(&cfg).unwrap();
    Pretrained {
        label,
        itm: final_eval(&out.records, "itm_acc"),
        mlm: out.records.last().and_then(|r| r.eval.get("mlm_acc").copied()),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn toy_learning(base: &RunConfig, dir: &Path) -> (Verdict, Pretrained) {
    let untrained = Model::new(base.model.clone()).unwrap();
    let records = commands::load_records(base, 32, false).unwrap();
    let data = commands::build_dataset(base, &records, &base.train.objectives).unwrap();
    let baseline = evaluate(&untrained, &data, EvalTask::Itm, base.train.seed, 16).unwrap();
    let run = pretrain_point(base, "coattn/encoder_only", &[], dir);
    let mlm = run.mlm.unwrap_or(f64::NAN);
    let v = verdict(
        run.itm >= 0.95 && mlm >= 0.90 && (baseline - 0.5).abs() <= 0.05 && run.secs <= 600.0,
        format!(
            "ITM {:.4} (>= 0.95), MLM {mlm:.4} (>= 0.90), untrained ITM {baseline:.4}, {:.0} s of 600",
            run.itm, run.secs
        ),
    );
    (v, run)
}

fn fusion_grid(base: &RunConfig, first: &Pretrained, root: &Path) -> Verdict {
    let ed = [("fusion.arch", "encoder_decoder"), ("objectives", "span_lm,itm")];
    let merged = [("fusion.kind", "merged"), ("fusion.layers", "4")];
    let mut runs = vec![Pretrained { secs: 0.0, ..*first }];
    runs.push(pretrain_point(base, "merged/encoder_only", &merged, &root.join("merged_eo")));
    runs.push(pretrain_point(base, "coattn/encoder_decoder", &ed, &root.join("coattn_ed")));
    let both: Vec<(&str, &str)> = merged.iter().chain(ed.iter()).copied().collect();
    runs.push(pretrain_point(base, "merged/encoder_decoder", &both, &root.join("merged_ed")));
    let pass = runs.iter().all(|r| r.itm >= 0.90);
    let detail: Vec<String> = runs.iter().map(|r| format!("{} ITM {:.4}", r.label, r.itm)).collect();
    verdict(pass, detail.join(", "))
}

// 7
fn parameter_parity() -> Verdict {
    let base = ModelConfig::paper_base(vocabulary().len());
    let p = parity(&base).unwrap();
    let toy = parity(&ModelConfig::toy(vocabulary().len())).unwrap();
    // the counting must agree with an allocated model
    let mut small = ModelConfig::toy(vocabulary().len());
    small.fusion.kind = FusionKind::Merged;
    small.fusion.layers = 12;
    let allocated = Model::new(small.clone()).unwrap().num_parameters();
    let counted = count_parameters(&small).unwrap();
    verdict(
        p.relative_diff <= 0.10 && allocated == counted,
        format!(
            "hidden {}: merged M={} {} vs coattn M={} {} params, diff {:.2}% (toy hidden: {:.2}%)",
            p.hidden,
            p.merged_layers,
            p.merged_params,
            p.coattn_layers,
            p.coattn_params,
            100.0 * p.relative_diff,
            100.0 * toy.relative_diff
        ),
    )
}

// 8
fn span_invertibility() -> Verdict {
    let v = vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut words, mut noise, mut broken) = (0usize, 0usize, 0usize);
    for seed in 0..10_000u64 {
        let w = v.word_ids(&Scene::generate(seed).caption()).unwrap();
        let c = span_corrupt(&w, 0.15, 3.0, CountRule::Stochastic, &mut rng).unwrap();
        broken += usize::from(span_decorrupt(&c.encoder, &c.target).unwrap() != w);
        words += w.len();
        noise += c.noise_tokens();
    }
    let frac = noise as f64 / words as f64;
    verdict(
        broken == 0 && (frac - 0.15).abs() <= 0.02,
        format!("10000 sentences, {broken} not restored, masked fraction {frac:.4}"),
    )
}

// 9
fn interpolation(base: &RunConfig, pretrained: &Path, root: &Path) -> Verdict {
    let model = commands::load_model(base, pretrained).unwrap();
    let id = model.store.id("vision.pos_embed").unwrap();
    let table = model.store.value(id);
    let (rows, d) = table.dims2().unwrap();
    let grid_rows = Tensor::new(vec![rows - 1, d], table.data()[d..].to_vec()).unwrap();
    let side = ((rows - 1) as f64).sqrt() as usize;
    let identity = interpolate_pos_embed(&grid_rows, side, side).unwrap().max_abs_diff(&grid_rows);
    let mut accs = Vec::new();
    for res in ["32", "64"] {
        let mut cfg = with(base, &[("finetune.resolution", res)]);
        cfg.paths.checkpoint = Some(pretrained.to_path_buf());
        cfg.paths.out_dir = root.join(format!("finetune_{res}"));
        let out = commands::finetune(&cfg).unwrap();
        accs.push(final_eval(&out.records, "vqa_acc"));
        assert!(cfg.paths.out_dir.join(FINETUNED).exists());
    }
    verdict(
        identity < 1e-12 && accs[1] >= accs[0] - 0.05,
        format!("identity error {identity:.1e}, VQA at 32x32 {:.4}, at 64x64 {:.4}", accs[0], accs[1]),
    )
}

// 10
fn layered_lr_equivalence() -> Verdict {
    let cfg = RunConfig::parse("", &[]).unwrap();
    let records = commands::load_records(&cfg, 32, false).unwrap();
    let data = commands::build_dataset(&cfg, &records, &cfg.train.objectives).unwrap();
    let grouped = TrainConfig {
        steps: 30,
        lr_bottom: 4e-4,
        lr_top: 4e-4,
        eval: false,
        eval_every: 10,
        ..cfg.train.clone()
    };
    let single = TrainConfig {
        single_group: true,
        lr_top: 123.0,
        ..grouped.clone()
    };
    let run = |tc: &TrainConfig| {
        let mut m = Model::new(cfg.model.clone()).unwrap();
        let recs = train(&mut m, &data, tc, &NoClock, |_| {}).unwrap();
        (Checkpoint::from_store(&m.store, "").encode(), recs)
    };
    let (a, ra) = run(&grouped);
    let (b, rb) = run(&single);
    let split = TrainConfig {
        lr_top: 2e-3,
        ..grouped.clone()
    };
    let (c, _) = run(&split);
    verdict(
        a == b && ra == rb && a != c,
        format!("30 toy steps: equal-rate groups vs single group bit-identical {}, split rates differ {}", a == b && ra == rb, a != c),
    )
}

// 11
fn determinism_and_formats(base: &RunConfig, root: &Path) -> Verdict {
    let short = with(base, &[("train.steps", "40"), ("train.eval_every", "10")]);
    let mut runs = Vec::new();
    for name in ["det_a", "det_b"] {
        let mut c = short.clone();
        c.paths.out_dir = root.join(name);
        commands::pretrain(&c).unwrap();
        let ckpt = std::fs::read(c.paths.out_dir.join(CHECKPOINT)).unwrap();
        let log: Vec<_> = read_metrics(&c.paths.out_dir.join(METRICS))
            .unwrap()
            .into_iter()
            .map(without_wall_clock)
            .collect();
        runs.push((ckpt, log, c));
    }
    let same_ckpt = runs[0].0 == runs[1].0;
    let same_log = runs[0].1 == runs[1].1 && !runs[0].1.is_empty();
    let model = commands::load_model(&runs[0].2, &runs[0].2.paths.out_dir.join(CHECKPOINT)).unwrap();
    let resaved = root.join("resaved.ckpt");
    commands::save_checkpoint(&model, &resaved).unwrap();
    let round_trip = std::fs::read(&resaved).unwrap() == runs[0].0;
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut formats = Vec::new();
    let checker = [255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 0, 128, 128, 128, 0, 0, 0];
    let img = Image::new(2, 3, checker.iter().map(|&b| f64::from(b) / 255.0).collect()).unwrap();
    let bytes = std::fs::read(golden.join("checker_3x2.ppm")).unwrap();
    formats.push(("checker ppm", encode_ppm(&img) == bytes && decode_ppm(&bytes).unwrap() == img));
    let raw: Vec<f64> = (0..16).map(|i| f64::from(i * i) / 225.0).collect();
    let map = encode_pgm(4, 4, &meter::attention::normalize_map(&raw));
    let bytes = std::fs::read(golden.join("ramp_4x4.pgm")).unwrap();
    formats.push(("attention pgm", map == bytes && decode_pgm(&bytes).unwrap().2.len() == 16));
    let scene = encode_ppm(&generate_pair(7, 32, false).unwrap().image);
    formats.push(("scene ppm", scene == std::fs::read(golden.join("scene_seed7_32.ppm")).unwrap()));
    let all_formats = formats.iter().all(|f| f.1);
    verdict(
        same_ckpt && same_log && round_trip && all_formats,
        format!(
            "repeat run: checkpoint identical {same_ckpt}, metrics identical {same_log}; save/load/save identical {round_trip}; goldens {formats:?}"
        ),
    )
}

// 12
fn quantizer() -> Verdict {
    let mut rows = Vec::new();
    for seed in 0..16 {
        rows.extend_from_slice(generate_pair(seed, 32, false).unwrap().image.patches(8).unwrap().data());
    }
    let points = Tensor::new(vec![rows.len() / 192, 192], rows).unwrap();
    let fit = fit_codebook(&points, 16, 12, 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let probe = Tensor::new(vec![100, 192], (0..100 * 192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let codes = fit.codebook.quantize(&probe).unwrap();
    let exhaustive = (0..100)
        .filter(|&i| {
            let c = &fit.codebook.centroids;
            let d = |k: usize| c.row(k).iter().zip(probe.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..c.shape()[0]).fold(0, |b, k| if d(k) < d(b) { k } else { b });
            best == codes[i]
        })
        .count();
    let monotone = fit.objective.windows(2).all(|w| w[1] <= w[0]);
    // two clouds of different sizes around -3 and +3
    let mut data = Vec::new();
    let mut sums = [[0.0; 4]; 2];
    for (cloud, n) in [(0usize, 30usize), (1, 50)] {
        for _ in 0..n {
            for (j, s) in sums[cloud].iter_mut().enumerate() {
                let v = if cloud == 0 { -3.0 } else { 3.0 } + rng.random_range(-0.4..0.4) + j as f64 * 0.01;
                data.push(v);
                *s += v;
            }
        }
    }
    let two = fit_codebook(&Tensor::new(vec![80, 4], data).unwrap(), 2, 5, 10).unwrap();
    let mut cloud_err = 0.0f64;
    for k in 0..2 {
        let row = two.codebook.centroids.row(k);
        let (cloud, n) = if row[0] < 0.0 { (0, 30.0) } else { (1, 50.0) };
        for (a, s) in row.iter().zip(&sums[cloud]) {
            cloud_err = cloud_err.max((a - s / n).abs());
        }
    }
    verdict(
        exhaustive == 100 && monotone && cloud_err < 1e-9,
        format!(
            "{exhaustive}/100 match exhaustive search, objective non-increasing {monotone} over {} steps, cloud-mean error {cloud_err:.1e}",
            fit.objective.len()
        ),
    )
}

// 13
fn benchmark_sanity(base: &RunConfig, root: &Path) -> Verdict {
    let mut cfg = with(base, &[("bench.repeats", "15"), ("bench.warmup", "3")]);
    cfg.paths.out_dir = root.join("bench");
    let out = commands::benchmark(&cfg).unwrap();
    let mut monotone = true;
    let mut sweep = Vec::new();
    for kind in ["merged", "coattn"] {
        let medians: Vec<f64> = cfg
            .bench
            .depths
            .iter()
            .map(|d| out.reports.iter().find(|r| r.config_name == format!("{kind}_L{d}")).unwrap().median_ms)
            .collect();
        monotone &= medians.windows(2).all(|w| w[1] > w[0]);
        let shown: Vec<String> = medians.iter().map(|m| format!("{m:.2}")).collect();
        sweep.push(format!("{kind} [{}] ms", shown.join(", ")));
    }
    let counts_ok = commands::bench_configs(&cfg)
        .iter()
        .all(|(name, mc)| out.reports.iter().find(|r| &r.config_name == name).unwrap().params == count_parameters(mc).unwrap());
    let file: Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.paths.out_dir.join("parity.json")).unwrap()).unwrap();
    let expected = parity(&ModelConfig::paper_base(vocabulary().len())).unwrap();
    let parity_ok = file["relative_diff"].as_f64() == Some(expected.relative_diff)
        && file["merged_params"].as_u64() == Some(expected.merged_params as u64)
        && expected.relative_diff <= 0.10;
    verdict(
        monotone && counts_ok && parity_ok,
        format!("depths {:?}: {}; report params match counting {counts_ok}; parity file consistent {parity_ok}", cfg.bench.depths, sweep.join("; ")),
    )
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let base = toy(&root.join("pretrain"));
    let mut results = Vec::new();
    let mut record = |id: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        announce(id, name, &v, start.elapsed().as_secs_f64());
        results.push((id, v.pass));
    };
    record(1, "gradient correctness", &mut gradient_correctness);
    record(2, "in-batch-negative loss fidelity", &mut ibn_loss_fidelity);
    record(3, "masking rates", &mut masking_rates);
    record(4, "image-text matching sampling", &mut itm_sampling);
    let mut first = None;
    record(5, "toy learning, encoder-only", &mut || {
        let (v, run) = toy_learning(&base, &root.join("pretrain"));
        first = Some(run);
        v
    });
    let first = first.unwrap();
    record(6, "toy learning, both fusion kinds and architectures", &mut || fusion_grid(&base, &first, root));
    record(7, "parameter parity", &mut parameter_parity);
    record(8, "span corruption invertibility", &mut span_invertibility);
    let pretrained = root.join("pretrain").join(CHECKPOINT);
    record(9, "positional-embedding interpolation", &mut || interpolation(&base, &pretrained, root));
    record(10, "layered learning-rate equivalence", &mut layered_lr_equivalence);
    record(11, "determinism and formats", &mut || determinism_and_formats(&base, root));
    record(12, "quantizer", &mut quantizer);
    record(13, "benchmark sanity", &mut || benchmark_sanity(&base, root));
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
