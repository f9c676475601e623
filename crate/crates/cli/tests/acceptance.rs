//! Acceptance suite: one PASS/FAIL line per criterion, all tolerances pinned below.
//!
//! Data: the default synthetic dataset (250 samples, 200 train / 50 test) at seed 1.
//! Learned models: default training config, seeds 0, 1, 2.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use quadmask_cli::commands::cmd_bench;
use quadmask_cli::config::RunConfig;
use quadmask_core::detector::{
    detect_oracle, detector_loss, detector_metrics, oracle_targets, train_detector, Detector, DetectorConfig,
    DetectorExample, DetectorInput, DetectorTrainConfig,
};
use quadmask_core::io::{decode_ftns, decode_pgm, encode_ftns, encode_pgm, RawTensor};
use quadmask_core::metrics::{incoherence_stats, mask_iou, oracle_fill_study};
use quadmask_core::numeric::ops;
use quadmask_core::numeric::{grad_check, Conv2d, GradCheckOptions, GradCheckReport, LayerNorm, Linear, ParamStore, Tensor};
use quadmask_core::pipeline::{coarse_baseline, mean_boundary_iou, score, target_mask, Models, Propagation};
use quadmask_core::quadtree::PointQuadtree;
use quadmask_core::refiner::{
    node_labels, reference_labels, refine_loss, train, EncoderLayer, ModelKind, Refiner, RefinerConfig, TokenInputs,
    TrainConfig,
};
use quadmask_core::synth::{generate_in_memory, Sample, SynthConfig};
use quadmask_core::BinaryMask;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA_SEED: u64 = 1;
const SEEDS: [u64; 3] = [0, 1, 2];
const DEPTH: usize = 3;
const OUT: usize = 112;

const C1_MAX_TIME: Duration = Duration::from_secs(1);
const C3_MAX_FINEST_FRACTION: f64 = 0.35;
const C4_MIN_GUIDED_RECALL: f64 = 0.80;
const C4_MAX_TIME: Duration = Duration::from_secs(300);
const C6_MIN_GAIN: f64 = 0.10;
const C7_MIN_STRICT_SHARE: f64 = 0.5;
const C8_PERMUTATIONS: usize = 10;
const C8_MAX_DEVIATION: f32 = 1e-5;
const C9_MAX_REL_ERROR: f64 = 1e-6;
const C10_MAX_FLOPS_RATIO: f64 = 0.5;
const C10_MAX_MEMORY_RATIO: f64 = 0.25;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &mut Vec<Verdict>, id: usize, name: &'static str, pass: bool, detail: String) {
    println!("[{}] criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    v.push(Verdict { id, name, pass, detail });
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Non-constant 2×2 blocks, computed pixel by pixel.
fn block_oracle(m: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(m.height() / 2, m.width() / 2, |r, c| {
        let v = [m.get(2 * r, 2 * c), m.get(2 * r, 2 * c + 1), m.get(2 * r + 1, 2 * c), m.get(2 * r + 1, 2 * c + 1)];
        v.iter().any(|&x| x) && !v.iter().all(|&x| x)
    })
}

fn c1_exhaustive(v: &mut Vec<Verdict>) {
    let t = Instant::now();
    let mut mismatches = 0usize;
    for bits in 0u32..1 << 16 {
        let m = BinaryMask::from_fn(4, 4, |r, c| bits >> (r * 4 + c) & 1 == 1);
        if m.incoherence() != block_oracle(&m) {
            mismatches += 1;
        }
    }
    let el = t.elapsed();
    report(
        v,
        1,
        "incoherence = non-constant-block oracle on all 4x4 masks",
        mismatches == 0 && el < C1_MAX_TIME,
        format!("65536 masks, {mismatches} mismatches, {el:.2?} (limit {C1_MAX_TIME:?})"),
    );
}

fn c2_oracle_fill(v: &mut Vec<Verdict>, test: &[Sample]) {
    let mut exact = 0;
    let mut worst = 1.0f64;
    for s in test {
        let pooled = s.gt.to_prob().avg_pool(s.gt.height() / s.coarse.height).unwrap();
        let det = oracle_targets(&s.gt, DEPTH).unwrap();
        let r = oracle_fill_study(&s.gt, &pooled, &det, OUT).unwrap();
        worst = worst.min(r.iou_filled);
        if r.iou_filled == 1.0 {
            exact += 1;
        }
    }
    report(
        v,
        2,
        "oracle fill of pooled GT reproduces GT at 112",
        exact == test.len(),
        format!("IoU == 1.0 on {exact}/{} test samples (min {worst:.6})", test.len()),
    );
}

/// Foreground pixels with a background 4-neighbour.
fn has_contour_in_block(m: &BinaryMask, r: usize, c: usize) -> bool {
    let (h, w) = (m.height() as isize, m.width() as isize);
    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let (pr, pc) = (2 * r + dr, 2 * c + dc);
        if !m.get(pr, pc) {
            continue;
        }
        for (nr, nc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (qr, qc) = (pr as isize + nr, pc as isize + nc);
            if qr >= 0 && qc >= 0 && qr < h && qc < w && !m.get(qr as usize, qc as usize) {
                return true;
            }
        }
    }
    false
}

fn c3_locality(v: &mut Vec<Verdict>, all: &[&Sample]) {
    let (mut pixels, mut local) = (0usize, 0usize);
    let mut finest = Vec::with_capacity(all.len());
    for s in all {
        let pyr = detect_oracle(&s.gt, DEPTH).unwrap();
        let mut finer = s.gt.clone();
        let mut per_level = Vec::new();
        for _ in 0..DEPTH {
            per_level.push(finer.clone());
            finer = finer.downsample_nn();
        }
        per_level.reverse();
        for (level, src) in pyr.levels().iter().zip(&per_level) {
            let mixed = block_oracle(src);
            for r in 0..level.height() {
                for c in 0..level.width() {
                    if level.get(r, c) {
                        pixels += 1;
                        if mixed.get(r, c) && has_contour_in_block(src, r, c) {
                            local += 1;
                        }
                    }
                }
            }
        }
        finest.push(incoherence_stats(&s.gt, &s.coarse, DEPTH).unwrap().finest_fraction);
    }
    let mean_f = mean(&finest);
    let max_f = finest.iter().copied().fold(0.0, f64::max);
    report(
        v,
        3,
        "incoherent pixels are mixed contour blocks; finest area fraction",
        local == pixels && mean_f <= C3_MAX_FINEST_FRACTION,
        format!(
            "{local}/{pixels} local over {} samples; finest area fraction mean {mean_f:.4} (max {max_f:.4}, limit {C3_MAX_FINEST_FRACTION})",
            all.len()
        ),
    );
}

fn c4_guidance(v: &mut Vec<Verdict>, train_set: &[Sample], test: &[Sample]) {
    let t = Instant::now();
    let examples: Vec<DetectorExample> = train_set
        .iter()
        .map(|s| DetectorExample::new(&s.features, &s.coarse, &s.gt, DEPTH).unwrap())
        .collect();
    let oracle: Vec<_> = test.iter().map(|s| oracle_targets(&s.gt, DEPTH).unwrap()).collect();
    let channels = train_set[0].features.channels();
    let mut recall = BTreeMap::new();
    for guidance in [true, false] {
        let mut per_seed = Vec::new();
        for seed in SEEDS {
            let tc = DetectorTrainConfig {
                seed,
                ..DetectorTrainConfig::default()
            };
            assert_eq!(tc.epochs, 10);
            let dc = DetectorConfig {
                guidance,
                ..DetectorConfig::default()
            };
            let (det, store, _) = train_detector(&examples, channels, dc, &tc).unwrap();
            let r: Vec<f64> = test
                .iter()
                .zip(&oracle)
                .map(|(s, o)| detector_metrics(&det.detect(&store, &s.features, &s.coarse).unwrap().masks, o).unwrap().recall)
                .collect();
            per_seed.push(mean(&r));
        }
        recall.insert(guidance, per_seed);
    }
    let el = t.elapsed();
    let (with, without) = (mean(&recall[&true]), mean(&recall[&false]));
    report(
        v,
        4,
        "detector recall with lower-level guidance",
        with > without && with >= C4_MIN_GUIDED_RECALL && el <= C4_MAX_TIME,
        format!(
            "with {with:.4} {:?} vs without {without:.4} {:?} (min {C4_MIN_GUIDED_RECALL}); {} train samples, 10 epochs, {el:.1?} (limit {C4_MAX_TIME:?})",
            recall[&true].iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
            recall[&false].iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
            train_set.len()
        ),
    );
}

struct Trained {
    transformer: Vec<Models>,
    biou_transformer: Vec<f64>,
    biou_mlp: Vec<f64>,
}

fn train_refiners(train_set: &[Sample], test: &[Sample]) -> Trained {
    let mut out = Trained {
        transformer: Vec::new(),
        biou_transformer: Vec::new(),
        biou_mlp: Vec::new(),
    };
    for seed in SEEDS {
        for kind in [ModelKind::Transformer, ModelKind::Mlp] {
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            }
            .with_kind(kind);
            let t = Instant::now();
            let o = train(train_set, test, &cfg).unwrap();
            assert!(o.aborted.is_none(), "{kind:?} seed {seed}: {:?}", o.aborted);
            let biou = mean_boundary_iou(&o.models, test, DEPTH, Propagation::Full).unwrap();
            println!("  trained {kind:?} seed {seed}: test boundary IoU {biou:.4} in {:.1?}", t.elapsed());
            match kind {
                ModelKind::Transformer => {
                    out.biou_transformer.push(biou);
                    out.transformer.push(o.models);
                }
                ModelKind::Mlp => out.biou_mlp.push(biou),
            }
        }
    }
    out
}

fn c5_transformer_vs_mlp(v: &mut Vec<Verdict>, t: &Trained, n: usize) {
    let (a, b) = (mean(&t.biou_transformer), mean(&t.biou_mlp));
    report(
        v,
        5,
        "sequence refiner vs per-node MLP, boundary IoU",
        a >= b,
        format!(
            "transformer {a:.4} {:?} vs MLP {b:.4} {:?} on {n} held-out samples, {} seeds",
            t.biou_transformer.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
            t.biou_mlp.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
            SEEDS.len()
        ),
    );
}

fn c6_refinement_gain(v: &mut Vec<Verdict>, t: &Trained, test: &[Sample]) {
    let coarse: Vec<f64> = test.iter().map(|s| score(&coarse_baseline(&s.coarse), &s.gt).unwrap().1).collect();
    let coarse = mean(&coarse);
    let d3 = mean(&t.biou_transformer);
    let d1 = mean(
        &t.transformer
            .iter()
            .map(|m| mean_boundary_iou(m, test, 1, Propagation::Full).unwrap())
            .collect::<Vec<_>>(),
    );
    report(
        v,
        6,
        "refinement gain over coarse; depth 3 vs depth 1",
        d3 - coarse >= C6_MIN_GAIN && d3 >= d1,
        format!(
            "coarse {coarse:.4}, depth 1 {d1:.4}, depth 3 {d3:.4}; gain {:.1} points (min {:.0})",
            100.0 * (d3 - coarse),
            100.0 * C6_MIN_GAIN
        ),
    );
}

fn c7_propagation(v: &mut Vec<Verdict>, test: &[Sample]) {
    let (mut full, mut finest) = (Vec::new(), Vec::new());
    let (mut eligible, mut strict) = (0usize, 0usize);
    for s in test {
        let mut tree = PointQuadtree::build(&oracle_targets(&s.gt, DEPTH).unwrap()).unwrap();
        tree.fill_from_gt(&s.gt, true).unwrap();
        let truth = target_mask(&s.gt).unwrap();
        let a = mask_iou(&tree.propagate(&s.coarse, OUT).unwrap(), &truth).unwrap();
        let b = mask_iou(&tree.finest_only_propagate(&s.coarse, OUT).unwrap(), &truth).unwrap();
        full.push(a);
        finest.push(b);
        let raw = detect_oracle(&s.gt, DEPTH).unwrap();
        if raw.level(0).count_ones() + raw.level(1).count_ones() > 0 {
            eligible += 1;
            if a > b {
                strict += 1;
            }
        }
    }
    let (a, b) = (mean(&full), mean(&finest));
    let share = strict as f64 / eligible.max(1) as f64;
    report(
        v,
        7,
        "full propagation vs finest-only with oracle values",
        a >= b && eligible > 0 && share >= C7_MIN_STRICT_SHARE,
        format!(
            "mask IoU full {a:.4} vs finest {b:.4}; strictly better on {strict}/{eligible} samples with L1/L2 incoherence ({:.0}%, min {:.0}%)",
            100.0 * share,
            100.0 * C7_MIN_STRICT_SHARE
        ),
    );
}

fn c8_permutation(v: &mut Vec<Verdict>, models: &Models, test: &[Sample]) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = models.refiner.config.dim;
    let mut worst = 0.0f32;
    let mut tokens = 0;
    for s in &test[..5] {
        let tree = PointQuadtree::build(&oracle_targets(&s.gt, DEPTH).unwrap()).unwrap();
        let ids: Vec<usize> = (0..tree.len()).collect();
        let nodes = TokenInputs::<f32>::for_nodes(&tree, &ids, &s.features, &s.coarse, dim).unwrap();
        let refs = TokenInputs::<f32>::reference(&s.features, &s.coarse, dim).unwrap();
        let base = models.refiner.refine(&models.refiner_params, &nodes, Some(&refs)).unwrap();
        tokens += ids.len();
        for _ in 0..C8_PERMUTATIONS {
            let mut order = ids.clone();
            order.shuffle(&mut rng);
            let out = models.refiner.refine(&models.refiner_params, &nodes.permuted(&order), Some(&refs)).unwrap();
            for (k, &i) in order.iter().enumerate() {
                worst = worst.max((out[k] - base[i]).abs());
            }
        }
    }
    report(
        v,
        8,
        "permutation invariance of per-node values",
        worst <= C8_MAX_DEVIATION,
        format!("{C8_PERMUTATIONS} permutations x 5 samples ({tokens} nodes): max |diff| {worst:.2e} (limit {C8_MAX_DEVIATION:.0e})"),
    );
}

fn random_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Moves parameters off initial zeros so no ReLU input sits on its kink.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.value_mut(id).data_mut() {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
}

fn gradient_reports(sample: &Sample) -> Vec<(String, GradCheckReport)> {
    let opts = GradCheckOptions::default();
    assert_eq!(opts.tolerance, C9_MAX_REL_ERROR);
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(90);

    let mut s = ParamStore::new();
    let a = s.add("a", random_away_from_zero(&[3, 5], &mut rng));
    let b = s.add("b", random_away_from_zero(&[5, 4], &mut rng));
    let r = random_away_from_zero(&[3, 4], &mut rng);
    let rep = grad_check(
        &mut s,
        |s, bw| {
            let y = ops::matmul(s.value(a), s.value(b)).unwrap();
            if bw {
                let (da, db) = ops::matmul_backward(s.value(a), s.value(b), &r);
                s.accumulate(a, da.data());
                s.accumulate(b, db.data());
            }
            weighted_sum(&y, &r)
        },
        opts,
    );
    out.push(("matmul".to_string(), rep));

    let mut s = ParamStore::new();
    let x = s.add("x", random_away_from_zero(&[4, 6], &mut rng));
    let r = random_away_from_zero(&[4, 6], &mut rng);
    type Act = (fn(&Tensor<f64>) -> Tensor<f64>, fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Tensor<f64>);
    let acts: [(&str, Act); 3] = [
        ("softmax", (ops::softmax_rows, |_, y, r| ops::softmax_rows_backward(y, r))),
        ("relu", (ops::relu, |x, _, r| ops::relu_backward(x, r))),
        ("sigmoid", (ops::sigmoid, |_, y, r| ops::sigmoid_backward(y, r))),
    ];
    for (name, (f, df)) in acts {
        let rep = grad_check(
            &mut s,
            |s, bw| {
                let y = f(s.value(x));
                if bw {
                    let dx = df(s.value(x), &y, &r);
                    s.accumulate(x, dx.data());
                }
                weighted_sum(&y, &r)
            },
            opts,
        );
        out.push((name.to_string(), rep));
    }

    for k in [1, 3] {
        let mut s = ParamStore::new();
        let conv = Conv2d::new(&mut s, "conv", 2, 3, k, &mut rng);
        jitter(&mut s, &mut rng);
        let x = s.add("x", random_away_from_zero(&[2, 5, 4], &mut rng));
        let r = random_away_from_zero(&[3, 5, 4], &mut rng);
        let rep = grad_check(
            &mut s,
            |s, bw| {
                let xv = s.value(x).clone();
                let (y, cache) = conv.forward(s, &xv).unwrap();
                if bw {
                    let dx = conv.backward(s, &cache, &r);
                    s.accumulate(x, dx.data());
                }
                weighted_sum(&y, &r)
            },
            opts,
        );
        out.push((format!("conv{k}x{k}"), rep));
    }

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 8);
    jitter(&mut s, &mut rng);
    let x = s.add("x", random_away_from_zero(&[5, 8], &mut rng));
    let r = random_away_from_zero(&[5, 8], &mut rng);
    let rep = grad_check(
        &mut s,
        |s, bw| {
            let xv = s.value(x).clone();
            let (y, cache) = ln.forward(s, &xv);
            if bw {
                let dx = ln.backward(s, &cache, &r);
                s.accumulate(x, dx.data());
            }
            weighted_sum(&y, &r)
        },
        opts,
    );
    out.push(("layer_norm".to_string(), rep));

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 6, 4, &mut rng);
    jitter(&mut s, &mut rng);
    let x = s.add("x", random_away_from_zero(&[7, 6], &mut rng));
    let r = random_away_from_zero(&[7, 4], &mut rng);
    let rep = grad_check(
        &mut s,
        |s, bw| {
            let xv = s.value(x).clone();
            let y = lin.forward(s, &xv).unwrap();
            if bw {
                let dx = lin.backward(s, &xv, &r);
                s.accumulate(x, dx.data());
            }
            weighted_sum(&y, &r)
        },
        opts,
    );
    out.push(("linear".to_string(), rep));

    let mut s = ParamStore::<f64>::new();
    let layer = EncoderLayer::new(&mut s, "enc", 8, 2, 2, &mut rng);
    jitter(&mut s, &mut rng);
    let x = random_away_from_zero(&[5, 8], &mut rng);
    let r = random_away_from_zero(&[5, 8], &mut rng);
    let rep = grad_check(
        &mut s,
        |s, bw| {
            let (y, cache) = layer.forward(s, &x).unwrap();
            if bw {
                layer.backward(s, &cache, &r);
            }
            weighted_sum(&y, &r)
        },
        opts,
    );
    out.push(("encoder_layer".to_string(), rep));

    // Small pyramid: on full-size maps some ReLU input always lies within a probe step of its kink.
    for guidance in [true, false] {
        let sizes = [6, 12, 24];
        let mut coarse = random_away_from_zero(&[1, 6, 6], &mut rng);
        coarse.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v);
        let input = DetectorInput {
            levels: sizes.iter().map(|&n| random_away_from_zero(&[4, n, n], &mut rng)).collect(),
            coarse,
        };
        let targets: Vec<BinaryMask> = sizes
            .iter()
            .map(|&n| BinaryMask::from_fn(n, n, |r, c| (r * 7 + c * 3) % 5 < 2))
            .collect();
        let mut s = ParamStore::<f64>::new();
        let dc = DetectorConfig {
            trunk_width: 4,
            fusion_width: 4,
            guidance,
            threshold: 0.5,
        };
        let det = Detector::new(&mut s, "", 4, 3, dc, &mut rng);
        jitter(&mut s, &mut rng);
        let rep = grad_check(
            &mut s,
            |st, bw| {
                let (logits, cache) = det.forward(st, &input).unwrap();
                let (loss, dl) = detector_loss(&logits, &targets).unwrap();
                if bw {
                    det.backward(st, &cache, &dl);
                }
                loss
            },
            opts,
        );
        out.push((format!("detector_loss(guidance={guidance})"), rep));
    }

    let channels = sample.features.channels();
    let tree = PointQuadtree::build(&oracle_targets(&sample.gt, DEPTH).unwrap()).unwrap();
    let ids = tree.node_sequence(Some(4), &mut rng);
    for kind in [ModelKind::Transformer, ModelKind::Mlp] {
        let cfg = RefinerConfig {
            kind,
            dim: 8,
            heads: 4,
            layers: 2,
            ffn_mult: 2,
        };
        let mut s = ParamStore::<f64>::new();
        let model = Refiner::new(&mut s, "", channels, cfg, &mut rng).unwrap();
        jitter(&mut s, &mut rng);
        let nodes = TokenInputs::<f64>::for_nodes(&tree, &ids, &sample.features, &sample.coarse, cfg.dim).unwrap();
        // Six of the 196 reference tokens: with the full grid, f64 roundoff alone is
        // near 1e-6 and ReLU kinks sit inside any usable probe interval.
        let pick: Vec<usize> = (0..6).map(|i| i * 37 + 5).collect();
        let refs = TokenInputs::<f64>::reference(&sample.features, &sample.coarse, cfg.dim)
            .unwrap()
            .permuted(&pick);
        let seq = nodes.with_appended(&refs).unwrap();
        let labels = node_labels(&tree, &ids, &sample.gt).unwrap();
        let all_ref_labels = reference_labels(&sample.gt).unwrap();
        let ref_labels: Vec<f32> = pick.iter().map(|&i| all_ref_labels[i]).collect();
        let rep = grad_check(
            &mut s,
            |st, bw| {
                let cache = model.forward(st, &seq).unwrap();
                let (loss, g) = refine_loss(cache.outputs(), &labels, &ref_labels, 1.0).unwrap();
                if bw {
                    model.backward(st, &cache, &g);
                }
                loss
            },
            opts,
        );
        out.push((format!("refine_loss({kind:?}, end to end)"), rep));
    }
    out
}

fn c9_gradients(v: &mut Vec<Verdict>, sample: &Sample) {
    let reps = gradient_reports(sample);
    let mut worst = ("", 0.0f64);
    let mut all = true;
    for (name, r) in &reps {
        let ok = !r.non_finite && r.max_rel_error < C9_MAX_REL_ERROR;
        all &= ok;
        println!(
            "  gradcheck {name}: max rel error {:.2e}, {} coordinate(s) re-probed at a smaller step{}",
            r.max_rel_error,
            r.reprobed,
            if ok { "" } else { " FAILED" }
        );
        if r.max_rel_error >= worst.1 {
            worst = (name, r.max_rel_error);
        }
    }
    report(
        v,
        9,
        "f64 central-difference gradient checks",
        all,
        format!(
            "{} checks, worst {:.2e} ({}) (limit {C9_MAX_REL_ERROR:.0e})",
            reps.len(),
            worst.1,
            worst.0
        ),
    );
}

fn c10_bench(v: &mut Vec<Verdict>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        seed: DATA_SEED,
        out: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    assert_eq!(cfg.bench_dim, 256);
    let rows = cmd_bench(&cfg).unwrap();
    let sparse = rows.iter().find(|r| r.model == "sparse").unwrap();
    let emitted = fs::read_to_string(dir.path().join("bench.jsonl")).unwrap();
    report(
        v,
        10,
        "sparse vs dense 56x56 cost at C=256 (cmd_bench)",
        sparse.flops_ratio <= C10_MAX_FLOPS_RATIO
            && sparse.memory_ratio <= C10_MAX_MEMORY_RATIO
            && emitted.lines().any(|l| l.contains("\"sparse\"")),
        format!(
            "tokens mean {:.0} max {}; flops ratio {:.4} (limit {C10_MAX_FLOPS_RATIO}), memory ratio {:.4} (limit {C10_MAX_MEMORY_RATIO})",
            sparse.tokens_mean, sparse.tokens_max, sparse.flops_ratio, sparse.memory_ratio
        ),
    );
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

const TINY: &str = "count=6\nchannels=4\ndim=8\nheads=2\nlayers=1\nepochs=1\ncap=5\ntrunk_width=4\nfusion_width=4\nval_limit=1\n";

fn run_all_commands(dir: &Path) -> Vec<Vec<u8>> {
    fs::write(dir.join("tiny.txt"), TINY).unwrap();
    let steps: [&[&str]; 8] = [
        &["--out", "data", "synth"],
        &["--out", "analyze", "analyze", "data/manifest.tsv"],
        &["--out", "oracle", "oracle", "data/manifest.tsv"],
        &["--out", "train", "train", "data/manifest.tsv"],
        &["--out", "oracle_det", "oracle", "data/manifest.tsv", "--detector", "train/checkpoint"],
        &["--out", "refine", "refine", "train/checkpoint", "data/manifest.tsv"],
        &["--out", "eval", "eval", "refine/masks", "data/manifest.tsv"],
        &["--out", "bench", "bench", "data/manifest.tsv"],
    ];
    steps
        .iter()
        .map(|rest| {
            let out = Command::new(env!("CARGO_BIN_EXE_quadmask"))
                .current_dir(dir)
                .args(["--config", "tiny.txt", "--seed", "7"])
                .args(*rest)
                .output()
                .unwrap();
            assert!(out.status.success(), "{rest:?}: {}", String::from_utf8_lossy(&out.stderr));
            out.stdout
        })
        .collect()
}

fn c11_determinism(v: &mut Vec<Verdict>, test: &[Sample]) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (sa, sb) = (run_all_commands(a.path()), run_all_commands(b.path()));
    let (fa, fb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    let identical = sa == sb && fa == fb;

    let mut pgm_ok = 0;
    for s in test {
        let bytes = encode_pgm(&s.gt);
        let back = decode_pgm(&bytes, Path::new("mem.pgm")).unwrap();
        if back == s.gt && encode_pgm(&back) == bytes {
            pgm_ok += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bits: Vec<u32> = (0..4096).map(|_| rng.gen()).collect();
    bits.extend([0x8000_0000, 0x0000_0001, 0x7f80_0000, 0xff80_0000, 0x7fc0_1234, 0x7f7f_ffff]);
    let t = RawTensor::new(1, 1, bits.len(), bits.iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
    let bytes = encode_ftns(&t);
    let back = decode_ftns(&bytes, Path::new("mem.ftns")).unwrap();
    let ftns_ok = back.data.iter().map(|x| x.to_bits()).eq(bits.iter().copied()) && encode_ftns(&back) == bytes;
    let files_ok = fa.iter().all(|(k, bytes)| match k.extension().and_then(|e| e.to_str()) {
        Some("pgm") => encode_pgm(&decode_pgm(bytes, k).unwrap()) == *bytes,
        Some("ftns") => encode_ftns(&decode_ftns(bytes, k).unwrap()) == *bytes,
        _ => true,
    });
    report(
        v,
        11,
        "CLI determinism and bit-exact tensor/PGM round trips",
        identical && pgm_ok == test.len() && ftns_ok && files_ok,
        format!(
            "8 commands twice: {} files {}; PGM {pgm_ok}/{}; FTNS {} f32 bit patterns {}; written files re-encode {}",
            fa.len(),
            if identical { "identical" } else { "DIFFER" },
            test.len(),
            bits.len(),
            if ftns_ok { "exact" } else { "MISMATCH" },
            if files_ok { "exact" } else { "MISMATCH" }
        ),
    );
}

#[test]
fn acceptance() {
    let started = Instant::now();
    let (train_set, test) = generate_in_memory(&SynthConfig::default(), DATA_SEED).unwrap();
    assert_eq!((train_set.len(), test.len()), (200, 50));
    let all: Vec<&Sample> = train_set.iter().chain(&test).collect();
    let mut v = Vec::new();

    c1_exhaustive(&mut v);
    c2_oracle_fill(&mut v, &test);
    c3_locality(&mut v, &all);
    c4_guidance(&mut v, &train_set, &test);
    let trained = train_refiners(&train_set, &test);
    c5_transformer_vs_mlp(&mut v, &trained, test.len());
    c6_refinement_gain(&mut v, &trained, &test);
    c7_propagation(&mut v, &test);
    c8_permutation(&mut v, &trained.transformer[0], &test);
    let small = generate_in_memory(
        &SynthConfig {
            count: 1,
            features: quadmask_core::synth::FeatureConfig {
                channels: 4,
                ..Default::default()
            },
            ..SynthConfig::default()
        },
        DATA_SEED,
    )
    .unwrap();
    let grad_sample = small.0.first().or(small.1.first()).unwrap();
    c9_gradients(&mut v, grad_sample);
    c10_bench(&mut v);
    c11_determinism(&mut v, &test);

    v.sort_by_key(|x| x.id);
    println!("\nacceptance summary ({:.1?}):", started.elapsed());
    for x in &v {
        println!("  {} {:>2} {}: {}", if x.pass { "PASS" } else { "FAIL" }, x.id, x.name, x.detail);
    }
    let failed: Vec<usize> = v.iter().filter(|x| !x.pass).map(|x| x.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
