//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! The two training criteria take most of the time (roughly 7 and 25
//! minutes on one CPU core). Set `CELLDETR_ACCEPT_ONLY` to a comma-separated
//! list of criterion keys to run a subset.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::process::ExitCode;
use std::time::Instant;

use celldetr::boxmatch::{giou, hungarian_assign, iou, BoundingBox, CostMatrix};
use celldetr::data::{split_dataset, synth_generate, synth_sample, Class, InstanceSet, Mask, Scenario};
use celldetr::losses::{bbox_loss, classification_loss, combined_loss, dice_loss, focal_loss, PredictionSet};
use celldetr::metrics::{class_jaccard, dice_coefficient, foreground_jaccard, mask_iou, seg_accuracy};
use celldetr::model::pade::leaky_relu_init;
use celldetr::model::{count_parameters, CellDetr};
use celldetr::pipeline::{
    benchmark_latency, evaluate, instances_from_predictions, measure_labels, prepare_images, train, TrainOptions,
};
use celldetr::tensor::{Graph, Tensor};
use celldetr::{Config, LossConfig, ModelConfig, Sample, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

/// Head and backbone learning rates for the short training runs: twice the
/// full-schedule rates, since these runs are a fraction of its length.
const SHORT_RUN_LR: (f64, f64) = (2e-4, 2e-5);

fn matching() -> Outcome {
    fn brute(cost: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                brute(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut bad = 0;
    for _ in 0..1000 {
        let cols = rng.random_range(1..=7);
        let rows = rng.random_range(1..=cols);
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.random_range(0..50) as f64).collect())
            .collect();
        let m = hungarian_assign(&CostMatrix::new(rows, cols, cost.concat()).unwrap());
        let mut best = f64::INFINITY;
        brute(&cost, 0, &mut vec![false; cols], 0.0, &mut best);
        if m.total_cost != best {
            bad += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (bad == 0 && secs < 10.0, format!("{bad}/1000 mismatches, {secs:.2} s"))
}

fn geometry() -> Outcome {
    let a = BoundingBox::<f64>::from_corners(0.0, 0.0, 2.0, 2.0);
    let b = BoundingBox::from_corners(1.0, 1.0, 3.0, 3.0);
    let (i, g) = (iou(&a, &b).unwrap(), giou(&a, &b).unwrap());
    let hand = (i - 1.0 / 7.0).abs() < 1e-9 && (g + 0.079365).abs() < 1e-6 && (g - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut violations = 0;
    for _ in 0..100_000 {
        let mut draw = || {
            BoundingBox::new(
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(1e-3..1.0),
                rng.random_range(1e-3..1.0),
            )
        };
        let (p, q) = (draw(), draw());
        if giou(&p, &q).unwrap() > iou(&p, &q).unwrap() {
            violations += 1;
        }
    }
    (hand && violations == 0, format!("IoU {i:.9}, GIoU {g:.6}, {violations} violations of giou <= iou"))
}

fn gradients() -> Outcome {
    const H: f64 = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let central = |f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize| {
        let (mut hi, mut lo) = (x.to_vec(), x.to_vec());
        hi[i] += H;
        lo[i] -= H;
        (f(&hi) - f(&lo)) / (2.0 * H)
    };
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst = [0.0f64; 4];

    for _ in 0..100 {
        let v: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        let p: Vec<f64> = v.iter().map(|x| x / s).collect();
        let label = Class::ALL[rng.random_range(0..3)];
        let (_, grad) = classification_loss(label, &p, &cfg);
        for i in 0..3 {
            let n = central(&|x| classification_loss(label, x, &cfg).0, &p, i);
            worst[0] = worst[0].max(rel(grad[i], n));
        }
    }
    let mut done = 0;
    while done < 100 {
        let mut draw = || -> [f64; 4] {
            [
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.05..0.6),
                rng.random_range(0.05..0.6),
            ]
        };
        let (t, p) = (draw(), draw());
        if t.iter().zip(&p).any(|(a, b)| (a - b).abs() < 1e-3) {
            continue;
        }
        let target = BoundingBox::from_slice(&t);
        let (_, grad) = bbox_loss(&target, &BoundingBox::from_slice(&p), &cfg).unwrap();
        for i in 0..4 {
            let n = central(&|x| bbox_loss(&target, &BoundingBox::from_slice(x), &cfg).unwrap().0, &p, i);
            worst[1] = worst[1].max(rel(grad[i], n));
        }
        done += 1;
    }
    for case in 0..200 {
        let len = rng.random_range(4..40);
        let t: Vec<bool> = (0..len).map(|_| rng.random_bool(0.4)).collect();
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(0.02..0.98)).collect();
        if case < 100 {
            let (_, grad) = focal_loss(&t, &p, cfg.gamma, 1e-8);
            for i in 0..len {
                let n = central(&|x| focal_loss(&t, x, cfg.gamma, 1e-8).0, &p, i);
                worst[2] = worst[2].max(rel(grad[i], n));
            }
        } else {
            let (_, grad) = dice_loss(&t, &p, cfg.epsilon);
            for i in 0..len {
                let n = central(&|x| dice_loss(&t, x, cfg.epsilon).0, &p, i);
                worst[3] = worst[3].max(rel(grad[i], n));
            }
        }
    }
    (
        worst.iter().all(|&w| w < 1e-4),
        format!(
            "max rel err: class {:.1e}, box {:.1e}, focal {:.1e}, dice {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn loss_constants() -> Outcome {
    let cfg = LossConfig::default();
    let constants = cfg.class_weights == [0.5, 0.5, 1.5]
        && cfg.lambda_giou == 0.4
        && cfg.lambda_l1 == 0.6
        && cfg.lambda_focal == 0.05
        && cfg.lambda_dice == 1.0
        && cfg.gamma == 2.0
        && cfg.epsilon == 1.0;
    let n = cfg.num_queries;
    let mut labels = InstanceSet::<f64>::default();
    labels.classes.push(Class::Cell);
    labels.boxes.push(BoundingBox::new(0.25, 0.25, 0.5, 0.5));
    labels.masks.push(Mask::from_fn(4, 4, |y, x| y < 3 && x < 3));
    let mut class_probs = vec![0.0; n * 3];
    for q in 0..n {
        class_probs[q * 3] = 1.0;
    }
    let mut preds = PredictionSet {
        num_queries: n,
        num_classes: 3,
        height: 4,
        width: 4,
        class_probs,
        boxes: vec![BoundingBox::new(0.9, 0.9, 0.1, 0.1); n],
        mask_probs: vec![1.0 / n as f64; n * 16],
    };
    preds.class_probs[21..24].fill(1.0 / 3.0);
    preds.boxes[7] = BoundingBox::new(0.5, 0.5, 0.5, 0.5);
    preds.mask_probs[7 * 16..8 * 16].fill(0.5);
    let l = combined_loss(&labels, &preds, &cfg).unwrap();
    let expected = 1.64792 + 0.731746 + 0.45307;
    (
        constants && l.matching.sigma[0] == 7 && (l.total - expected).abs() < 1e-4,
        format!("total {:.6} vs {expected:.6}, matched query {}", l.total, l.matching.sigma[0]),
    )
}

fn shapes() -> Outcome {
    let mut checks = 0;
    let mut failures = Vec::new();
    for variant in [Variant::A, Variant::B] {
        let model = CellDetr::<f32>::new(&ModelConfig::variant(variant), 2).unwrap();
        for batch in [1usize, 8] {
            let samples: Vec<Sample<f32>> = synth_generate(batch, 30 + batch as u64);
            let refs: Vec<&[f32]> = samples.iter().map(|s| s.image.as_slice()).collect();
            let x = prepare_images(&refs, 128).unwrap();
            let g = Graph::inference();
            let out = model.forward(&g, g.input(x)).unwrap();
            let mut ok = g.shape(out.class_probs) == [batch, 20, 3]
                && g.shape(out.boxes) == [batch, 20, 4]
                && g.shape(out.mask_probs) == [batch, 20, 128, 128];
            for p in model.predictions(&g, &out) {
                for px in 0..128 * 128 {
                    let s: f32 = (0..20).map(|q| p.mask_probs[q * 128 * 128 + px]).sum();
                    ok &= (s - 1.0).abs() < 1e-5;
                }
                let inst = instances_from_predictions(&p);
                for i in 0..inst.len() {
                    for j in i + 1..inst.len() {
                        ok &= !inst[i].mask.overlaps(&inst[j].mask);
                    }
                }
            }
            checks += 1;
            if !ok {
                failures.push(format!("{variant}/B={batch}"));
            }
        }
    }
    (failures.is_empty(), format!("{}/{checks} configurations pass {failures:?}", checks - failures.len()))
}

fn parameter_counts() -> Outcome {
    let a = count_parameters(&ModelConfig::variant(Variant::A)).unwrap();
    let b = count_parameters(&ModelConfig::variant(Variant::B)).unwrap();
    let ok = (3_900_000..=4_700_000).contains(&a) && (4_500_000..=5_500_000).contains(&b) && b > a;
    (ok, format!("A {a}, B {b}"))
}

fn variant_b_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let x = Tensor::<f32>::randn(&[2, 8, 16, 16], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[8, 8, 3, 3], 0.2, &mut rng);
    let bias = Tensor::<f32>::randn(&[8], 0.1, &mut rng);
    let g = Graph::inference();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(bias));
    let conv = g.value(g.conv2d(xv, wv, Some(bv), 1).unwrap());
    let deform = g
        .deform_conv2d(
            xv,
            g.input(Tensor::zeros(&[2, 18, 16, 16])),
            g.input(Tensor::ones(&[2, 9, 16, 16])),
            wv,
            Some(bv),
            1,
        )
        .unwrap();
    let pac = g.pac_conv2d(xv, g.input(Tensor::full(&[2, 16, 16, 16], 0.7)), wv, Some(bv), 1).unwrap();
    let d1 = g.value(deform).max_abs_diff(&conv);
    let d2 = g.value(pac).max_abs_diff(&conv);
    let leaky = |v: f64| if v >= 0.0 { v } else { 0.01 * v };
    let d3 = leaky_relu_init().max_deviation(leaky, -3.0, 3.0, 6001);
    (
        d1 < 1e-5 && d2 < 1e-5 && d3 < 0.1,
        format!("deform {d1:.2e}, PAC {d2:.2e}, Padé vs leaky ReLU {d3:.4}"),
    )
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let samples: Vec<Sample<f32>> = synth_generate(8, 11);
    let cfg = Config::default();
    let model = CellDetr::<f32>::new(&cfg.model, 1).unwrap();
    let mut tc = cfg.train.clone();
    tc.total_epochs = 300;
    tc.lr_drops.clear();
    tc.lr_rest = SHORT_RUN_LR.0;
    tc.lr_backbone = SHORT_RUN_LR.1;
    let opts = TrainOptions {
        augment: false,
        ..Default::default()
    };
    let out = train(model, &cfg.loss, &tc, &samples, &[], &opts).unwrap();
    let r = evaluate(&out.last, &samples, &cfg.loss).unwrap();
    (
        r.cell_jaccard >= 0.9 && r.classification_accuracy >= 0.95,
        format!(
            "{} steps, train J_c {:.4}, class acc {:.4}, {:.0} s",
            out.log.steps.len(),
            r.cell_jaccard,
            r.classification_accuracy,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn desk() -> Outcome {
    let t = Instant::now();
    let samples: Vec<Sample<f32>> = synth_generate(200, 7);
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = split_dataset(&ids, 7, (0.8, 0.1));
    let pick = |v: &[String]| -> Vec<Sample<f32>> {
        v.iter()
            .map(|id| samples.iter().find(|s| &s.id == id).unwrap().clone())
            .collect()
    };
    let (tr, va, te) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let cfg = Config::default();
    let model = CellDetr::<f32>::new(&cfg.model, 1).unwrap();
    let mut tc = cfg.train.clone();
    tc.total_epochs = 50;
    // the first drop is at epoch 50, past the end of this run
    tc.lr_drops.retain(|&d| d < 50);
    tc.lr_rest = SHORT_RUN_LR.0;
    tc.lr_backbone = SHORT_RUN_LR.1;
    let opts = TrainOptions::default();
    let out = train(model, &cfg.loss, &tc, &tr, &va, &opts).unwrap();
    let (best, meta) = out.best.expect("validation ran");
    let val = evaluate(&best, &va, &cfg.loss).unwrap();
    let test = evaluate(&best, &te, &cfg.loss).unwrap();
    (
        val.cell_jaccard >= 0.7 && val.seg_accuracy >= 0.9,
        format!(
            "split {}/{}/{}, best epoch {:?}, val J_c {:.4}, val seg acc {:.4} (test J_c {:.4}), {:.0} s",
            tr.len(),
            va.len(),
            te.len(),
            meta.epoch,
            val.cell_jaccard,
            val.seg_accuracy,
            test.cell_jaccard,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn metric_oracles() -> Outcome {
    const S: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let map = |rng: &mut ChaCha8Rng| {
        let mut m = vec![Class::NoObject; S * S];
        for _ in 0..rng.random_range(0..5) {
            let c = if rng.random_bool(0.5) { Class::Cell } else { Class::Trap };
            let (y0, x0) = (rng.random_range(0..S), rng.random_range(0..S));
            let (y1, x1) = (rng.random_range(y0..=S), rng.random_range(x0..=S));
            for y in y0..y1 {
                m[y * S + x0..y * S + x1].fill(c);
            }
        }
        m
    };
    let mut mismatches = 0;
    let mut identity = 0.0f64;
    for _ in 0..200 {
        let y = map(&mut rng);
        let h = map(&mut rng);
        let (mut inter, mut ny, mut nh, mut same) = (0usize, 0usize, 0usize, 0usize);
        let mut ci = [0usize; 3];
        let mut cu = [0usize; 3];
        for (&a, &b) in y.iter().zip(&h) {
            same += (a == b) as usize;
            ny += (a != Class::NoObject) as usize;
            nh += (b != Class::NoObject) as usize;
            inter += (a != Class::NoObject && a == b) as usize;
            for c in Class::ALL {
                ci[c.index()] += (a == c && b == c) as usize;
                cu[c.index()] += (a == c || b == c) as usize;
            }
        }
        let div = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
        let cell_y = Mask::from_fn(S, S, |r, c| y[r * S + c] == Class::Cell);
        let cell_h = Mask::from_fn(S, S, |r, c| h[r * S + c] == Class::Cell);
        let agree = dice_coefficient(&y, &h) == div(2 * inter, ny + nh)
            && foreground_jaccard(&y, &h) == div(inter, ny + nh - inter)
            && seg_accuracy(&y, &h) == div(same, S * S)
            && class_jaccard(&y, &h, Class::Cell) == div(ci[2], cu[2])
            && class_jaccard(&y, &h, Class::Trap) == div(ci[1], cu[1])
            && mask_iou(&cell_y, &cell_h) == div(ci[2], cu[2]);
        mismatches += (!agree) as usize;
        let j = foreground_jaccard(&y, &h);
        identity = identity.max((dice_coefficient(&y, &h) - 2.0 * j / (1.0 + j)).abs());
    }
    (
        mismatches == 0 && identity < 1e-9,
        format!("{mismatches}/200 mismatches, max |D - 2J/(1+J)| {identity:.1e}"),
    )
}

fn fluorescence() -> Outcome {
    let mut cells = 0;
    let mut wrong = 0;
    let mut scale_err = 0.0f64;
    for seed in 0..300u64 {
        let s: Sample<f64> = synth_sample(format!("f{seed}"), seed, Scenario::ALL[seed as usize % 3]);
        let f = s.fluorescence.as_ref().unwrap();
        let truth = s.fluorescence_truth.as_ref().unwrap();
        let rows = measure_labels(&s.id, &s.instances, f).unwrap();
        let expected: Vec<f64> = (0..s.instances.len())
            .filter(|&i| s.instances.classes[i] == Class::Cell)
            .map(|i| truth[i])
            .collect();
        if rows.len() != expected.len() {
            wrong += 1;
            continue;
        }
        let scaled: Vec<f64> = f.iter().map(|v| v * 3.5).collect();
        let rows3 = measure_labels(&s.id, &s.instances, &scaled).unwrap();
        for ((r, r3), e) in rows.iter().zip(&rows3).zip(&expected) {
            cells += 1;
            wrong += (r.fluorescence_au != *e) as usize;
            scale_err = scale_err.max((r3.fluorescence_au - 3.5 * r.fluorescence_au).abs());
        }
    }
    (
        wrong == 0 && cells > 0 && scale_err == 0.0,
        format!("{cells} cells, {wrong} differ from generator truth, max |F(3.5x) - 3.5 F| {scale_err:.1e}"),
    )
}

fn latency() -> Outcome {
    let images: Vec<Vec<f32>> = synth_generate::<f32>(20, 99).into_iter().map(|s| s.image).collect();
    let mut reports = Vec::new();
    for variant in [Variant::A, Variant::B] {
        let model = CellDetr::<f32>::new(&ModelConfig::variant(variant), 0).unwrap();
        reports.push(benchmark_latency(&model, &images, 1000).unwrap());
    }
    let (a, b) = (&reports[0], &reports[1]);
    (
        a.runs >= 1000
            && b.runs >= 1000
            && a.relative_std() < 0.05
            && b.relative_std() < 0.05
            && a.mean_ms < b.mean_ms,
        format!(
            "A {:.2} ms (std/mean {:.3}), B {:.2} ms (std/mean {:.3}), {} runs each",
            a.mean_ms,
            a.relative_std(),
            b.mean_ms,
            b.relative_std(),
            a.runs
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("matching", matching),
        ("geometry", geometry),
        ("gradients", gradients),
        ("loss-constants", loss_constants),
        ("shapes", shapes),
        ("parameter-counts", parameter_counts),
        ("variant-b-reductions", variant_b_reductions),
        ("overfit", overfit),
        ("desk", desk),
        ("metric-oracles", metric_oracles),
        ("fluorescence", fluorescence),
        ("latency", latency),
    ];
    let only: Option<Vec<String>> = std::env::var("CELLDETR_ACCEPT_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut failed = 0;
    for (key, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|k| k == key)) {
            continue;
        }
        let (ok, detail) = run();
        println!("{} {key}: {detail}", if ok { "PASS" } else { "FAIL" });
        failed += (!ok) as usize;
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
