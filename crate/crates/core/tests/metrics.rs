use celldetr::boxmatch::BoundingBox;
use celldetr::data::{Class, InstanceSet, Mask};
use celldetr::metrics::{
    bbox_jaccard, binarize, class_jaccard, classification_accuracy, dice_coefficient, foreground_jaccard, mask_iou,
    mean_instance_jaccard, oracle_predictions, seg_accuracy, semantic_map, MetricAccumulator,
};
use celldetr::{EvalReport, LossConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const S: usize = 16;

struct Naive {
    dice: f64,
    fg_jaccard: f64,
    jaccard: [f64; 3],
    accuracy: f64,
}

/// Straight pixel loops over two semantic maps, written independently of the
/// library's counting.
fn naive(y: &[Class], y_hat: &[Class]) -> Naive {
    let (mut inter, mut ny, mut nh, mut correct) = (0usize, 0usize, 0usize, 0usize);
    let mut ci = [0usize; 3];
    let mut cu = [0usize; 3];
    for i in 0..y.len() {
        let (a, b) = (y[i], y_hat[i]);
        if a == b {
            correct += 1;
        }
        if a != Class::NoObject {
            ny += 1;
        }
        if b != Class::NoObject {
            nh += 1;
        }
        if a != Class::NoObject && a == b {
            inter += 1;
        }
        for (k, c) in Class::ALL.iter().enumerate() {
            if a == *c && b == *c {
                ci[k] += 1;
            }
            if a == *c || b == *c {
                cu[k] += 1;
            }
        }
    }
    let div = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
    Naive {
        dice: div(2 * inter, ny + nh),
        fg_jaccard: div(inter, ny + nh - inter),
        jaccard: [div(ci[0], cu[0]), div(ci[1], cu[1]), div(ci[2], cu[2])],
        accuracy: div(correct, y.len()),
    }
}

fn random_map(rng: &mut ChaCha8Rng) -> Vec<Class> {
    // blocky maps look more like segmentations than salt-and-pepper noise
    let mut map = vec![Class::NoObject; S * S];
    for _ in 0..rng.random_range(0..5) {
        let class = if rng.random_bool(0.5) { Class::Cell } else { Class::Trap };
        let (y0, x0) = (rng.random_range(0..S), rng.random_range(0..S));
        let (y1, x1) = (rng.random_range(y0..=S), rng.random_range(x0..=S));
        for y in y0..y1 {
            for x in x0..x1 {
                map[y * S + x] = class;
            }
        }
    }
    map
}

#[test]
fn metrics_agree_with_pixel_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let y = random_map(&mut rng);
        let y_hat = if rng.random_bool(0.1) { y.clone() } else { random_map(&mut rng) };
        let n = naive(&y, &y_hat);
        assert_eq!(dice_coefficient(&y, &y_hat), n.dice);
        assert_eq!(foreground_jaccard(&y, &y_hat), n.fg_jaccard);
        assert_eq!(seg_accuracy(&y, &y_hat), n.accuracy);
        for c in [Class::Trap, Class::Cell] {
            assert_eq!(class_jaccard(&y, &y_hat, c), n.jaccard[c.index()]);
        }
        let j = foreground_jaccard(&y, &y_hat);
        assert!((dice_coefficient(&y, &y_hat) - 2.0 * j / (1.0 + j)).abs() < 1e-9);
        assert!(dice_coefficient(&y, &y_hat) >= j);
        // swapping label and prediction changes nothing
        assert_eq!(dice_coefficient(&y_hat, &y), n.dice);
        assert_eq!(class_jaccard(&y_hat, &y, Class::Cell), n.jaccard[2]);
    }
}

#[test]
fn mask_iou_agrees_with_pixel_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let bits: Vec<bool> = (0..S * S).map(|_| rng.random_bool(0.3)).collect();
        let a = Mask::from_fn(S, S, |y, x| bits[y * S + x]);
        let b = Mask::from_fn(S, S, |y, x| a.get(y, x) ^ ((y * S + x) % 7 == 0));
        let mut inter = 0;
        let mut union = 0;
        for y in 0..S {
            for x in 0..S {
                inter += (a.get(y, x) && b.get(y, x)) as usize;
                union += (a.get(y, x) || b.get(y, x)) as usize;
            }
        }
        let expected = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        assert_eq!(mask_iou(&a, &b), expected);
    }
}

#[test]
fn hand_counted_examples() {
    let mut y = vec![Class::NoObject; 16];
    let mut y_hat = vec![Class::NoObject; 16];
    y[..4].fill(Class::Cell);
    y_hat[2..6].fill(Class::Cell);
    assert_eq!(dice_coefficient(&y, &y_hat), 0.5);
    assert_eq!(class_jaccard(&y, &y_hat, Class::Cell), 1.0 / 3.0);
    assert_eq!(dice_coefficient(&y, &y), 1.0);
    assert_eq!(class_jaccard(&y, &y, Class::Trap), 1.0);

    let mut big = vec![Class::NoObject; 128 * 128];
    let truth = big.clone();
    big[77] = Class::Cell;
    assert_eq!(seg_accuracy(&truth, &big), 1.0 - 1.0 / 16384.0);

    assert_eq!(mean_instance_jaccard(&[1.0, 1.0 / 3.0]), Some(2.0 / 3.0));
    assert_eq!(mean_instance_jaccard(&[]), None);
    let a = BoundingBox::from_corners(0.0, 0.0, 2.0, 2.0);
    let b = BoundingBox::from_corners(1.0, 1.0, 3.0, 3.0);
    assert!((bbox_jaccard(&[(a, b)]).unwrap().unwrap() - 1.0 / 7.0).abs() < 1e-12);
    let mut predicted = vec![Class::NoObject; 20];
    let assigned = predicted.clone();
    predicted[4] = Class::Cell;
    assert_eq!(classification_accuracy(&predicted, &assigned), 0.95);
}

fn labels() -> InstanceSet<f64> {
    let mut l = InstanceSet::default();
    l.push_mask(Class::Trap, Mask::from_fn(S, S, |y, x| y >= 12 && x < 10));
    l.push_mask(Class::Cell, Mask::from_fn(S, S, |y, x| (6..11).contains(&y) && (2..6).contains(&x)));
    l.push_mask(Class::Cell, Mask::from_fn(S, S, |y, x| (2..5).contains(&y) && (9..14).contains(&x)));
    l
}

#[test]
fn oracle_predictions_score_perfectly() {
    let cfg = LossConfig::default();
    let l = labels();
    let preds = oracle_predictions(&l, &cfg, S, S);
    let mut acc = MetricAccumulator::new();
    acc.add(&l, &preds, &cfg).unwrap();
    let r = acc.report();
    assert!(r.values().iter().all(|&v| v == 1.0), "{r:?}");
    assert_eq!(r.counts[&Class::Cell], 2);
    assert_eq!(r.counts[&Class::Trap], 1);
}

#[test]
fn report_text_round_trip() {
    let cfg = LossConfig::default();
    let l = labels();
    let mut preds = oracle_predictions(&l, &cfg, S, S);
    // spoil one cell pixel so the numbers are not all ones
    let hw = S * S;
    preds.mask_probs[hw + 6 * S + 2] = 0.0;
    let mut acc = MetricAccumulator::new();
    acc.add(&l, &preds, &cfg).unwrap();
    let r = acc.report();
    let text = r.to_string();
    assert!(text.contains("cell_jaccard="));
    let back: EvalReport = text.parse().unwrap();
    assert_eq!(back.counts, r.counts);
    assert!((back.cell_jaccard - r.cell_jaccard).abs() < 1e-6);
}

#[test]
fn binarized_masks_are_disjoint() {
    let cfg = LossConfig::default();
    let mut preds = oracle_predictions(&labels(), &cfg, S, S);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for v in preds.mask_probs.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let bin = binarize(&preds);
    let masks: Vec<Mask> = (0..cfg.num_queries).map(|q| bin.mask(q, S, S)).collect();
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            assert!(!masks[i].overlaps(&masks[j]));
        }
    }
    assert_eq!(semantic_map(&labels(), S, S).len(), S * S);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_stay_in_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, y_hat) = (random_map(&mut rng), random_map(&mut rng));
        for v in [
            dice_coefficient(&y, &y_hat),
            foreground_jaccard(&y, &y_hat),
            seg_accuracy(&y, &y_hat),
            class_jaccard(&y, &y_hat, Class::Cell),
            class_jaccard(&y, &y_hat, Class::Trap),
        ] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn class_jaccard_is_one_only_on_agreement(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, y_hat) = (random_map(&mut rng), random_map(&mut rng));
        for c in [Class::Trap, Class::Cell] {
            let agree = y.iter().zip(&y_hat).all(|(a, b)| (*a == c) == (*b == c));
            prop_assert_eq!(class_jaccard(&y, &y_hat, c) == 1.0, agree);
        }
    }
}
