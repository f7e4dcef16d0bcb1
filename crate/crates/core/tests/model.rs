#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use celldetr::data::synth_generate;
use celldetr::metrics::binarize;
use celldetr::model::{count_parameters, CellDetr, BACKBONE_GROUP, HEAD_GROUP};
use celldetr::pipeline::loss_and_gradients;
use celldetr::tensor::{AdamW, AdamWConfig, Graph, Mode, Tensor};
use celldetr::{LossConfig, ModelConfig, Sample, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn images(batch: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[batch, 1, 128, 128], 1.0, &mut rng)
}

#[test]
fn parameter_counts_in_range() {
    let a = count_parameters(&ModelConfig::variant(Variant::A)).unwrap();
    let b = count_parameters(&ModelConfig::variant(Variant::B)).unwrap();
    assert!((3_900_000..=4_700_000).contains(&a), "A has {a}");
    assert!((4_500_000..=5_500_000).contains(&b), "B has {b}");
    assert!(b > a);
    let model = CellDetr::<f32>::new(&ModelConfig::variant(Variant::A), 0).unwrap();
    assert_eq!(model.num_parameters(), a);
}

#[test]
fn forward_shapes_and_simplex() {
    for variant in [Variant::A, Variant::B] {
        let model = CellDetr::<f32>::new(&ModelConfig::variant(variant), 3).unwrap();
        for batch in [1, 8] {
            let g = Graph::new(Mode::Eval, 0);
            let x = g.input(images(batch, 1));
            let out = model.forward(&g, x).unwrap();
            assert_eq!(g.shape(out.class_probs), [batch, 20, 3]);
            assert_eq!(g.shape(out.boxes), [batch, 20, 4]);
            assert_eq!(g.shape(out.mask_probs), [batch, 20, 128, 128]);
            assert_eq!(g.shape(out.attention), [batch, 160, 8, 8]);
            for p in &model.predictions(&g, &out) {
                for q in 0..20 {
                    let s: f32 = p.probs(q).iter().sum();
                    assert!((s - 1.0).abs() < 1e-5);
                    assert!(p.boxes[q].to_array().iter().all(|v| *v > 0.0 && *v < 1.0));
                }
                for px in 0..128 * 128 {
                    let s: f32 = (0..20).map(|q| p.mask_probs[q * 128 * 128 + px]).sum();
                    assert!((s - 1.0).abs() < 1e-5, "{variant} pixel {px}: {s}");
                }
                let bin = binarize(p);
                let masks: Vec<_> = (0..20).map(|q| bin.mask(q, 128, 128)).collect();
                for i in 0..20 {
                    for j in i + 1..20 {
                        assert!(!masks[i].overlaps(&masks[j]));
                    }
                }
            }
        }
    }
}

#[test]
fn wrong_input_shape_is_an_error() {
    let model = CellDetr::<f32>::new(&ModelConfig::default(), 0).unwrap();
    assert!(model.infer(Tensor::zeros(&[1, 1, 64, 64])).is_err());
    assert!(model.infer(Tensor::zeros(&[1, 3, 128, 128])).is_err());
}

#[test]
fn inference_is_deterministic_and_per_image() {
    let model = CellDetr::<f32>::new(&ModelConfig::default(), 5).unwrap();
    let one = images(1, 7);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let a = model.infer(one.clone()).unwrap();
    let b = model.infer(one).unwrap();
    assert_eq!(a[0].class_probs, b[0].class_probs);
    assert_eq!(a[0].mask_probs, b[0].mask_probs);
    let pair = model.infer(Tensor::from_vec(&[2, 1, 128, 128], two).unwrap()).unwrap();
    assert_eq!(pair[0].class_probs, pair[1].class_probs);
    assert_eq!(pair[0].boxes, pair[1].boxes);
    assert_eq!(pair[0].mask_probs, pair[1].mask_probs);
    for (x, y) in a[0].class_probs.iter().zip(&pair[0].class_probs) {
        assert!((x - y).abs() < 1e-5);
    }

    let zero = model.infer(Tensor::zeros(&[1, 1, 128, 128])).unwrap();
    assert!(zero[0].class_probs.iter().chain(&zero[0].mask_probs).all(|v| v.is_finite()));
}

#[test]
fn every_parameter_receives_gradient() {
    let samples: Vec<Sample<f32>> = synth_generate(2, 4);
    let cfg = LossConfig::default();
    for variant in [Variant::A, Variant::B] {
        let model = CellDetr::<f32>::new(&ModelConfig::variant(variant), 2).unwrap();
        let (loss, grads, _) = loss_and_gradients(&model, &samples, &cfg, 0).unwrap();
        assert!(loss.total.is_finite());
        let dead = model.store.dead_params(&grads);
        assert!(dead.is_empty(), "{variant}: {dead:?}");
    }
}

#[test]
fn one_step_lowers_the_loss() {
    let cfg = LossConfig::default();
    let mut lowered = 0;
    for seed in 0..5u64 {
        let samples: Vec<Sample<f32>> = synth_generate(1, 100 + seed);
        let mut model = CellDetr::<f32>::new(&ModelConfig::default(), seed).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1e-4,
            ..Default::default()
        });
        opt.set_group_lr(BACKBONE_GROUP, 1e-5);
        opt.set_group_lr(HEAD_GROUP, 1e-4);
        let (before, grads, _) = loss_and_gradients(&model, &samples, &cfg, seed).unwrap();
        opt.step(&mut model.store, &grads);
        let (after, _, _) = loss_and_gradients(&model, &samples, &cfg, seed).unwrap();
        if after.total < before.total {
            lowered += 1;
        }
    }
    assert!(lowered >= 3, "loss went down for {lowered} of 5 seeds");
}

#[test]
fn class_and_box_outputs_follow_query_order() {
    let mut model = CellDetr::<f64>::new(&ModelConfig::default(), 9).unwrap();
    let x: Tensor<f64> = images(1, 2).cast();
    let before = model.infer(x.clone()).unwrap().remove(0);
    let id = model
        .store
        .param_ids()
        .find(|&id| model.store.name(id).ends_with("query_embed"))
        .expect("query embedding parameter");
    let perm: Vec<usize> = (0..20).map(|q| (q * 7 + 3) % 20).collect();
    let old = model.store.value(id).clone();
    let d = old.dim(1);
    let t = model.store.value_mut(id);
    for (q, &src) in perm.iter().enumerate() {
        t.data_mut()[q * d..(q + 1) * d].copy_from_slice(&old.data()[src * d..(src + 1) * d]);
    }
    let after = model.infer(x).unwrap().remove(0);
    for (q, &src) in perm.iter().enumerate() {
        for (a, b) in after.probs(q).iter().zip(before.probs(src)) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in after.boxes[q].to_array().iter().zip(before.boxes[src].to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
