use celldetr_tensor::{pade_eval, AdamW, AdamWConfig, Graph, Group, Mode, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Direct zero-padded convolution, one output at a time.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oc, k) = (w.dim(0), w.dim(2));
    let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let mut out = Tensor::zeros(&[b, oc, oh, ow]);
    for n in 0..b {
        for o in 0..oc {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = (y + ky) as isize - pad as isize;
                                let sx = (xx + kx) as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * c + ci) * h + sy as usize) * wd + sx as usize;
                                let wi = ((o * c + ci) * k + ky) * k + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.data_mut()[((n * oc + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let g = Graph::<f64>::inference();
    let (x, w) = (rand(&[2, 3, 7, 6], 1), rand(&[4, 3, 3, 3], 2));
    let y = g.conv2d(g.input(x.clone()), g.input(w.clone()), None, 1).unwrap();
    assert!(g.value(y).max_abs_diff(&naive_conv(&x, &w, 1)) < 1e-12);
}

#[test]
fn deform_with_zero_offsets_and_unit_mask_is_conv() {
    let g = Graph::<f64>::inference();
    let (x, w, b) = (rand(&[2, 3, 8, 8], 3), rand(&[5, 3, 3, 3], 4), rand(&[5], 5));
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
    let off = g.input(Tensor::zeros(&[2, 18, 8, 8]));
    let mask = g.input(Tensor::ones(&[2, 9, 8, 8]));
    let d = g.deform_conv2d(xv, off, mask, wv, Some(bv), 1).unwrap();
    let c = g.conv2d(xv, wv, Some(bv), 1).unwrap();
    assert!(g.value(d).max_abs_diff(&g.value(c)) < 1e-5);
}

#[test]
fn deform_integer_offset_shifts_the_input() {
    // a 1x1 kernel with offset (+1, +2) reads x[y + 1, x + 2]
    let g = Graph::<f64>::inference();
    let x = rand(&[1, 1, 6, 6], 6);
    let mut off = Tensor::zeros(&[1, 2, 6, 6]);
    off.data_mut()[..36].fill(1.0);
    off.data_mut()[36..].fill(2.0);
    let y = g
        .deform_conv2d(
            g.input(x.clone()),
            g.input(off),
            g.input(Tensor::ones(&[1, 1, 6, 6])),
            g.input(Tensor::ones(&[1, 1, 1, 1])),
            None,
            0,
        )
        .unwrap();
    let y = g.value(y);
    for r in 0..6 {
        for c in 0..6 {
            let expected = if r + 1 < 6 && c + 2 < 6 { x.data()[(r + 1) * 6 + c + 2] } else { 0.0 };
            assert!((y.data()[r * 6 + c] - expected).abs() < 1e-12, "({r}, {c})");
        }
    }
}

#[test]
fn pac_with_constant_guidance_is_conv() {
    let g = Graph::<f64>::inference();
    let (x, w) = (rand(&[1, 2, 9, 7], 7), rand(&[3, 2, 3, 3], 8));
    let (xv, wv) = (g.input(x), g.input(w));
    let guide = g.input(Tensor::full(&[1, 4, 9, 7], 0.3));
    let p = g.pac_conv2d(xv, guide, wv, None, 1).unwrap();
    let c = g.conv2d(xv, wv, None, 1).unwrap();
    assert!(g.value(p).max_abs_diff(&g.value(c)) < 1e-5);
}

#[test]
fn pac_damps_taps_across_guidance_edges() {
    // step edge in the guidance: the tap across the edge gets exp(-½·d²)
    let g = Graph::<f64>::inference();
    let x = Tensor::from_vec(&[1, 1, 1, 3], vec![0.0, 0.0, 1.0]).unwrap();
    let guide = Tensor::from_vec(&[1, 1, 1, 3], vec![0.0, 0.0, 2.0]).unwrap();
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut()[5] = 1.0; // right neighbour on the centre row
    let y = g.pac_conv2d(g.input(x), g.input(guide), g.input(w), None, 1).unwrap();
    let y = g.value(y);
    assert!((y.data()[1] - (-2.0f64).exp()).abs() < 1e-12);
    assert_eq!(y.data()[0], 0.0);
}

#[test]
fn pade_gradients_match_finite_differences() {
    let a = [0.02, 0.5, 0.3, 0.05, -0.01, 0.002];
    let b = [0.1, -0.2, 0.03, 0.01];
    let h = 1e-6;
    for i in -40..=40 {
        let x = i as f64 * 0.1;
        let numeric = (pade_eval(x + h, &a, &b).0 - pade_eval(x - h, &a, &b).0) / (2.0 * h);
        let analytic = pade_eval(x, &a, &b).1;
        assert!((numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs()), "x = {x}");
    }

    // coefficient gradients through the graph
    let xs = rand(&[16], 9);
    let g = Graph::new(Mode::Eval, 0);
    let (xv, av, bv) = (
        g.input(xs.clone()),
        g.leaf(Tensor::from_vec(&[6], a.to_vec()).unwrap()),
        g.leaf(Tensor::from_vec(&[4], b.to_vec()).unwrap()),
    );
    let y = g.pade(xv, av, bv).unwrap();
    let (_, leaf) = g.backward(&[(y, Tensor::ones(&[16]))]).unwrap();
    let total = |a: &[f64], b: &[f64]| xs.data().iter().map(|&v| pade_eval(v, a, b).0).sum::<f64>();
    for j in 0..a.len() {
        let (mut p, mut m) = (a, a);
        p[j] += h;
        m[j] -= h;
        let numeric = (total(&p, &b) - total(&m, &b)) / (2.0 * h);
        assert!((leaf.get(av).unwrap().data()[j] - numeric).abs() < 1e-5);
    }
    for j in 0..b.len() {
        let (mut p, mut m) = (b, b);
        p[j] += h;
        m[j] -= h;
        let numeric = (total(&a, &p) - total(&a, &m)) / (2.0 * h);
        assert!((leaf.get(bv).unwrap().data()[j] - numeric).abs() < 1e-5);
    }
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("w", Group(0), Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    opt.set_group_lr(Group(0), 0.1);
    let g = Graph::new(Mode::Train, 0);
    let w = g.param(&store, id);
    let y = g.scale(w, 2.0);
    let (grads, _) = g.backward(&[(y, Tensor::from_vec(&[3], vec![1.0, -1.0, 0.0]).unwrap())]).unwrap();
    drop(g);
    opt.step(&mut store, &grads);
    let v = store.value(id).data();
    // the bias-corrected first step is lr · sign(grad)
    assert!((v[0] - 0.9).abs() < 1e-6);
    assert!((v[1] + 1.9).abs() < 1e-6);
    assert_eq!(v[2], 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9) {
        let g = Graph::<f64>::inference();
        let mut x = rand(&[rows, cols], seed);
        x.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        let y = g.value(g.softmax(g.input(x), 1).unwrap());
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_naive(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let (a, b) = (rand(&[m, k], seed), rand(&[k, n], seed ^ 1));
        let g = Graph::<f64>::inference();
        let c = g.value(g.matmul(g.input(a.clone()), g.input(b.clone()), false, false).unwrap());
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
                prop_assert!((c.data()[i * n + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deform_zero_offsets_equal_conv_for_random_shapes(seed in any::<u64>(), h in 3usize..8, w in 3usize..8) {
        let g = Graph::<f64>::inference();
        let (xv, wv) = (g.input(rand(&[1, 2, h, w], seed)), g.input(rand(&[2, 2, 3, 3], seed ^ 7)));
        let d = g.deform_conv2d(
            xv,
            g.input(Tensor::zeros(&[1, 18, h, w])),
            g.input(Tensor::ones(&[1, 9, h, w])),
            wv,
            None,
            1,
        ).unwrap();
        let c = g.conv2d(xv, wv, None, 1).unwrap();
        prop_assert!(g.value(d).max_abs_diff(&g.value(c)) < 1e-9);
    }
}
