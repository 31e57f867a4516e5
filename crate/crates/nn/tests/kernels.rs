use p2p_nn::gradcheck::{finite_diff_check, GradCheckConfig};
use p2p_nn::{BatchNormIds, BatchNormOpts, Mode, NnError, ParamId, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Projects `out` onto a fixed random direction so the loss gradient is
/// dense and non-uniform.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(out).len();
    let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = tape.mul_const(out, &dir).unwrap();
    tape.sum(y)
}

fn check<F>(store: &mut ParamStore, tol: f64, f: F) -> f64
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var, NnError>,
{
    let cfg = GradCheckConfig {
        tolerance: tol,
        ..Default::default()
    };
    let report = finite_diff_check(store, f, &cfg).unwrap();
    assert!(report.total_checked() > 0);
    for p in &report.params {
        assert!(p.passed, "{} rel err {} > {tol}", p.name, p.max_rel_err);
    }
    report.max_rel_err()
}

fn store_with(tensors: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = tensors
        .iter()
        .map(|(n, t)| store.add(*n, t.clone(), true).unwrap())
        .collect();
    (store, ids)
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut store, ids) = store_with(&[
        ("x", rand_tensor(&mut rng, &[2, 3, 5])),
        ("w", rand_tensor(&mut rng, &[4, 5])),
        ("b", rand_tensor(&mut rng, &[4])),
    ]);
    check(&mut store, 1e-6, |s, t| {
        let (x, w, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
        let y = t.linear(x, w, Some(b))?;
        Ok(project(t, y, 7))
    });
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut store, ids) = store_with(&[
        ("x", rand_tensor(&mut rng, &[2, 3, 9])),
        ("w", rand_tensor(&mut rng, &[4, 3, 3])),
        ("b", rand_tensor(&mut rng, &[4])),
    ]);
    check(&mut store, 1e-4, |s, t| {
        let (x, w, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
        let y = t.conv1d(x, w, Some(b), 2)?;
        assert_eq!(t.shape(y), &[2, 4, 4]);
        Ok(project(t, y, 8))
    });
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut store, ids) = store_with(&[
        ("x", rand_tensor(&mut rng, &[2, 3, 6, 5])),
        ("w", rand_tensor(&mut rng, &[4, 3, 3, 3])),
        ("b", rand_tensor(&mut rng, &[4])),
    ]);
    for stride in [1, 2] {
        check(&mut store, 1e-4, |s, t| {
            let (x, w, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
            let y = t.conv2d(x, w, Some(b), stride, 1)?;
            Ok(project(t, y, 9))
        });
    }
}

#[test]
fn relu_and_max_pool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut store, ids) = store_with(&[("x", rand_tensor(&mut rng, &[3, 7, 4]))]);
    check(&mut store, 1e-4, |s, t| {
        let x = t.param(s, ids[0]);
        let r = t.relu(x);
        let p = t.max_pool_over_axis(r, 1)?;
        Ok(project(t, p, 10))
    });
}

#[test]
fn batch_norm_gradients_match_finite_differences_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[3, 4, 5]), true).unwrap();
    let ids = BatchNormIds {
        gamma: store.add("g", rand_tensor(&mut rng, &[4]), true).unwrap(),
        beta: store.add("b", rand_tensor(&mut rng, &[4]), true).unwrap(),
        running_mean: store.add("rm", rand_tensor(&mut rng, &[4]), false).unwrap(),
        running_var: store.add("rv", Tensor::full(&[4], 0.7), false).unwrap(),
    };
    let opts = BatchNormOpts {
        axis: 1,
        momentum: 0.1,
        eps: 1e-5,
    };
    for mode in [Mode::Train, Mode::Eval] {
        let cfg = GradCheckConfig {
            mode,
            ..Default::default()
        };
        let report = finite_diff_check(
            &mut store,
            |s: &ParamStore, t: &mut Tape| -> Result<Var, NnError> {
                let xv = t.param(s, x);
                let y = t.batch_norm(s, xv, &ids, opts)?;
                Ok(project(t, y, 11))
            },
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "{mode:?}: {report:?}");
    }
}

#[test]
fn structural_ops_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut store, ids) = store_with(&[
        ("a", rand_tensor(&mut rng, &[2, 3, 4])),
        ("b", rand_tensor(&mut rng, &[2, 5, 4])),
    ]);
    check(&mut store, 1e-6, |s, t| {
        let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
        let c = t.concat(&[a, b], 1)?;
        let p = t.permute(c, &[2, 0, 1])?;
        let f = t.flatten(p, 1)?;
        let sl = t.slice(f, 1, 3, 11)?;
        Ok(project(t, sl, 12))
    });
}

#[test]
fn elementwise_ops_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut store, ids) = store_with(&[
        ("a", rand_tensor(&mut rng, &[3, 4])),
        ("b", rand_tensor(&mut rng, &[3, 4])),
    ]);
    check(&mut store, 1e-6, |s, t| {
        let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
        let e = t.exp(a);
        let m = t.mul(e, b)?;
        let ab = t.abs(m);
        let sc = t.scale(ab, -0.3);
        let sum = t.add(sc, a)?;
        let w = t.wrap_angle_columns(sum, &[false, true, false, true])?;
        Ok(project(t, w, 13))
    });
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut store, ids) = store_with(&[
        ("l1.w", rand_tensor(&mut rng, &[16, 6])),
        ("l1.b", rand_tensor(&mut rng, &[16])),
        ("l2.w", rand_tensor(&mut rng, &[12, 16])),
        ("l2.b", rand_tensor(&mut rng, &[12])),
        ("l3.w", rand_tensor(&mut rng, &[3, 12])),
        ("l3.b", rand_tensor(&mut rng, &[3])),
    ]);
    let input = rand_tensor(&mut rng, &[10, 6]);
    check(&mut store, 1e-4, |s, t| {
        let mut h = t.input(&input);
        for layer in 0..3 {
            let (w, b) = (t.param(s, ids[2 * layer]), t.param(s, ids[2 * layer + 1]));
            h = t.linear(h, w, Some(b))?;
            if layer < 2 {
                h = t.relu(h);
            }
        }
        let sq = t.mul(h, h)?;
        Ok(t.sum(sq))
    });
}

#[test]
fn linear_regression_loss_within_1e6() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut store, ids) = store_with(&[
        ("w", rand_tensor(&mut rng, &[1, 4])),
        ("b", rand_tensor(&mut rng, &[1])),
    ]);
    let x = rand_tensor(&mut rng, &[20, 4]);
    let target: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin()).collect();
    let err = check(&mut store, 1e-6, |s, t| {
        let xv = t.input(&x);
        let (w, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
        let y = t.linear(xv, w, Some(b))?;
        let neg: Vec<f64> = target.iter().map(|v| -v).collect();
        let r = t.add_const(y, &neg)?;
        let sq = t.mul(r, r)?;
        let s = t.sum(sq);
        Ok(t.scale(s, 0.5 / 20.0))
    });
    assert!(err <= 1e-6);
}

#[test]
fn relu_kink_coordinates_are_excluded() {
    // x[1] is exactly at the kink; perturbing it flips the mask.
    let (mut store, ids) = store_with(&[("x", Tensor::new(&[3], vec![0.5, 0.0, -0.5]).unwrap())]);
    let report = finite_diff_check(
        &mut store,
        |s: &ParamStore, t: &mut Tape| -> Result<Var, NnError> {
            let x = t.param(s, ids[0]);
            let r = t.relu(x);
            Ok(t.sum(r))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.params[0].excluded_kinks, 1);
    assert_eq!(report.params[0].checked, 2);
    assert!(report.passed());
}

#[test]
fn conv1d_kernel_one_equals_per_position_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[2, 5, 7]);
    let w = rand_tensor(&mut rng, &[3, 5, 1]);
    let b = rand_tensor(&mut rng, &[3]);
    let mut t = Tape::new(Mode::Eval);
    let (xv, wv, bv) = (t.input(&x), t.input(&w), t.input(&b));
    let y = t.conv1d(xv, wv, Some(bv), 1).unwrap();
    let out = t.value(y).to_vec();
    // matmul oracle: y[b, o, l] = sum_c w[o, c] x[b, c, l] + bias[o]
    for bi in 0..2 {
        for o in 0..3 {
            for l in 0..7 {
                let want: f64 = (0..5)
                    .map(|c| w.data()[o * 5 + c] * x.data()[(bi * 5 + c) * 7 + l])
                    .sum::<f64>()
                    + b.data()[o];
                assert!((out[(bi * 3 + o) * 7 + l] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batch_norm_eval_is_closed_form_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let gamma = rand_tensor(&mut rng, &[3]);
    let beta = rand_tensor(&mut rng, &[3]);
    let rm = rand_tensor(&mut rng, &[3]);
    let rv = Tensor::new(&[3], vec![0.5, 1.5, 2.0]).unwrap();
    let ids = BatchNormIds {
        gamma: store.add("g", gamma.clone(), true).unwrap(),
        beta: store.add("b", beta.clone(), true).unwrap(),
        running_mean: store.add("rm", rm.clone(), false).unwrap(),
        running_var: store.add("rv", rv.clone(), false).unwrap(),
    };
    let x = rand_tensor(&mut rng, &[4, 3]);
    let mut t = Tape::new(Mode::Eval);
    let xv = t.input(&x);
    let y = t
        .batch_norm(
            &store,
            xv,
            &ids,
            BatchNormOpts {
                axis: 1,
                momentum: 0.1,
                eps: 1e-5,
            },
        )
        .unwrap();
    for (i, v) in t.value(y).iter().enumerate() {
        let c = i % 3;
        let want = gamma.data()[c] * (x.data()[i] - rm.data()[c]) / (rv.data()[c] + 1e-5).sqrt() + beta.data()[c];
        assert!((v - want).abs() < 1e-12);
    }
    assert!(t.take_buffer_updates().is_empty());
}

#[test]
fn train_mode_batch_norm_queues_running_updates() {
    let mut store = ParamStore::new();
    let ids = BatchNormIds {
        gamma: store.add("g", Tensor::full(&[1], 1.0), true).unwrap(),
        beta: store.add("b", Tensor::zeros(&[1]), true).unwrap(),
        running_mean: store.add("rm", Tensor::zeros(&[1]), false).unwrap(),
        running_var: store.add("rv", Tensor::full(&[1], 1.0), false).unwrap(),
    };
    let mut t = Tape::new(Mode::Train);
    let x = t.input(&Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    t.batch_norm(
        &store,
        x,
        &ids,
        BatchNormOpts {
            axis: 1,
            momentum: 0.5,
            eps: 1e-5,
        },
    )
    .unwrap();
    store.apply_buffer_updates(t.take_buffer_updates());
    // mean 2.5, unbiased variance 5/3
    assert!((store.tensor(ids.running_mean).data()[0] - 1.25).abs() < 1e-12);
    assert!((store.tensor(ids.running_var).data()[0] - (0.5 + 0.5 * 5.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let mut store = ParamStore::new();
    let id = store
        .add("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true)
        .unwrap();
    for _ in 0..2 {
        let mut t = Tape::new(Mode::Train);
        let x = t.param(&store, id);
        let s = t.sum(x);
        t.backward(s, &mut store).unwrap();
    }
    assert_eq!(store.tensor(id).grad().unwrap(), &[2.0, 2.0]);
}

fn permutation_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec(1usize..5, 1..5).prop_flat_map(|shape| {
        let n = shape.len();
        (Just(shape), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    })
}

proptest! {
    #[test]
    fn permute_then_inverse_is_identity((shape, axes) in permutation_strategy()) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        let mut t = Tape::new(Mode::Eval);
        let x = t.input(&Tensor::new(&shape, data.clone()).unwrap());
        let p = t.permute(x, &axes).unwrap();
        let q = t.permute(p, &inv).unwrap();
        prop_assert_eq!(t.shape(q), shape.as_slice());
        prop_assert_eq!(t.value(q), data.as_slice());
    }
}
