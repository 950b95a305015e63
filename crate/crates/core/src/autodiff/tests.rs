use proptest::prelude::*;

use super::*;
use crate::gradcheck::{self, FD_STEP};
use crate::rng::{normal_tensor, Rng};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    normal_tensor(rng, shape, 1.0)
}

/// `sum(y * r)` with a fixed random projection, so every output entry
/// contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(rand(&mut Rng::new(seed), &shape));
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut tape = Tape::<f64>::inference();
    let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = tape.constant(t(&[2, 2], &[3., 5., 7., 11.]));
    let out = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(out).data(), &[3., 5., 7., 11.]);

    let a = tape.constant(t(&[1, 2], &[1., 2.]));
    let b = tape.constant(t(&[2, 1], &[3., 4.]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[11.]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(1);
    let inputs = [rand(&mut rng, &[3, 4]), rand(&mut rng, &[4, 2])];
    let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
        let y = tape.matmul(v[0], v[1])?;
        Ok(tape.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn softmax_symmetry_and_stability() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(t(&[3], &[0., 0., 0.]));
    let y = tape.softmax(x, 0).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[1000., 0.]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-300_f64.max(f64::EPSILON));
    assert!(v[1] < 1e-300);
}

#[test]
fn softmax_sums_to_one_along_any_axis() {
    let mut rng = Rng::new(3);
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(normal_tensor(&mut rng, &[3, 4, 5], 5.0));
    for axis in 0..3 {
        let y = tape.softmax(x, axis).unwrap();
        let v = tape.value(y).data();
        let shape = [3, 4, 5];
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| v[o * len * inner + j * inner + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
    assert!(tape.softmax(x, 3).is_err());
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = Rng::new(4);
    for axis in 0..2 {
        let inputs = [rand(&mut rng, &[3, 5])];
        let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
            let y = tape.softmax(v[0], axis)?;
            project(tape, y, 11)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "axis {axis}: {report:?}");
    }
}

#[test]
fn rms_norm_values() {
    let mut tape = Tape::<f64>::inference();
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let x = tape.constant(t(&[4], &[2., 2., 2., 2.]));
    let y = tape.rms_norm(x, g, 1e-5).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0).abs() < 1e-5);
    }
    let z = tape.constant(Tensor::zeros(&[4]));
    let y = tape.rms_norm(z, g, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);
}

#[test]
fn rms_norm_gradient_matches_finite_differences() {
    let mut rng = Rng::new(5);
    let inputs = [rand(&mut rng, &[2, 3, 6]), rand(&mut rng, &[6])];
    let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
        let y = tape.rms_norm(v[0], v[1], 1e-5)?;
        project(tape, y, 12)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn silu_values_and_gradient() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(t(&[2], &[0., 10.]));
    let y = tape.silu(x);
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-3);

    let mut rng = Rng::new(6);
    let inputs = [normal_tensor(&mut rng, &[4, 5], 3.0)];
    let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
        let y = tape.silu(v[0]);
        project(tape, y, 13)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn backward_of_sum_and_square() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1., -2., 0.5]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1., -2., 0.5]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2., -4., 1.]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn composite_chain_matches_finite_differences() {
    let mut rng = Rng::new(7);
    let inputs = [
        rand(&mut rng, &[2, 3, 4]),
        rand(&mut rng, &[4, 5]),
        rand(&mut rng, &[5]),
    ];
    let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
        let y = tape.matmul(v[0], v[1])?;
        let y = tape.silu(y);
        let y = tape.rms_norm(y, v[2], 1e-5)?;
        let y = tape.softmax(y, 2)?;
        project(tape, y, 14)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let mut rng = Rng::new(8);
    let inputs = [
        rand(&mut rng, &[2, 3, 4]),
        rand(&mut rng, &[2, 3, 4]),
        rand(&mut rng, &[2, 3, 4]),
    ];
    let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
        let y = tape.causal_attention(v[0], v[1], v[2], 2)?;
        project(tape, y, 15)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn attention_first_position_sees_only_itself() {
    let mut rng = Rng::new(9);
    let mut tape = Tape::<f64>::inference();
    let q = tape.constant(rand(&mut rng, &[1, 3, 4]));
    let k = tape.constant(rand(&mut rng, &[1, 3, 4]));
    let vt = rand(&mut rng, &[1, 3, 4]);
    let v = tape.constant(vt.clone());
    let y = tape.causal_attention(q, k, v, 2).unwrap();
    assert_eq!(&tape.value(y).data()[..4], &vt.data()[..4]);
}

#[test]
fn cross_entropy_values_and_gradient() {
    let mut tape = Tape::<f64>::inference();
    let logits = tape.constant(Tensor::zeros(&[2, 4]));
    let l = tape.cross_entropy(logits, &[Some(1), Some(3)]).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    assert!(tape.cross_entropy(logits, &[Some(4), None]).is_err());

    let mut rng = Rng::new(10);
    let inputs = [rand(&mut rng, &[3, 5])];
    let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
        tape.cross_entropy(v[0], &[Some(2), None, Some(4)])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn sliced_matmuls_match_materialized_and_gradients() {
    let mut rng = Rng::new(11);
    let a = rand(&mut rng, &[3, 4]);
    let w = rand(&mut rng, &[4, 8]);
    let w2 = rand(&mut rng, &[8, 4]);
    let a2 = rand(&mut rng, &[3, 3]);
    let mut tape = Tape::<f64>::inference();
    let (av, wv, w2v, a2v) = (
        tape.constant(a.clone()),
        tape.constant(w.clone()),
        tape.constant(w2.clone()),
        tape.constant(a2.clone()),
    );
    let y = tape.matmul_cols(av, wv, 2, 3).unwrap();
    let wc = tape.constant(w.slice_cols(2, 3).unwrap());
    let y_ref = tape.matmul(av, wc).unwrap();
    assert_eq!(tape.value(y), tape.value(y_ref));
    let z = tape.matmul_rows(a2v, w2v, 5, 3).unwrap();
    let wr = tape.constant(w2.slice_rows(5, 3).unwrap());
    let z_ref = tape.matmul(a2v, wr).unwrap();
    assert_eq!(tape.value(z), tape.value(z_ref));

    let report = gradcheck::check(&[a, w, a2, w2], FD_STEP, |tape, v| {
        let y = tape.matmul_cols(v[0], v[1], 2, 3)?;
        let z = tape.matmul_rows(v[2], v[3], 5, 3)?;
        let y = project(tape, y, 16)?;
        let z = project(tape, z, 17)?;
        tape.add(y, z)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn routing_and_mixing_ops_match_finite_differences() {
    let mut rng = Rng::new(12);
    let probs_logits = rand(&mut rng, &[3, 4]);
    let states: Vec<Tensor<f64>> = (0..4).map(|_| rand(&mut rng, &[3, 2])).collect();
    let mut inputs = vec![probs_logits];
    inputs.extend(states);
    let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
        let p = tape.softmax(v[0], 1)?;
        let w = tape.topk_renorm(p, &[vec![0, 2], vec![1, 3], vec![3]])?;
        let e = tape.gather_entries(w, &[(0, 2), (1, 1), (2, 3)])?;
        let lb = tape.load_balance(p, &[0.1, 0.2, 0.3, 0.4])?;
        let mixed = tape.mix_states(p, &v[1..5], None)?;
        let ei = tape.expected_index(p);
        let lam = tape.complement_ratio(ei, 4.0);
        let scaled = tape.row_scale(mixed, lam)?;
        let a = project(tape, e, 18)?;
        let b = project(tape, scaled, 19)?;
        let s = tape.add(a, b)?;
        tape.add(s, lb)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn row_movement_ops_match_finite_differences() {
    let mut rng = Rng::new(13);
    let inputs = [rand(&mut rng, &[4, 3]), rand(&mut rng, &[2, 3]), rand(&mut rng, &[5, 3])];
    let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
        let g = tape.gather_rows(v[0], &[3, 1])?;
        let g = tape.mul(g, v[1])?;
        let s = tape.scatter_add_rows(g, &[0, 2], &[4, 3])?;
        let r = tape.scatter_rows(v[0], v[1], &[1, 3])?;
        let y = tape.add(s, r)?;
        let y = tape.reshape(y, &[2, 2, 3])?;
        let e = tape.embedding(v[2], &[4, 0, 4], &[3])?;
        let a = project(tape, y, 20)?;
        let b = project(tape, e, 21)?;
        let m = tape.mean(y);
        let s = tape.add(a, b)?;
        tape.add(s, m)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn hard_mix_copies_selected_state_and_keeps_soft_backward() {
    let mut rng = Rng::new(14);
    let logits = rand(&mut rng, &[3, 3]);
    let states: Vec<Tensor<f64>> = (0..3).map(|_| rand(&mut rng, &[3, 2])).collect();
    let run = |hard: Option<&[usize]>| {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(logits.clone());
        let p = tape.softmax(l, 1).unwrap();
        let s: Vec<Var> = states.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = tape.mix_states(p, &s, hard).unwrap();
        let value = tape.value(y).clone();
        let loss = project(&mut tape, y, 22).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut grads = vec![g.get(l).unwrap().clone()];
        grads.extend(s.iter().map(|&v| g.get(v).unwrap().clone()));
        (value, grads)
    };
    let choice = [2, 0, 1];
    let (hard_val, hard_grads) = run(Some(&choice));
    let (_, soft_grads) = run(None);
    for (r, &c) in choice.iter().enumerate() {
        assert_eq!(hard_val.row(r), states[c].row(r));
    }
    assert_eq!(hard_grads, soft_grads);
}

#[test]
fn inference_tape_records_no_gradients() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.leaf(Tensor::full(&[2], 3.0));
    let y = tape.sum(x);
    let g = tape.backward(y).unwrap();
    assert!(g.get(x).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitives_pass_gradcheck_on_random_shapes(
        b in 1usize..=8, m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let inputs = [rand(&mut rng, &[b, m, k]), rand(&mut rng, &[k, n]), rand(&mut rng, &[n])];
        let report = gradcheck::check(&inputs, FD_STEP, |tape, v| {
            let y = tape.matmul(v[0], v[1])?;
            let y = tape.silu(y);
            let y = tape.rms_norm(y, v[2], 1e-5)?;
            let y = tape.softmax(y, 2)?;
            project(tape, y, seed + 1)
        }).unwrap();
        prop_assert!(report.max_rel_error < 1e-5, "{:?}", report);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..=8, cols in 1usize..=8, scale in 0.1f64..50.0, seed in 0u64..1000) {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(normal_tensor(&mut Rng::new(seed), &[rows, cols], scale));
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..rows {
            let s: f64 = tape.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(tape.value(y).row(r).iter().all(|&p| p >= 0.0));
        }
    }
}
