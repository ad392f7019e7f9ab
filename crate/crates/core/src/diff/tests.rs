use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(w ⊙ f(x))` with a fixed random weighting so every output
/// entry carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(random(rng, &shape));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

fn assert_grads(tape: &mut Tape, loss: Var) {
    let report = check_gradients(tape, loss, &[], 1e-4).unwrap();
    assert!(report.passed(), "{report:#?}");
}

#[test]
fn doubling_forward() {
    let mut t = Tape::new();
    let x = t.input("x", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let y = t.add(x, x).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 4.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::new();
    let x = t.input("x", Tensor::vector(vec![0.0; 3]).unwrap()).unwrap();
    let y = t.softmax(x).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn matmul_shape_contract() {
    let mut t = Tape::new();
    let a = t.input("a", Tensor::zeros(&[2, 3])).unwrap();
    let b = t.input("b", Tensor::zeros(&[3, 4])).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).shape(), &[2, 4]);
    assert!(matches!(t.matmul(b, b), Err(crate::Error::Shape(_))));
}

#[test]
fn square_derivative() {
    let mut t = Tape::new();
    let x = t.input("x", Tensor::scalar(3.0)).unwrap();
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(&t, x).data(), &[6.0]);
}

#[test]
fn unreached_parameter_gets_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store.insert("used", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    store.insert("idle", Tensor::vector(vec![5.0]).unwrap()).unwrap();
    let mut t = Tape::new();
    let u = t.param(&store, used);
    let s = t.sum(u).unwrap();
    let grads = t.backward(s).unwrap().for_params(&t, &store);
    assert_eq!(grads[0].data(), &[1.0, 1.0]);
    assert_eq!(grads[1].data(), &[0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.input("x", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    assert!(matches!(t.backward(x), Err(crate::Error::Shape(_))));
}

#[test]
fn non_finite_intermediate_names_the_node() {
    let mut t = Tape::new();
    let x = t.input("x", Tensor::vector(vec![0.0, 1.0]).unwrap()).unwrap();
    let err = t.log(x).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite { node: 1, op: "log" }), "{err}");
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = vec![0.3, -1.2, 2.0, 0.5];
    let mut t = Tape::new();
    let x = t.input("logits", Tensor::matrix(1, 4, logits.clone()).unwrap()).unwrap();
    let loss = t.cross_entropy(x, vec![2], vec![1.0]).unwrap();
    let g = t.backward(loss).unwrap().wrt(&t, x);
    let mut p = logits.clone();
    let m = p.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = p.iter().map(|v| (v - m).exp()).sum();
    p.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
    p[2] -= 1.0;
    for (a, b) in g.data().iter().zip(&p) {
        assert!((a - b).abs() < 1e-14);
    }
    assert_grads(&mut t, loss);
}

#[test]
fn identity_record_has_zero_error() {
    let mut t = Tape::new();
    let x = t.input("x", Tensor::zeros(&[2, 3])).unwrap();
    let s = t.sum(x).unwrap();
    let report = check_gradients(&mut t, s, &[], 1e-4).unwrap();
    assert_eq!(report.max_rel_error(), 0.0);
}

#[test]
fn linear_layer_cross_entropy_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let w = store.insert("w", random(&mut rng, &[5, 7])).unwrap();
    let b = store.insert("b", random(&mut rng, &[7])).unwrap();
    let mut t = Tape::new();
    let x = t.input("x", random(&mut rng, &[4, 5])).unwrap();
    let (wv, bv) = (t.param(&store, w), t.param(&store, b));
    let h = t.matmul(x, wv).unwrap();
    let h = t.add_row(h, bv).unwrap();
    let loss = t.cross_entropy(h, vec![0, 3, 6, 2], vec![0.25, 0.25, 0.0, 0.25]).unwrap();
    assert_grads(&mut t, loss);
}

#[test]
fn layer_norm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = Tape::new();
    let x = t.input("x", random(&mut rng, &[3, 6])).unwrap();
    let g = t.input("gamma", random(&mut rng, &[6])).unwrap();
    let b = t.input("beta", random(&mut rng, &[6])).unwrap();
    let y = t.layer_norm(x, g, b).unwrap();
    let loss = weighted_sum(&mut t, y, &mut rng);
    assert_grads(&mut t, loss);
}

#[test]
fn elementwise_primitives_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::new();
    let a = t.input("a", random(&mut rng, &[3, 4])).unwrap();
    let b = t.input("b", random(&mut rng, &[3, 4])).unwrap();
    let s = t.sub(a, b).unwrap();
    let e = t.exp(s).unwrap();
    let th = t.tanh(a).unwrap();
    let r = t.relu(b).unwrap();
    let gl = t.gelu(a).unwrap();
    let r = t.add(r, gl).unwrap();
    let m = t.mul(th, r).unwrap();
    let sc = t.scale(m, -1.7).unwrap();
    let sum = t.add(e, sc).unwrap();
    let shifted = t.add_scalar(e, 0.5).unwrap();
    let lg = t.log(shifted).unwrap();
    let tot = t.add(sum, lg).unwrap();
    let mean = t.mean(tot).unwrap();
    let loss = weighted_sum(&mut t, tot, &mut rng);
    let loss = t.add(loss, mean).unwrap();
    assert_grads(&mut t, loss);
}

#[test]
fn structural_primitives_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut t = Tape::new();
    let table = t.input("table", random(&mut rng, &[5, 3])).unwrap();
    let other = t.input("other", random(&mut rng, &[4, 2])).unwrap();
    let g = t.gather(table, vec![4, 0, 4, 2]).unwrap();
    let c = t.concat(&[g, other]).unwrap();
    let s = t.slice(c, 1, 4).unwrap();
    let sm = t.softmax(s).unwrap();
    let loss = weighted_sum(&mut t, sm, &mut rng);
    assert_grads(&mut t, loss);
}

#[test]
fn attention_gradcheck_with_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for causal in [false, true] {
        let mut t = Tape::new();
        let q = t.input("q", random(&mut rng, &[2 * 3, 4])).unwrap();
        let k = t.input("k", random(&mut rng, &[2 * 3, 4])).unwrap();
        let v = t.input("v", random(&mut rng, &[2 * 3, 4])).unwrap();
        let spec = AttentionSpec {
            batch: 2,
            q_len: 3,
            k_len: 3,
            heads: 2,
            causal,
            key_mask: Some(vec![true, true, false, true, false, true]),
        };
        let o = t.attention(q, k, v, spec).unwrap();
        let loss = weighted_sum(&mut t, o, &mut rng);
        assert_grads(&mut t, loss);
    }
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = random(&mut rng, &[4, 4]);
    let k = random(&mut rng, &[4, 4]);
    let v = random(&mut rng, &[4, 4]);
    let spec = AttentionSpec {
        batch: 1,
        q_len: 4,
        k_len: 4,
        heads: 1,
        causal: true,
        key_mask: None,
    };
    let mut t = Tape::new();
    let (qv, kv, vv) = (
        t.input("q", q.clone()).unwrap(),
        t.input("k", k.clone()).unwrap(),
        t.input("v", v.clone()).unwrap(),
    );
    let o = t.attention(qv, kv, vv, spec).unwrap();
    let before = t.value(o).clone();
    let mut v2 = v.clone();
    v2.data_mut()[12..].iter_mut().for_each(|x| *x += 1.0);
    t.forward_eval(&[("v", v2)]).unwrap();
    assert_eq!(&t.value(o).data()[..12], &before.data()[..12]);
    assert_ne!(&t.value(o).data()[12..], &before.data()[12..]);
}

#[test]
fn forward_eval_rebinds_inputs_and_checks_shapes() {
    let mut t = Tape::new();
    let x = t.input("x", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let y = t.mul(x, x).unwrap();
    t.set_output("y", y);
    t.forward_eval(&[("x", Tensor::vector(vec![3.0, -1.0]).unwrap())]).unwrap();
    assert_eq!(t.output("y").unwrap().data(), &[9.0, 1.0]);
    let bad = t.forward_eval(&[("x", Tensor::vector(vec![1.0]).unwrap())]);
    assert!(matches!(bad, Err(crate::Error::Shape(_))));
    assert!(t.forward_eval(&[("nope", Tensor::scalar(1.0))]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::new();
        let x = t.input("x", Tensor::matrix(3, 4, vals).unwrap()).unwrap();
        let y = t.softmax(x).unwrap();
        for row in t.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_bit_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 5]);
        let b = random(&mut rng, &[5, 2]);
        let run = || {
            let mut t = Tape::new();
            let x = t.input("a", a.clone()).unwrap();
            let w = t.input("b", b.clone()).unwrap();
            let h = t.matmul(x, w).unwrap();
            let s = t.softmax(h).unwrap();
            t.value(s).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn matmul_gradients_match_finite_differences(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let a = t.input("a", random(&mut rng, &[3, 4])).unwrap();
        let b = t.input("b", random(&mut rng, &[4, 2])).unwrap();
        let c = t.matmul(a, b).unwrap();
        let loss = weighted_sum(&mut t, c, &mut rng);
        let report = check_gradients(&mut t, loss, &[], 1e-4).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }
}
