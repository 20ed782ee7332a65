use kig_tensor::gradcheck;
use kig_tensor::{Adam, ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_cases() {
    let mut tape = Tape::new();
    let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let out = tape.matmul(i2, i2).unwrap();
    assert_eq!(tape.value(out), &[1.0, 0.0, 0.0, 1.0]);
    let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(a, i2).unwrap();
    assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let b = Tensor::uniform(&[4, 2], -2.0, 2.0, &mut rng);
    let mut tape = Tape::new();
    let av = tape.input(&a);
    let bv = tape.constant(&b);
    let c = tape.matmul(av, bv).unwrap();
    let s = tape.sum(c);
    let grads = tape.backward(s).unwrap();
    // ones(3×2) · bᵀ: every row equals the row sums of b.
    let bd = b.data();
    let expected: Vec<f64> = (0..3)
        .flat_map(|_| (0..4).map(move |k| bd[k * 2] + bd[k * 2 + 1]))
        .collect();
    assert!(close(grads.wrt(av).unwrap(), &expected, 1e-12));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert!(close(tape.value(y), &[1.0 / 3.0; 3], 1e-15));

    let x = tape.constant(&t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert!(tape.value(y).iter().all(|v| v.is_finite()));
    assert!((tape.value(y)[0] - 1.0).abs() < 1e-12 && tape.value(y)[1] < 1e-300);

    let x = tape.constant(&t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert!(close(tape.value(y), &[0.09003, 0.24473, 0.66524], 5e-6));

    let empty = tape.constant(&Tensor::zeros(&[2, 0]));
    assert!(matches!(tape.softmax(empty, 1), Err(TensorError::Empty(_))));
}

#[test]
fn softmax_along_first_axis_of_matrix() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2, 2], &[0.0, 1.0, 0.0, 3.0]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y);
    assert!((v[0] - 0.5).abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
    assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
}

#[test]
fn layer_norm_normalizes_each_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::uniform(&[5, 16], -2.0, 2.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let g = tape.constant(&Tensor::ones(&[16]));
    let b = tape.constant(&Tensor::zeros(&[16]));
    let y = tape.layer_norm(xv, g, b).unwrap();
    for row in tape.value(y).chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn bce_examples() {
    let mut tape = Tape::new();
    let p = tape.constant(&t(&[4], &[1.0, 0.0, 0.0, 0.0]));
    let l = tape.binary_cross_entropy(p, &[1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(tape.scalar(l) < 1e-5);
    let p = tape.constant(&t(&[4], &[0.5; 4]));
    let l = tape.binary_cross_entropy(p, &[1.0, 0.0, 1.0, 0.0]).unwrap();
    assert!((tape.scalar(l) - 4.0 * 2f64.ln()).abs() < 1e-12);
    assert!((tape.scalar(l) - 2.7726).abs() < 1e-4);
}

#[test]
fn cross_entropy_uniform_logits_is_log_vocab() {
    let v = 37;
    let mut tape = Tape::new();
    let logits = tape.constant(&Tensor::zeros(&[4, v]));
    let l = tape
        .cross_entropy_lm(logits, &[0, 5, 36, 2], &[true, false, true, true])
        .unwrap();
    assert!((tape.scalar(l) - (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_errors() {
    let mut tape = Tape::new();
    let logits = tape.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(
        tape.cross_entropy_lm(logits, &[0, 3], &[true, true]),
        Err(TensorError::IndexOutOfRange { index: 3, bound: 3 })
    ));
    assert!(matches!(
        tape.cross_entropy_lm(logits, &[0, 1], &[false, false]),
        Err(TensorError::Empty(_))
    ));
}

#[test]
fn backward_simple_analytic_cases() {
    let x = t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 3.0, -0.25]);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let s = tape.sum(xv);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(xv).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    let twice: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.wrt(xv).unwrap(), twice.as_slice());
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.input(&Tensor::ones(&[3]));
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    let s = tape.sum(x);
    assert!(tape.backward(s).is_ok());
    assert!(matches!(tape.backward(s), Err(TensorError::TapeConsumed)));
}

/// Builds `Σ w ⊙ f(inputs)` with fixed random weights so every output
/// element contributes a distinct gradient.
fn probe_loss(
    tape: &mut Tape,
    out: Var,
    seed: u64,
) -> Var {
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(&[n], -1.0, 1.0, &mut rng).reshape(tape.shape(out)).unwrap();
    let w = if tape.shape(out).is_empty() { Tensor::scalar(1.0) } else { w };
    let wv = tape.constant(&w);
    let prod = tape.mul(out, wv).unwrap();
    tape.sum(prod)
}

type OpFn = fn(&mut Tape, &[Var]) -> Var;

fn gradcheck_op(name: &str, shapes: &[&[usize]], op: OpFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut params = ParamSet::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| params.add(format!("in{i}"), Tensor::uniform(s, -2.0, 2.0, &mut rng)))
        .collect();
    let eval = |p: &ParamSet, backward: bool| -> (f64, Option<kig_tensor::Gradients>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(p, id)).collect();
        let out = op(&mut tape, &vars);
        let loss = probe_loss(&mut tape, out, 99);
        let value = tape.scalar(loss);
        let grads = backward.then(|| tape.backward(loss).unwrap());
        (value, grads)
    };
    let (_, grads) = eval(&params, true);
    grads.unwrap().accumulate_into(&mut params, 1.0).unwrap();
    let report = gradcheck::check(&params, 60, &mut rng, |p| Ok(eval(p, false).0)).unwrap();
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    assert_eq!(report.len(), total.min(60));
    assert!(
        report.max_rel_error() < 1e-4,
        "{name}: worst probe {:?}",
        report.worst()
    );
}

#[test]
fn gradients_of_every_op_match_finite_differences() {
    gradcheck_op("matmul", &[&[5, 4], &[4, 6]], |t, v| t.matmul(v[0], v[1]).unwrap());
    gradcheck_op("matmul_t", &[&[5, 4], &[6, 4]], |t, v| t.matmul_t(v[0], v[1]).unwrap());
    gradcheck_op("add", &[&[6, 5], &[6, 5]], |t, v| t.add(v[0], v[1]).unwrap());
    gradcheck_op("add_row", &[&[8, 7], &[7]], |t, v| t.add_row(v[0], v[1]).unwrap());
    gradcheck_op("mul", &[&[6, 5], &[6, 5]], |t, v| t.mul(v[0], v[1]).unwrap());
    gradcheck_op("scale", &[&[60]], |t, v| t.scale(v[0], -1.7));
    gradcheck_op("gelu", &[&[60]], |t, v| t.gelu(v[0]));
    gradcheck_op("sigmoid", &[&[60]], |t, v| t.sigmoid(v[0]));
    gradcheck_op("softmax_rows", &[&[6, 10]], |t, v| t.softmax(v[0], 1).unwrap());
    gradcheck_op("softmax_cols", &[&[10, 6]], |t, v| t.softmax(v[0], 0).unwrap());
    gradcheck_op("causal_softmax", &[&[6, 10]], |t, v| t.causal_softmax(v[0], 4).unwrap());
    gradcheck_op("layer_norm", &[&[6, 10], &[10], &[10]], |t, v| {
        t.layer_norm(v[0], v[1], v[2]).unwrap()
    });
    gradcheck_op("embedding", &[&[12, 5]], |t, v| t.embedding(v[0], &[3, 0, 3, 11, 7, 3]).unwrap());
    gradcheck_op("concat_rows", &[&[3, 8], &[5, 8]], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap());
    gradcheck_op("concat_cols", &[&[8, 3], &[8, 5]], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap());
    gradcheck_op("slice_rows", &[&[9, 7]], |t, v| t.slice_rows(v[0], 2, 4).unwrap());
    gradcheck_op("slice_cols", &[&[7, 9]], |t, v| t.slice_cols(v[0], 3, 5).unwrap());
    gradcheck_op("mean_pool", &[&[9, 7]], |t, v| t.mean_pool(v[0]).unwrap());
    gradcheck_op("reshape", &[&[6, 10]], |t, v| t.reshape(v[0], &[10, 6]).unwrap());
    gradcheck_op("cross_entropy_lm", &[&[7, 9]], |t, v| {
        t.cross_entropy_lm(v[0], &[1, 8, 0, 4, 4, 2, 7], &[true, true, false, true, true, false, true])
            .unwrap()
    });
    gradcheck_op("binary_cross_entropy", &[&[6, 10]], |t, v| {
        let p = t.sigmoid(v[0]);
        let targets: Vec<f64> = (0..60).map(|i| f64::from(i % 3 == 0)).collect();
        t.binary_cross_entropy(p, &targets).unwrap()
    });
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::new();
        let a = p.add("a", Tensor::randn(&[6, 8], 1.0, &mut rng));
        let b = p.add("b", Tensor::randn(&[8, 3], 1.0, &mut rng));
        let mut tape = Tape::new();
        let (av, bv) = (tape.param(&p, a), tape.param(&p, b));
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.softmax(c, 1).unwrap();
        let g = tape.gelu(s);
        let l = tape.sum(g);
        let value = tape.scalar(l);
        tape.backward(l).unwrap().accumulate_into(&mut p, 1.0).unwrap();
        let bits: Vec<u64> = p
            .iter()
            .flat_map(|(_, _, t)| t.grad().unwrap().to_vec())
            .map(f64::to_bits)
            .collect();
        (value.to_bits(), bits)
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_inputs_receive_no_gradient() {
    let mut p = ParamSet::new();
    let id = p.add("w", Tensor::ones(&[2, 2]));
    let mut tape = Tape::new();
    let w = tape.param(&p, id);
    let x = tape.constant(&Tensor::ones(&[2, 2]));
    let y = tape.matmul(x, w).unwrap();
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert!(g.wrt(x).is_none());
    assert_eq!(g.params().count(), 1);
}

#[test]
fn adam_descends_a_tape_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParamSet::new();
    let id = p.add("w", Tensor::randn(&[4], 1.0, &mut rng));
    let mut opt = Adam::new(0.05);
    let loss_at = |p: &ParamSet| p.get(id).data().iter().map(|v| v * v).sum::<f64>();
    let start = loss_at(&p);
    for _ in 0..100 {
        let mut tape = Tape::new();
        let w = tape.param(&p, id);
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap().accumulate_into(&mut p, 1.0).unwrap();
        opt.step(&mut p).unwrap();
    }
    assert!(loss_at(&p) < start * 1e-2);
}

proptest! {
    #[test]
    fn softmax_is_a_simplex_point(xs in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![xs.len()], xs).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        prop_assert!(v.iter().all(|&p| p >= 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn causal_softmax_rows_sum_to_one(rows in 1usize..6, extra in 0usize..4, seed in 0u64..1000) {
        let cols = rows + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::uniform(&[rows, cols], -3.0, 3.0, &mut rng));
        let y = tape.causal_softmax(x, extra).unwrap();
        for (i, row) in tape.value(y).chunks(cols).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row[i + extra + 1..].iter().all(|&p| p == 0.0));
        }
    }
}
