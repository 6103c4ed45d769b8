mod common;

use albert_wop::numeric::{
    dropout, gelu, layer_norm, masked_cross_entropy, matmul, softmax, DType, Tape, Tensor,
    TensorError, Var,
};
use common::gradcheck::{check, random_tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows, DType::F64).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let id = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let b = t2(&[&[3.0, 4.0], &[5.0, 6.0]]);
    assert_eq!(matmul(&id, &b).unwrap().data(), b.data());
    let z = Tensor::zeros(&[2, 2], DType::F64);
    assert!(matmul(&z, &b).unwrap().data().iter().all(|&v| v == 0.0));
    let a = t2(&[&[1.0, 2.0]]);
    let c = t2(&[&[3.0], &[4.0]]);
    let out = matmul(&a, &c).unwrap();
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.data(), naive_matmul(&a, &c).as_slice());
    assert_eq!(out.data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(m, k, n) in &[(3, 5, 4), (1, 7, 1), (8, 2, 9)] {
        let a = random_tensor(&mut rng, &[m, k], 1.0, DType::F64);
        let b = random_tensor(&mut rng, &[k, n], 1.0, DType::F64);
        let got = matmul(&a, &b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch() {
    let a = Tensor::zeros(&[2, 3], DType::F64);
    let b = Tensor::zeros(&[2, 3], DType::F64);
    assert!(matches!(matmul(&a, &b), Err(TensorError::ShapeMismatch { .. })));
}

/// erf by its Maclaurin series; converges fast for |x| ≤ 1.
fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    for n in 0..60 {
        sum += term / (2 * n + 1) as f64;
        term *= -x * x / (n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_examples() {
    let x = Tensor::new(vec![3], vec![0.0, -20.0, 1.0], DType::F64).unwrap();
    let y = gelu(&x).unwrap();
    assert_eq!(y.data()[0], 0.0);
    assert!(y.data()[1].abs() < 1e-12);
    let expected = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((y.data()[2] - expected).abs() < 1e-10, "{} vs {expected}", y.data()[2]);
}

#[test]
fn softmax_examples() {
    let s = softmax(&t2(&[&[0.0, 0.0], &[1000.0, 1000.0], &[2f64.ln(), 0.0]])).unwrap();
    assert_eq!(s.row(0), &[0.5, 0.5]);
    assert_eq!(s.row(1), &[0.5, 0.5]);
    assert!((s.row(2)[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((s.row(2)[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::full(&[2], 1.0, DType::F64);
    let zeros = Tensor::zeros(&[2], DType::F64);
    let c = layer_norm(&t2(&[&[3.0, 3.0]]), &ones, &zeros, 1e-12).unwrap();
    assert!(c.data().iter().all(|&v| v == 0.0));
    let s = layer_norm(&t2(&[&[1.0, -1.0]]), &ones, &zeros, 0.0).unwrap();
    assert_eq!(s.data(), &[1.0, -1.0]);
    let b = Tensor::new(vec![2], vec![0.25, -4.0], DType::F64).unwrap();
    let collapsed = layer_norm(&t2(&[&[1.0, 7.0], &[-2.0, 0.5]]), &zeros, &b, 1e-12).unwrap();
    assert_eq!(collapsed.row(0), b.data());
    assert_eq!(collapsed.row(1), b.data());
}

#[test]
fn cross_entropy_examples() {
    let logits = Tensor::zeros(&[2, 4], DType::F64);
    assert_eq!(masked_cross_entropy(&logits, &[-1, -1]), Err(TensorError::EmptyLabelSet));
    let ce = masked_cross_entropy(&logits, &[2, -1]).unwrap();
    assert!((ce.loss - 4f64.ln()).abs() < 1e-15);
    assert_eq!(ce.labeled, 1);

    let sat = t2(&[&[0.0, 1000.0, 0.0]]);
    let ce = masked_cross_entropy(&sat, &[1]).unwrap();
    assert!(ce.loss < 1e-6);
    assert_eq!(ce.correct, 1);

    assert!(matches!(
        masked_cross_entropy(&sat, &[3]),
        Err(TensorError::LabelOutOfRange { label: 3, classes: 3 })
    ));
}

#[test]
fn cross_entropy_with_all_labels_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random_tensor(&mut rng, &[6, 5], 3.0, DType::F64);
    let labels = [0i64, 4, 2, 2, 1, 3];
    let ce = masked_cross_entropy(&logits, &labels).unwrap();
    let mut direct = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        direct += -(row[l as usize].exp() / z).ln();
    }
    direct /= labels.len() as f64;
    assert!((ce.loss - direct).abs() < 1e-12);
    assert_eq!(ce.labeled, 6);
}

#[test]
fn dropout_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::full(&[100_000], 1.0, DType::F64);
    assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap(), x);
    let y = dropout(&x, 0.5, true, &mut rng).unwrap();
    let mean = y.data().iter().sum::<f64>() / y.numel() as f64;
    assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    assert_eq!(
        dropout(&x, 1.0, true, &mut rng),
        Err(TensorError::InvalidProbability(1.0))
    );
}

#[test]
fn dropout_is_bit_reproducible() {
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[64, 8], 1.0, DType::F32);
    let a = dropout(&x, 0.1, true, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let b = dropout(&x, 0.1, true, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn backward_square() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0, DType::F64).with_requires_grad(true));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).item().unwrap(), 6.0);
}

#[test]
fn backward_disconnected_parameter_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3], 2.0, DType::F64).with_requires_grad(true));
    let unused = tape.leaf(Tensor::full(&[2, 2], 5.0, DType::F64).with_requires_grad(true));
    let y = tape.sum(x).unwrap();
    let g = tape.backward(y).unwrap();
    let gu = g.get(unused);
    assert_eq!(gu.shape(), &[2, 2]);
    assert!(gu.data().iter().all(|&v| v == 0.0));
    assert_eq!(g.get(x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3], 2.0, DType::F64).with_requires_grad(true));
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalarLoss { .. })));
}

#[test]
fn non_finite_values_are_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2], 1e300, DType::F64));
    assert_eq!(tape.mul(x, x), Err(TensorError::NonFinite { op: "mul" }));
    assert!(Tensor::new(vec![1], vec![f64::NAN], DType::F64).is_err());
}

/// Contracts an op output with a fixed random tensor so every output
/// coordinate influences the scalar.
fn contract(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let v = tape.value(y);
    let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), v.shape(), 1.0, v.dtype());
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type OpCase = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>);

fn op_cases() -> Vec<OpCase> {
    let mask: Vec<bool> = (0..8 * 4 * 4).map(|i| i % 4 != 3 || i % 7 == 0).collect();
    vec![
        ("matmul", vec![vec![8, 10], vec![10, 6]], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            contract(t, y, 1)
        })),
        ("batch_matmul", vec![vec![3, 4, 5], vec![3, 5, 6]], Box::new(|t, v| {
            let y = t.batch_matmul(v[0], v[1], false)?;
            contract(t, y, 2)
        })),
        ("batch_matmul_t", vec![vec![3, 4, 5], vec![3, 6, 5]], Box::new(|t, v| {
            let y = t.batch_matmul(v[0], v[1], true)?;
            contract(t, y, 3)
        })),
        ("transpose", vec![vec![10, 12]], Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            contract(t, y, 4)
        })),
        ("add_bias", vec![vec![30, 4], vec![4]], Box::new(|t, v| {
            let y = t.add_bias(v[0], v[1])?;
            contract(t, y, 5)
        })),
        ("gelu", vec![vec![120]], Box::new(|t, v| {
            let y = t.gelu(v[0])?;
            contract(t, y, 6)
        })),
        ("tanh", vec![vec![120]], Box::new(|t, v| {
            let y = t.tanh(v[0])?;
            contract(t, y, 7)
        })),
        ("layer_norm", vec![vec![16, 6], vec![6], vec![6]], Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
            contract(t, y, 8)
        })),
        ("softmax", vec![vec![8, 4, 4]], Box::new(move |t, v| {
            let y = t.softmax(v[0], Some(&mask))?;
            contract(t, y, 9)
        })),
        ("gather_rows", vec![vec![40, 3]], Box::new(|t, v| {
            let y = t.gather_rows(v[0], &[4, 0, 4, 2])?;
            contract(t, y, 10)
        })),
        ("permute", vec![vec![2, 3, 5, 4]], Box::new(|t, v| {
            let y = t.permute(v[0], &[0, 2, 1, 3])?;
            let y = t.reshape(y, &[10, 12])?;
            contract(t, y, 11)
        })),
        ("cross_entropy", vec![vec![25, 4]], Box::new(|t, v| {
            let (l, _) = t.cross_entropy(v[0], &[1, -1, 3, 0, -1].repeat(5))?;
            Ok(l)
        })),
        ("scale_add_mul", vec![vec![60], vec![60]], Box::new(|t, v| {
            let a = t.scale(v[0], -1.5)?;
            let b = t.add(a, v[1])?;
            let c = t.mul(b, v[0])?;
            contract(t, c, 12)
        })),
    ]
}

#[test]
fn every_op_gradient_matches_finite_differences_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for (name, shapes, f) in op_cases() {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| random_tensor(&mut rng, s, 1.0, DType::F64))
            .collect();
        let r = check(&inputs, &f, 1e-5, 1e-3, 200, 7);
        assert!(r.checked >= 100, "{name}: only {} coordinates", r.checked);
        assert!(r.worst < 1e-6, "{name}: worst relative error {} at {:?}", r.worst, r.worst_at);
    }
}

#[test]
fn every_op_gradient_matches_finite_differences_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for (name, shapes, f) in op_cases() {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| random_tensor(&mut rng, s, 1.0, DType::F32))
            .collect();
        let r = check(&inputs, &f, 1e-2, 1e-1, 200, 8);
        assert!(r.worst < 1e-2, "{name}: worst relative error {} at {:?}", r.worst, r.worst_at);
    }
}

#[test]
fn random_three_layer_composition_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        random_tensor(&mut rng, &[4, 6], 1.0, DType::F64),
        random_tensor(&mut rng, &[6, 8], 0.5, DType::F64),
        random_tensor(&mut rng, &[8], 0.5, DType::F64),
        random_tensor(&mut rng, &[8, 8], 0.5, DType::F64),
        random_tensor(&mut rng, &[8, 3], 0.5, DType::F64),
    ];
    let f = |t: &mut Tape, v: &[Var]| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_bias(h, v[2])?;
        let h = t.gelu(h)?;
        let h = t.matmul(h, v[3])?;
        let h = t.tanh(h)?;
        let logits = t.matmul(h, v[4])?;
        let (l, _) = t.cross_entropy(logits, &[0, 2, 1, 2])?;
        Ok(l)
    };
    let r = check(&inputs, f, 1e-5, 1e-3, 200, 1);
    assert!(r.checked >= 100);
    assert!(r.worst < 1e-6, "worst {}", r.worst);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        row in proptest::collection::vec(-50.0f64..50.0, 1..12),
        shift in -500.0f64..500.0,
    ) {
        let k = row.len();
        let x = Tensor::new(vec![1, k], row.clone(), DType::F64).unwrap();
        let shifted = Tensor::new(vec![1, k], row.iter().map(|v| v + shift).collect(), DType::F64).unwrap();
        let a = softmax(&x).unwrap();
        let b = softmax(&shifted).unwrap();
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(a.max_abs_diff(&b) < 1e-7);
    }
}
