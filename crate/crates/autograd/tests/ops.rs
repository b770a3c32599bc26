use paragan_autograd::{check_gradient, check_gradient_probes, max_error, Probe, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn all_probes(inputs: &[Tensor]) -> Vec<Probe> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |c| (i, c)))
        .collect()
}

#[test]
fn matmul_example() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), vec![2, 1]);
    assert_eq!(c.to_vec(), vec![3.0, 7.0]);
}

#[test]
fn softmax_and_sigmoid_examples() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::row(vec![0.0, 0.0]));
    assert_eq!(z.softmax().unwrap().to_vec(), vec![0.5, 0.5]);
    let s = tape.constant(Tensor::scalar(0.0)).sigmoid().unwrap();
    assert_eq!(s.item(), 0.5);
}

#[test]
fn shape_errors_name_the_op() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(&b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(a.add(&c), Err(TensorError::ShapeMismatch { op: "add", .. })));
    assert!(matches!(
        Var::concat(&[a, tape.constant(Tensor::zeros(&[3, 1]))]),
        Err(TensorError::ShapeMismatch { op: "concat", .. })
    ));
}

#[test]
fn log_of_non_positive_is_a_domain_error() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::row(vec![1.0, 0.0]));
    assert!(matches!(x.log(), Err(TensorError::Domain { op: "log", .. })));
    let y = tape.constant(Tensor::row(vec![-2.0]));
    assert!(matches!(y.log(), Err(TensorError::Domain { .. })));
}

#[test]
fn overflow_is_reported_as_non_finite() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1000.0));
    assert!(matches!(x.exp(), Err(TensorError::NonFinite { op: "exp" })));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let loss = x.mul(&x).unwrap().sum().unwrap();
    assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[6.0]);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let loss = x.sigmoid().unwrap();
    assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[0.25]);
}

#[test]
fn log_softmax_cross_entropy_gradient() {
    // d/dz log softmax(z)[k] = onehot(k) - softmax(z); descending the negative gives softmax - onehot.
    let z0 = Tensor::row(vec![1.0, 0.0, -1.0]);
    let tape = Tape::new();
    let z = tape.leaf(z0.clone());
    let nll = z.softmax().unwrap().log().unwrap().pick(0).unwrap().neg().unwrap();
    let g = tape.backward(nll).unwrap().wrt(z);

    let e: Vec<f64> = z0.data().iter().map(|v| v.exp()).collect();
    let total: f64 = e.iter().sum();
    let expected = [e[0] / total - 1.0, e[1] / total, e[2] / total];
    for (a, b) in g.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    // Finite differences agree with the analytic form.
    let err = check_gradient(|_, z| z.softmax()?.log()?.pick(0)?.neg(), &z0, 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
    let y = x.tanh().unwrap();
    assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn unused_leaf_gets_exact_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(vec![0.3, -0.2]));
    let unused = tape.leaf(Tensor::row(vec![5.0, 6.0, 7.0]));
    let loss = x.exp().unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(!g.has(unused));
    assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn gradients_accumulate_over_reuse() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(vec![2.0]));
    // loss = x*x + 3x -> 2x + 3 = 7
    let loss = x.mul(&x).unwrap().add(&x.scale(3.0).unwrap()).unwrap().sum().unwrap();
    assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[7.0]);
}

#[test]
fn vars_from_other_tapes_are_rejected() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.constant(Tensor::row(vec![1.0]));
    let b = t2.constant(Tensor::row(vec![1.0]));
    assert_eq!(a.add(&b).unwrap_err(), TensorError::ForeignVar);
}

#[test]
fn replaying_a_graph_is_bitwise_identical() {
    let build = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let a = tape.leaf(random(&[3, 4], &mut rng));
        let b = tape.leaf(random(&[2, 4], &mut rng));
        let loss = a
            .matmul_t(&b)
            .unwrap()
            .tanh()
            .unwrap()
            .softmax()
            .unwrap()
            .log()
            .unwrap()
            .sum()
            .unwrap();
        let g = tape.backward(loss).unwrap();
        (
            loss.item().to_bits(),
            g.wrt(a).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(build(7), build(7));
}

type Case = (
    &'static str,
    Vec<Vec<usize>>,
    for<'t> fn(&[Var<'t>]) -> paragan_autograd::Result<Var<'t>>,
);

fn reduce<'t>(v: Var<'t>, w: &Tensor) -> paragan_autograd::Result<Var<'t>> {
    // Weighted sum so every output coordinate carries a distinct upstream gradient.
    let wv = v.tape().constant(w.clone());
    v.mul(&wv)?.sum()
}

fn op_cases() -> Vec<Case> {
    vec![
        ("matmul", vec![vec![2, 3], vec![3, 4]], |v| v[0].matmul(&v[1])),
        ("matmul_t", vec![vec![2, 3], vec![4, 3]], |v| v[0].matmul_t(&v[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |v| v[0].add(&v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |v| v[0].sub(&v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |v| v[0].mul(&v[1])),
        ("add_row", vec![vec![3, 2], vec![2]], |v| v[0].add_row(&v[1])),
        ("scale", vec![vec![2, 3]], |v| v[0].scale(-1.7)),
        ("add_scalar", vec![vec![2, 3]], |v| v[0].add_scalar(0.4)),
        ("concat", vec![vec![2, 3], vec![2, 1], vec![2, 2]], |v| Var::concat(v)),
        ("row_mean", vec![vec![3, 4]], |v| v[0].row_mean()),
        ("sigmoid", vec![vec![2, 3]], |v| v[0].sigmoid()),
        ("tanh", vec![vec![2, 3]], |v| v[0].tanh()),
        ("exp", vec![vec![2, 3]], |v| v[0].exp()),
        ("log", vec![vec![2, 3]], |v| v[0].mul(&v[0])?.add_scalar(0.5)?.log()),
        ("softmax", vec![vec![2, 4]], |v| v[0].softmax()),
        ("log_softmax", vec![vec![2, 4]], |v| v[0].log_softmax()),
        ("embedding", vec![vec![5, 3]], |v| v[0].embedding(&[4, 0, 4, 2])),
        ("slice", vec![vec![2, 5]], |v| v[0].slice_cols(1, 3)),
        ("tile_rows", vec![vec![1, 3]], |v| v[0].tile_rows(4)),
        ("reshape", vec![vec![2, 3]], |v| v[0].reshape(vec![3, 2])),
        ("sum", vec![vec![2, 3]], |v| v[0].sum()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shapes, op) in op_cases() {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let out_shape = {
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
                op(&vars).unwrap().shape()
            };
            let weights = random(&out_shape, &mut rng);
            let results = check_gradient_probes(
                |_, v| reduce(op(v)?, &weights),
                &inputs,
                &all_probes(&inputs),
                1e-4,
            ).unwrap();
            let err = max_error(&results);
            prop_assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn softmax_rows_are_positive_and_normalized(rows in 1usize..4, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, cols], &mut rng).map(|v| v * 20.0);
        let tape = Tape::new();
        let y = tape.constant(x).softmax().unwrap().value();
        for r in 0..rows {
            let row = y.row_slice(r);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
