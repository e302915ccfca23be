use std::collections::BTreeSet;

use embedit::encoder::{encode_traced, EncoderWeights};
use embedit::fixtures;
use embedit::gradcheck::{finite_difference_grad, max_relative_error};
use embedit::ops;
use embedit::tape::{NodeId, Tape};
use embedit::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

type Build = dyn Fn(&mut Tape, NodeId) -> NodeId;

/// Compares ⟨ḡ, J·v⟩ by central differences with ⟨Jᵀ·ḡ, v⟩ from the tape.
fn vjp_relative_error(build: &Build, x: &Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let xn = tape.param(x.clone());
    let y = build(&mut tape, xn);
    let y_shape = tape.value(y).unwrap().shape().to_vec();
    let cot = random_tensor(rng, y_shape, 1.0);
    let c = tape.leaf(cot.clone());
    let prod = tape.mul(y, c).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let jt_g = grads.get(xn).unwrap();

    let v = random_tensor(rng, x.shape().to_vec(), 1.0);
    let eval = |t: f64| {
        let shifted: Vec<f64> = x.data().iter().zip(v.data()).map(|(a, b)| a + t * b).collect();
        let mut tape = Tape::new();
        let xn = tape.leaf(Tensor::new(x.shape().to_vec(), shifted).unwrap());
        let y = build(&mut tape, xn);
        tape.value(y).unwrap().dot(&cot)
    };
    let h = 1e-5;
    let fd = (eval(h) - eval(-h)) / (2.0 * h);
    let an = jt_g.dot(&v);
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn check_primitive(name: &str, trials: usize, make: impl Fn(&mut ChaCha8Rng) -> (Tensor, Box<Build>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (x, build) = make(&mut rng);
        worst = worst.max(vjp_relative_error(&*build, &x, &mut rng));
    }
    assert!(worst < 1e-6, "{name}: worst relative VJP error {worst:e}");
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5))
}

#[test]
fn matmul_vjp_both_operands() {
    check_primitive("matmul lhs", 100, |rng| {
        let (m, k, n) = dims(rng);
        let b = random_tensor(rng, vec![k, n], 1.0);
        (
            random_tensor(rng, vec![m, k], 1.0),
            Box::new(move |t: &mut Tape, x| {
                let b = t.leaf(b.clone());
                t.matmul(x, b).unwrap()
            }),
        )
    });
    check_primitive("matmul rhs", 100, |rng| {
        let (m, k, n) = dims(rng);
        let a = random_tensor(rng, vec![m, k], 1.0);
        (
            random_tensor(rng, vec![k, n], 1.0),
            Box::new(move |t: &mut Tape, x| {
                let a = t.leaf(a.clone());
                t.matmul(a, x).unwrap()
            }),
        )
    });
}

#[test]
fn layer_norm_vjp_all_inputs() {
    // Width 2 is excluded: there the normalized output is ±1 almost everywhere
    // and the directional derivative is an eps-sized residue that finite
    // differences cannot resolve.
    check_primitive("layer_norm x", 100, |rng| {
        let (m, _, _) = dims(rng);
        let d = rng.random_range(3..7);
        let g = random_tensor(rng, vec![d], 1.5);
        let b = random_tensor(rng, vec![d], 1.0);
        (
            random_tensor(rng, vec![m, d], 2.0),
            Box::new(move |t: &mut Tape, x| {
                let g = t.leaf(g.clone());
                let b = t.leaf(b.clone());
                t.layer_norm(x, g, b, 1e-5).unwrap()
            }),
        )
    });
    check_primitive("layer_norm gamma", 100, |rng| {
        let d = rng.random_range(3..7);
        let x = random_tensor(rng, vec![3, d], 2.0);
        let b = random_tensor(rng, vec![d], 1.0);
        (
            random_tensor(rng, vec![d], 1.5),
            Box::new(move |t: &mut Tape, g| {
                let x = t.leaf(x.clone());
                let b = t.leaf(b.clone());
                t.layer_norm(x, g, b, 1e-5).unwrap()
            }),
        )
    });
    check_primitive("layer_norm beta", 100, |rng| {
        let d = rng.random_range(3..7);
        let x = random_tensor(rng, vec![3, d], 2.0);
        let g = random_tensor(rng, vec![d], 1.5);
        (
            random_tensor(rng, vec![d], 1.0),
            Box::new(move |t: &mut Tape, b| {
                let x = t.leaf(x.clone());
                let g = t.leaf(g.clone());
                t.layer_norm(x, g, b, 1e-5).unwrap()
            }),
        )
    });
}

#[test]
fn softmax_and_gelu_vjp() {
    check_primitive("softmax", 100, |rng| {
        let (m, n, _) = dims(rng);
        (
            random_tensor(rng, vec![m, n], 3.0),
            Box::new(|t: &mut Tape, x| t.softmax_rows(x).unwrap()),
        )
    });
    check_primitive("gelu", 100, |rng| {
        let (m, n, _) = dims(rng);
        (
            random_tensor(rng, vec![m, n], 4.0),
            Box::new(|t: &mut Tape, x| t.gelu(x).unwrap()),
        )
    });
}

#[test]
fn structural_ops_vjp() {
    check_primitive("transpose", 100, |rng| {
        let (m, n, _) = dims(rng);
        (random_tensor(rng, vec![m, n], 1.0), Box::new(|t: &mut Tape, x| t.transpose(x).unwrap()))
    });
    check_primitive("add_row", 100, |rng| {
        let (m, n, _) = dims(rng);
        let a = random_tensor(rng, vec![m, n], 1.0);
        (
            random_tensor(rng, vec![n], 1.0),
            Box::new(move |t: &mut Tape, b| {
                let a = t.leaf(a.clone());
                t.add_row(a, b).unwrap()
            }),
        )
    });
    check_primitive("slice/concat", 100, |rng| {
        let m = rng.random_range(1..4);
        let n = rng.random_range(2..7);
        let cut = rng.random_range(1..n);
        (
            random_tensor(rng, vec![m, n], 1.0),
            Box::new(move |t: &mut Tape, x| {
                let l = t.slice_cols(x, 0, cut).unwrap();
                let r = t.slice_cols(x, cut, n - cut).unwrap();
                let swapped = t.concat_cols(&[r, l]).unwrap();
                let sq = t.mul(swapped, swapped).unwrap();
                t.scale(sq, 0.5).unwrap()
            }),
        )
    });
    check_primitive("stack/sub/mse", 100, |rng| {
        let d = rng.random_range(1..6);
        let other = random_tensor(rng, vec![d], 1.0);
        let target = random_tensor(rng, vec![3, d], 1.0);
        (
            random_tensor(rng, vec![d], 1.0),
            Box::new(move |t: &mut Tape, x| {
                let o = t.leaf(other.clone());
                let m = t.stack_rows(&[x, o, x]).unwrap();
                let s = t.sub(m, m).unwrap();
                let m2 = t.add(m, s).unwrap();
                let loss = t.mse_const(m2, &target, 2).unwrap();
                let sum = t.sum_all(m2).unwrap();
                t.add(loss, sum).unwrap()
            }),
        )
    });
}

#[test]
fn encoder_loss_gradient_matches_finite_differences() {
    let enc = fixtures::tiny_encoder(42);
    let src = enc.tokenize("a photo of a bear").unwrap();
    let dst = enc.tokenize("a photo of a polar bear").unwrap();
    let target = embedit::encoder::encode(&dst, &enc.weights, &enc.config).unwrap();
    let bear = enc.vocab.id("bear").unwrap();
    let a = enc.vocab.id("a").unwrap();

    for id in [bear, a] {
        let ids: BTreeSet<u32> = [id].into();
        let mut tape = Tape::new();
        let traced = encode_traced(&mut tape, &src, &enc.weights, &enc.config, &ids).unwrap();
        let loss = tape.mse_const(traced.output, &target.sequence, 8).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(traced.row_leaves[&id]).unwrap().clone();

        let row = Tensor::vector(enc.weights.wte_row(id).unwrap().to_vec()).unwrap();
        let f = |r: &Tensor| {
            let mut w: EncoderWeights = enc.weights.clone();
            w.set_wte_row(id, r.data()).unwrap();
            let h = embedit::encoder::encode(&src, &w, &enc.config).unwrap();
            embedit::editor::mse_hidden(&h, &target, embedit::editor::LossPositions::FullSequence).unwrap()
        };
        let numeric = finite_difference_grad(f, &row, 1e-5).unwrap();
        let err = max_relative_error(&analytic, &numeric, 1e-12);
        assert!(err < 1e-5, "token {id}: relative error {err:e}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 1..9), 1..5)) {
        let n = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(n, 0.0); r }).collect();
        let y = ops::softmax_rows(&Tensor::from_rows(&rows).unwrap());
        for r in 0..y.rows() {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(x in proptest::collection::vec(-100.0f64..100.0, 2..12)) {
        let d = x.len();
        let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let y = ops::layer_norm(
            &Tensor::vector(x).unwrap(),
            &Tensor::filled(vec![d], 1.0),
            &Tensor::zeros(vec![d]),
            0.0,
        ).unwrap();
        let mean = y.data().iter().sum::<f64>() / d as f64;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        prop_assert!(mean.abs() <= 1e-10);
        prop_assert!((var - 1.0).abs() <= 1e-8);
    }
}
