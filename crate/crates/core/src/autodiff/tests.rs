use super::*;
use crate::error::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so relu kinks never sit inside a FD stencil.
fn rand_away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check<F>(f: F, inputs: &[Tensor<f64>])
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let report = grad_check(f, inputs, STEP, TOL).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn matmul_by_identity() {
    let tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = tape.constant(Tensor::eye(2));
    assert_eq!(a.matmul(&i).unwrap().tensor().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn sin_of_zeros() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([3]));
    assert_eq!(x.sin().unwrap().tensor().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn grouped_conv_zero_kernel_gives_zero_same_shape() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(rand_tensor(&[5, 6, 8], 1).cast());
    let w = tape.constant(Tensor::zeros([3, 3, 2, 8]));
    let y = x.conv2d(&w, ConvSpec::same(3, 4, PadMode::Zero)).unwrap();
    assert_eq!(y.shape(), vec![5, 6, 8]);
    assert!(y.tensor().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_sum_of_squares() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
    let loss = x.mul(&x).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_sin_at_zero() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let loss = x.sin().unwrap();
    assert_eq!(tape.backward(loss).unwrap().wrt(x).item(), 1.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros([2]));
    let err = tape.backward(x.sin().unwrap()).err().unwrap();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn backward_rejects_empty_tape() {
    let tape = Tape::<f64>::new();
    let other = Tape::<f64>::new();
    let x = other.leaf(Tensor::scalar(1.0));
    assert!(tape.backward(x).is_err());
}

#[test]
fn shape_errors_name_the_op() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros([2, 3]));
    let b = tape.leaf(Tensor::zeros([2, 3]));
    let err = a.matmul(&b).err().unwrap();
    assert!(err.to_string().contains("matmul") && err.to_string().contains("[2, 3]"), "{err}");
    let c = tape.leaf(Tensor::zeros([4]));
    assert!(a.add(&c).is_err());
    let x = tape.leaf(Tensor::zeros([4, 4, 6]));
    let w = tape.leaf(Tensor::zeros([3, 3, 2, 6]));
    let err = x.conv2d(&w, ConvSpec::same(3, 4, PadMode::Zero)).err().unwrap();
    assert!(err.to_string().contains("conv2d"), "{err}");
}

#[test]
fn non_finite_output_is_an_error() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full([2], 100.0));
    let err = x.exp().err().unwrap();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn constant_function_has_zero_gradients() {
    let report = grad_check(
        |t, _| Ok(t.constant(Tensor::scalar(3.0))),
        &[rand_tensor(&[3], 2)],
        STEP,
        TOL,
    );
    // loss does not depend on the leaf: backward over a constant is still fine
    let report = report.unwrap();
    assert!(report.passed());
    assert_eq!(report.max_rel_err(), 0.0);
}

#[test]
fn gradients_of_elementwise_primitives() {
    let x = rand_away_from_zero(&[3, 4], 3);
    check(|_, v| v[0].sin()?.sum(), &[x.clone()]);
    check(|_, v| v[0].exp()?.sum(), &[x.clone()]);
    check(|_, v| v[0].tanh()?.sum(), &[x.clone()]);
    check(|_, v| v[0].sigmoid()?.sum(), &[x.clone()]);
    check(|_, v| v[0].relu()?.square()?.sum(), &[x.clone()]);
    check(|_, v| v[0].recip()?.sum(), &[x.clone()]);
    check(|_, v| v[0].scale(-2.5)?.add_scalar(1.0)?.square()?.mean(), &[x]);
}

#[test]
fn gradients_of_broadcast_binary_ops() {
    let a = rand_tensor(&[3, 4], 4);
    let row = rand_tensor(&[4], 5);
    let col = rand_tensor(&[3, 1], 6);
    check(|_, v| v[0].add(&v[1])?.square()?.sum(), &[a.clone(), row.clone()]);
    check(|_, v| v[0].sub(&v[1])?.square()?.sum(), &[a.clone(), col.clone()]);
    check(|_, v| v[0].mul(&v[1])?.sin()?.sum(), &[a.clone(), col]);
    check(|_, v| v[1].mul(&v[0])?.sin()?.sum(), &[a.clone(), row]);
    check(|_, v| v[0].mul(&v[0])?.sum(), &[a]);
}

#[test]
fn gradients_of_matmul_and_transpose() {
    let a = rand_tensor(&[3, 5], 7);
    let b = rand_tensor(&[5, 2], 8);
    check(|_, v| v[0].matmul(&v[1])?.tanh()?.sum(), &[a.clone(), b]);
    check(|_, v| v[0].transpose()?.matmul(&v[0])?.sin()?.sum(), &[a]);
}

#[test]
fn layer_norm_then_sum_squares() {
    // sum(LN(x)) alone is identically 0; weight it to get a useful check
    let x = rand_tensor(&[4, 4], 9);
    let w = rand_tensor(&[4], 10);
    check(|t, v| v[0].layer_norm()?.mul(&t.constant(w.clone()))?.sin()?.sum(), &[x.clone()]);
    check(|_, v| v[0].layer_norm()?.sum(), &[x]);
}

#[test]
fn layer_norm_rows_are_standardized() {
    let tape = Tape::<f64>::new();
    let y = tape.leaf(rand_tensor(&[3, 8], 11)).layer_norm().unwrap().tensor();
    for r in 0..3 {
        let row = y.row(r);
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn gradients_of_convolutions() {
    for mode in [PadMode::Zero, PadMode::Circular] {
        let x = rand_tensor(&[4, 6, 4], 12);
        let w = rand_tensor(&[3, 3, 2, 4], 13);
        let spec = ConvSpec::same(3, 2, mode);
        check(move |_, v| v[0].conv2d(&v[1], spec)?.sin()?.sum(), &[x.clone(), w]);

        let w2 = rand_tensor(&[3, 3, 4, 3], 14);
        let strided = ConvSpec { stride: 2, padding: 1, groups: 1, pad_mode: mode };
        check(move |_, v| v[0].conv2d(&v[1], strided)?.sin()?.sum(), &[x.clone(), w2]);

        let wt = rand_tensor(&[4, 4, 4, 3], 15);
        let up = ConvSpec { stride: 2, padding: 1, groups: 1, pad_mode: mode };
        check(move |_, v| v[0].conv_transpose2d(&v[1], up)?.sin()?.sum(), &[x, wt]);
    }
}

#[test]
fn transposed_conv_stack_gradient() {
    // decoder-shaped stack: transposed conv, bias, tanh
    let x = rand_tensor(&[2, 3, 4], 16);
    let w = rand_tensor(&[4, 4, 4, 4], 17);
    let b = rand_tensor(&[4], 18);
    let spec = ConvSpec { stride: 2, padding: 1, groups: 1, pad_mode: PadMode::Circular };
    let report = grad_check(
        move |_, v| v[0].conv_transpose2d(&v[1], spec)?.add(&v[2])?.tanh()?.sum(),
        &[x, w, b],
        STEP,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn stride_two_round_trip_restores_extents() {
    let tape = Tape::<f32>::new();
    for mode in [PadMode::Zero, PadMode::Circular] {
        for (h, w) in [(8, 8), (6, 10), (32, 16)] {
            let x = tape.constant(Tensor::zeros([h, w, 3]));
            let down = ConvSpec { stride: 2, padding: 1, groups: 1, pad_mode: mode };
            let e = x.conv2d(&tape.constant(Tensor::zeros([3, 3, 3, 5])), down).unwrap();
            assert_eq!(e.shape(), vec![h / 2, w / 2, 5]);
            let d = e.conv_transpose2d(&tape.constant(Tensor::zeros([4, 4, 5, 3])), down).unwrap();
            assert_eq!(d.shape(), vec![h, w, 3]);
        }
    }
}

#[test]
fn circular_conv_commutes_with_cyclic_shift() {
    let tape = Tape::<f64>::new();
    let (h, w, c) = (6, 5, 2);
    let x = rand_tensor(&[h, w, c], 19);
    let shifted = Tensor::from_fn([h, w, c], |i| {
        let (r, rest) = (i / (w * c), i % (w * c));
        x.data()[((r + h - 1) % h) * w * c + rest]
    });
    let k = tape.constant(rand_tensor(&[3, 3, c, c], 20));
    let spec = ConvSpec::same(3, 1, PadMode::Circular);
    let y = tape.constant(x).conv2d(&k, spec).unwrap().tensor();
    let ys = tape.constant(shifted).conv2d(&k, spec).unwrap().tensor();
    for r in 0..h {
        for j in 0..w * c {
            assert_eq!(ys.data()[r * w * c + j], y.data()[((r + h - 1) % h) * w * c + j]);
        }
    }
}

#[test]
fn gradients_of_reductions_concat_cosine_mix() {
    let a = rand_tensor(&[3, 4], 21);
    let b = rand_tensor(&[3, 2], 22);
    check(|_, v| v[0].sum_axis(1)?.square()?.sum(), &[a.clone()]);
    check(|_, v| v[0].sum_axis(0)?.square()?.sum(), &[a.clone()]);
    check(|_, v| Var::concat(&[v[0], v[1]], 1)?.sin()?.sum(), &[a.clone(), b]);
    let c = rand_tensor(&[3, 4], 23);
    check(|_, v| v[0].cosine_similarity(&v[1])?.square()?.sum(), &[a.clone(), c]);
    let mix = Arc::new(
        RowMix::from_rows(3, &[vec![(0, 0.5), (2, 0.5)], vec![], vec![(1, 1.0), (1, -2.0)], vec![(2, 1.0)]])
            .unwrap(),
    );
    check(move |_, v| v[0].mix_rows(&mix)?.sin()?.sum(), &[a]);
}

#[test]
fn cosine_similarity_zero_norm_is_zero() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::new([2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
    let b = tape.leaf(Tensor::new([2, 2], vec![1.0, 1.0, 1.0, 0.0]).unwrap());
    let s = a.cosine_similarity(&b).unwrap();
    assert_eq!(s.tensor().data(), &[0.0, 1.0]);
    let g = tape.backward(s.sum().unwrap()).unwrap();
    assert!(g.wrt(a).is_finite());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let tape = Tape::<f32>::new();
        let x = tape.constant(rand_tensor(&[8, 8, 4], 24).cast());
        let w = tape.constant(rand_tensor(&[5, 5, 1, 4], 25).cast());
        x.conv2d(&w, ConvSpec::same(5, 4, PadMode::Circular))
            .and_then(|y| y.layer_norm())
            .unwrap()
            .tensor()
    };
    assert_eq!(crate::tensor::bits(&run()), crate::tensor::bits(&run()));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Gradient of sum(a + b) w.r.t. a broadcast row counts its repeats.
        #[test]
        fn broadcast_gradient_counts_repeats(rows in 1usize..6, cols in 1usize..6) {
            let tape = Tape::<f64>::new();
            let a = tape.leaf(Tensor::zeros([rows, cols]));
            let b = tape.leaf(Tensor::zeros([cols]));
            let g = tape.backward(a.add(&b).unwrap().sum().unwrap()).unwrap();
            prop_assert!(g.wrt(b).data().iter().all(|&v| v == rows as f64));
            prop_assert!(g.wrt(a).data().iter().all(|&v| v == 1.0));
        }

        /// matmul backward agrees with the explicit transpose products.
        #[test]
        fn matmul_gradient_identity(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
            let a = rand_tensor(&[m, k], seed);
            let b = rand_tensor(&[k, n], seed + 1);
            let tape = Tape::<f64>::new();
            let (va, vb) = (tape.leaf(a), tape.leaf(b.clone()));
            let g = tape.backward(va.matmul(&vb).unwrap().sum().unwrap()).unwrap();
            // d/dA sum(AB) = 1 · Bᵀ: row sums of B repeated on every row
            for i in 0..m {
                for p in 0..k {
                    let expect: f64 = b.row(p).iter().sum();
                    prop_assert!((g.wrt(va).data()[i * k + p] - expect).abs() < 1e-12);
                }
            }
        }
    }
}
