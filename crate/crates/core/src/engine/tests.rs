use super::*;
use crate::error::Error;
use proptest::prelude::*;

fn t3(b: usize, c: usize, t: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![b, c, t], data).unwrap()
}

fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Nested-loop convolution straight from the definition.
fn naive_conv1d(x: &Tensor, w: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
    let (bs, ci, t) = x.dims3().unwrap();
    let (co, _, k) = w.dims3().unwrap();
    let to = (t + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; bs * co * to];
    for b in 0..bs {
        for o in 0..co {
            for tp in 0..to {
                let mut acc = bias[o];
                for c in 0..ci {
                    for j in 0..k {
                        let pos = (tp * stride + j) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < t {
                            acc += x.at3(b, c, pos as usize) * w.at3(o, c, j);
                        }
                    }
                }
                y[(b * co + o) * to + tp] = acc;
            }
        }
    }
    t3(bs, co, to, y)
}

fn conv(x: Tensor, w: Tensor, b: Tensor, stride: usize, pad: usize) -> Tensor {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.conv1d(x, w, b, stride, pad).unwrap();
    tape.value(y).clone()
}

fn conv_t(x: Tensor, w: Tensor, b: Tensor, stride: usize) -> Tensor {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.conv_transpose1d(x, w, b, stride).unwrap();
    tape.value(y).clone()
}

/// Central-difference gradient of `f` at `inputs[which]`.
fn numeric_grad(inputs: &[Tensor], which: usize, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<f64> {
    let eps = 1e-5;
    let mut work = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|i| {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let up = f(&work);
            work[which].data_mut()[i] = orig - eps;
            let down = f(&work);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let scale = a.iter().chain(n).fold(1e-12_f64, |m, v| m.max(v.abs()));
    a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn conv1d_identity_kernel() {
    let y = conv(Tensor::signal(&[1.0, 2.0, 3.0]), Tensor::signal(&[1.0]), Tensor::scalar(0.0), 1, 0);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn conv1d_box_kernel_matches_naive() {
    let x = Tensor::signal(&[1.0, 2.0, 3.0, 4.0]);
    let w = Tensor::signal(&[1.0, 1.0]);
    let oracle = naive_conv1d(&x, &w, &[0.0], 1, 0);
    assert_eq!(oracle.data(), &[3.0, 5.0, 7.0]);
    assert_eq!(conv(x, w, Tensor::scalar(0.0), 1, 0).data(), oracle.data());
}

#[test]
fn conv1d_same_padding_shape() {
    let mut rng = SeededRng::new(3);
    let y = conv(random(&mut rng, &[2, 3, 16]), random(&mut rng, &[8, 3, 3]), Tensor::zeros(&[8]), 1, 1);
    assert_eq!(y.shape(), &[2, 8, 16]);
}

#[test]
fn conv1d_padding_wider_than_input() {
    // k=5 on a single sample: taps 0 and 4 never touch the input
    let mut rng = SeededRng::new(9);
    let x = random(&mut rng, &[2, 2, 1]);
    let w = random(&mut rng, &[3, 2, 5]);
    let bias = random(&mut rng, &[3]);
    let got = conv(x.clone(), w.clone(), bias.clone(), 1, 2);
    assert_eq!(got.data(), naive_conv1d(&x, &w, bias.data(), 1, 2).data());

    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(bias.clone()));
    let y = tape.conv1d(xv, wv, bv, 1, 2).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    let f = |inp: &[Tensor]| naive_conv1d(&inp[0], &inp[1], inp[2].data(), 1, 2).data().iter().sum::<f64>();
    let inputs = [x, w, bias];
    for (i, v) in [xv, wv, bv].into_iter().enumerate() {
        assert!(rel_err(&grads.wrt(v), &numeric_grad(&inputs, i, &f)) < 1e-8);
    }
}

#[test]
fn conv1d_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv1d(x, w, b, 1, 0), Err(Error::Dimension(_))));
    let w = tape.constant(Tensor::zeros(&[1, 2, 7]));
    assert!(matches!(tape.conv1d(x, w, b, 1, 1), Err(Error::Geometry(_))));
}

#[test]
fn conv_transpose_duplicates_for_box_kernel() {
    let (a, b) = (0.3, -1.7);
    let y = conv_t(Tensor::signal(&[a, b]), Tensor::signal(&[1.0, 1.0]), Tensor::scalar(0.0), 2);
    assert_eq!(y.data(), &[a, a, b, b]);
}

#[test]
fn conv_transpose_shape() {
    let mut rng = SeededRng::new(4);
    let y = conv_t(random(&mut rng, &[4, 32, 8]), random(&mut rng, &[32, 16, 2]), Tensor::zeros(&[16]), 2);
    assert_eq!(y.shape(), &[4, 16, 16]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = SeededRng::new(5);
    let x = random(&mut rng, &[1, 1, 8]);
    let y = random(&mut rng, &[1, 1, 4]);
    let w = random(&mut rng, &[1, 1, 2]);
    let lhs = conv(x.clone(), w.clone(), Tensor::zeros(&[1]), 2, 0).dot(&y);
    let rhs = x.dot(&conv_t(y, w, Tensor::zeros(&[1]), 2));
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::signal(&[1.0, 3.0, 2.0, 2.0]));
    let y = tape.maxpool1d(x, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 2.0]);

    let x = tape.leaf(Tensor::signal(&[5.0, 5.0]));
    let y = tape.maxpool1d(x, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0]);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x), vec![1.0, 0.0]);

    let z = tape.constant(Tensor::zeros(&[2, 4, 16]));
    let p = tape.maxpool1d(z, 2).unwrap();
    assert_eq!(tape.value(p).shape(), &[2, 4, 8]);

    let odd = tape.constant(Tensor::zeros(&[1, 1, 5]));
    assert!(matches!(tape.maxpool1d(odd, 2), Err(Error::Geometry(_))));
}

#[test]
fn embedding_examples() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![2, 1], vec![0.5, -0.5]).unwrap());
    let oh = tape.constant(t3(1, 2, 3, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]));
    let e = tape.embedding(w, oh).unwrap();
    assert_eq!(tape.value(e).data(), &[0.5, 0.5, 0.5]);

    let bad = tape.constant(Tensor::zeros(&[1, 3, 2]));
    assert!(matches!(tape.embedding(w, bad), Err(Error::Dimension(_))));

    let w9 = tape.leaf(Tensor::zeros(&[9, 4]));
    let oh9 = tape.constant(Tensor::zeros(&[2, 9, 64]));
    let e9 = tape.embedding(w9, oh9).unwrap();
    assert_eq!(tape.value(e9).shape(), &[2, 4, 64]);
}

#[test]
fn embedding_matches_row_gather() {
    let mut rng = SeededRng::new(6);
    let (b, c, e, t) = (3, 5, 2, 7);
    let table = random(&mut rng, &[c, e]);
    let ids: Vec<usize> = (0..b * t).map(|_| rng.below(c)).collect();
    let onehot = t3(b, c, t, kernels::one_hot_columns(&ids, b, c, t));
    let mut tape = Tape::new();
    let (wv, ov) = (tape.constant(table.clone()), tape.constant(onehot));
    let out = tape.embedding(wv, ov).unwrap();
    let out = tape.value(out);
    for bb in 0..b {
        for tt in 0..t {
            for ee in 0..e {
                assert_eq!(out.at3(bb, ee, tt), table.data()[ids[bb * t + tt] * e + ee]);
            }
        }
    }
}

fn ce(logits: Tensor, targets: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let loss = tape.cross_entropy(l, targets).unwrap();
    tape.value(loss).item()
}

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::zeros(&[2, 4, 3]);
    assert!((ce(uniform, &[0, 1, 2, 3, 0, 1]) - 4f64.ln()).abs() < 1e-12);

    let mut sat = Tensor::zeros(&[1, 3, 2]);
    sat.data_mut()[2 * 2] = 1000.0;
    sat.data_mut()[2 * 2 + 1] = 1000.0;
    assert!(ce(sat, &[2, 2]) < 1e-9);

    let two = t3(1, 2, 1, vec![1.0, 2.0]);
    // -ln(e² / (e + e²)) = ln(1 + e⁻¹)
    let oracle = (1.0 + (-1.0f64).exp()).ln();
    assert!((ce(two.clone(), &[1]) - oracle).abs() < 1e-12);
    assert!((ce(two, &[1]) - 0.313262).abs() < 1e-6);
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(matches!(tape.cross_entropy(l, &[0, 2]), Err(Error::Label(_))));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3, 4]));
    let s = tape.sum(x);
    assert_eq!(tape.backward(s).unwrap().wrt(x), vec![1.0; 24]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn unused_parameter_has_zero_grad() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::signal(&[1.0, 2.0]));
    let unused = tape.leaf(Tensor::signal(&[3.0, 4.0]));
    let s = tape.sum(a);
    let g = tape.backward(s).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(unused), vec![0.0, 0.0]);
}

#[test]
fn tape_records_are_topological() {
    let mut rng = SeededRng::new(8);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[1, 2, 8]));
    let w = tape.leaf(random(&mut rng, &[3, 2, 3]));
    let b = tape.leaf(Tensor::zeros(&[3]));
    let y = tape.conv1d(x, w, b, 1, 1).unwrap();
    let r = tape.relu(y);
    let p = tape.maxpool1d(r, 2).unwrap();
    let s = tape.sum(p);
    for i in 0..=s.index() {
        let v = *[x, w, b, y, r, p, s].iter().find(|v| v.index() == i).unwrap();
        assert!(tape.inputs(v).iter().all(|inp| inp.index() < i));
    }
}

#[test]
fn cross_entropy_through_conv_matches_finite_differences() {
    let mut rng = SeededRng::new(9);
    let x = random(&mut rng, &[2, 3, 8]);
    let w = random(&mut rng, &[4, 3, 3]);
    let b = random(&mut rng, &[4]);
    let targets: Vec<usize> = (0..16).map(|_| rng.below(4)).collect();
    let loss = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let (x, w, b) = (tape.leaf(ts[0].clone()), tape.leaf(ts[1].clone()), tape.leaf(ts[2].clone()));
        let y = tape.conv1d(x, w, b, 1, 1).unwrap();
        let l = tape.cross_entropy(y, &targets).unwrap();
        (tape, [x, w, b], l)
    };
    let inputs = [x, w, b];
    let (tape, vars, l) = loss(&inputs);
    let grads = tape.backward(l).unwrap();
    let f = |ts: &[Tensor]| {
        let (tape, _, l) = loss(ts);
        tape.value(l).item()
    };
    for (i, v) in vars.iter().enumerate() {
        let err = rel_err(&grads.wrt(*v), &numeric_grad(&inputs, i, &f));
        assert!(err < 1e-5, "input {i}: {err}");
    }
}

#[test]
fn gumbel_sampler_determinism() {
    let a = gumbel_sample(&mut SeededRng::new(1), &[2, 3, 4]);
    let b = gumbel_sample(&mut SeededRng::new(1), &[2, 3, 4]);
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjointness_random_shapes(
        seed in any::<u64>(), b in 1usize..3, ci in 1usize..4, co in 1usize..4,
        t in 1usize..9, k in 1usize..4,
    ) {
        let mut rng = SeededRng::new(seed);
        let x = random(&mut rng, &[b, ci, t * k]);
        let w = random(&mut rng, &[co, ci, k]);
        let y = random(&mut rng, &[b, co, t]);
        let lhs = conv(x.clone(), w.clone(), Tensor::zeros(&[co]), k, 0).dot(&y);
        let rhs = x.dot(&conv_t(y, w, Tensor::zeros(&[ci]), k));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv1d_matches_naive(
        seed in any::<u64>(), b in 1usize..3, ci in 1usize..4, co in 1usize..4,
        t in 1usize..12, k in 1usize..6, stride in 1usize..4, pad in 0usize..5,
    ) {
        prop_assume!(k <= t + 2 * pad);
        let mut rng = SeededRng::new(seed);
        let x = random(&mut rng, &[b, ci, t]);
        let w = random(&mut rng, &[co, ci, k]);
        let bias = random(&mut rng, &[co]);
        let got = conv(x.clone(), w.clone(), bias.clone(), stride, pad);
        let want = naive_conv1d(&x, &w, bias.data(), stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        for (g, w) in got.data().iter().zip(want.data()) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_gradients_match_finite_differences(
        seed in any::<u64>(), ci in 1usize..4, co in 1usize..4, t in 2usize..9,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
    ) {
        prop_assume!(k <= t + 2 * pad);
        let mut rng = SeededRng::new(seed);
        let inputs = [random(&mut rng, &[2, ci, t]), random(&mut rng, &[co, ci, k]), random(&mut rng, &[co])];
        let to = (t + 2 * pad - k) / stride + 1;
        let weights = random(&mut rng, &[2, co, to]);
        let build = |ts: &[Tensor]| {
            let mut tape = Tape::new();
            let vars = [tape.leaf(ts[0].clone()), tape.leaf(ts[1].clone()), tape.leaf(ts[2].clone())];
            let y = tape.conv1d(vars[0], vars[1], vars[2], stride, pad).unwrap();
            let wv = tape.constant(weights.clone());
            let m = tape.mul(y, wv).unwrap();
            let l = tape.sum(m);
            (tape, vars, l)
        };
        let (tape, vars, l) = build(&inputs);
        let grads = tape.backward(l).unwrap();
        let f = |ts: &[Tensor]| { let (tape, _, l) = build(ts); tape.value(l).item() };
        for (i, v) in vars.iter().enumerate() {
            prop_assert!(rel_err(&grads.wrt(*v), &numeric_grad(&inputs, i, &f)) < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_shift_invariant(seed in any::<u64>(), c in 2usize..10, t in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let logits = random(&mut rng, &[2, c, t]);
        let targets: Vec<usize> = (0..2 * t).map(|_| rng.below(c)).collect();
        let mut shifted = logits.clone();
        for b in 0..2 {
            for tt in 0..t {
                let shift = rng.uniform(-50.0, 50.0);
                for cc in 0..c {
                    shifted.data_mut()[(b * c + cc) * t + tt] += shift;
                }
            }
        }
        prop_assert!((ce(logits, &targets) - ce(shifted, &targets)).abs() < 1e-12);
    }
}
