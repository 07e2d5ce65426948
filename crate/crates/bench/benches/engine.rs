use std::hint::black_box;

use cohar_bench::{baseline, batch, chain, random_tensor};
use cohar_core::engine::kernels::{conv1d_backward, conv1d_forward, ConvGeom};
use cohar_core::model::{chain_loss, predict_dense, ForwardCtx, LabelModel, Mode, UNetShape};
use cohar_core::{SeededRng, Tape};
use criterion::{criterion_group, criterion_main, Criterion};

fn conv(c: &mut Criterion) {
    let g = ConvGeom {
        batch: 16,
        c_in: 16,
        c_out: 16,
        t_in: 64,
        t_out: 64,
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    let x = random_tensor(&[16, 16, 64], 1);
    let w = random_tensor(&[16, 16, 3], 2);
    let b = vec![0.0; 16];
    let dy = random_tensor(&[16, 16, 64], 3);
    c.bench_function("conv1d_forward_16x16x64", |bench| {
        bench.iter(|| conv1d_forward(black_box(x.data()), black_box(w.data()), &b, &g))
    });
    c.bench_function("conv1d_backward_16x16x64", |bench| {
        bench.iter(|| conv1d_backward(black_box(x.data()), black_box(w.data()), black_box(dy.data()), &g, true))
    });
}

fn models(c: &mut Criterion) {
    let shape = UNetShape::default();
    let (x, y) = batch(16);
    let m = chain(shape);
    let base = baseline(shape);
    c.bench_function("chain_predict_b16_t64", |bench| bench.iter(|| predict_dense(&m, black_box(&x)).unwrap()));
    c.bench_function("baseline_predict_b16_t64", |bench| {
        bench.iter(|| predict_dense(&base, black_box(&x)).unwrap())
    });
    c.bench_function("chain_forward_backward_b16_t64", |bench| {
        let mut rng = SeededRng::new(0);
        bench.iter(|| {
            let mut tape = Tape::new();
            let params = m.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let mut ctx = ForwardCtx {
                mode: Mode::Train,
                tau: 1.0,
                rng: Some(&mut rng),
                targets: None,
            };
            let logits = m.forward(&mut tape, xv, &params, &mut ctx).unwrap();
            let loss = chain_loss(&mut tape, &logits, &y).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, models
}
criterion_main!(benches);
