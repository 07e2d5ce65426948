//! Shared fixtures for the benchmarks.

use cohar_core::data::{generate_synthetic, stack_windows, window, Dataset, PadPolicy, SynthConfig, Window};
use cohar_core::model::{ChainConfig, ConditionalUNet, IndependentUNet, UNetShape};
use cohar_core::{SeededRng, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

pub fn dataset(num_sequences: usize) -> Dataset {
    generate_synthetic(&SynthConfig {
        num_sequences,
        ..SynthConfig::default()
    })
    .expect("default synth config")
}

/// One `[batch, 6, 64]` batch of synthetic windows with its targets.
pub fn batch(batch: usize) -> (Tensor, Vec<Vec<usize>>) {
    let ds = dataset(2);
    let windows = window(&ds, 64, 32, PadPolicy::Drop).expect("windows");
    let refs: Vec<&Window> = windows.iter().cycle().take(batch).collect();
    stack_windows(&refs).expect("batch")
}

pub fn chain(shape: UNetShape) -> ConditionalUNet {
    let ds = dataset(1);
    let mut cfg = ChainConfig::new(6, ds.labels);
    cfg.unet = shape;
    ConditionalUNet::build(cfg, &mut SeededRng::new(0)).expect("chain")
}

pub fn baseline(shape: UNetShape) -> IndependentUNet {
    let ds = dataset(1);
    IndependentUNet::build(6, ds.labels, shape, &mut SeededRng::new(0)).expect("baseline")
}
