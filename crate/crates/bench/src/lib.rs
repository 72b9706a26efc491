//! Shared fixtures for the benchmarks.

use rand::Rng;
use usseg::seed::{stream, tag};
use usseg::tensor::Tensor;
use usseg::ussim::{make_phantom, simulate_sweep, SimParams, TARGET_FRACTIONS};
use usseg::volume::{compute_mask, standardize};
use usseg::{LabelMap, Mask, Volume};

pub fn random_tensor(shape: [usize; 5], seed: u64) -> Tensor<f32> {
    let mut rng = stream(seed, &[0]);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = stream(seed, &[1]);
    (0..n).map(|_| rng.random_range(-0.1..0.1)).collect()
}

/// Standardized simulated sweep of a phantom, with its labels and mask.
pub fn phantom_case(side: usize, seed: u64) -> (Volume, LabelMap, Mask) {
    let lm = make_phantom(&mut stream(seed, &[tag::PHANTOM]), [side; 3], TARGET_FRACTIONS).unwrap();
    let raw = simulate_sweep(&lm, &SimParams::default(), seed).unwrap();
    let mask = compute_mask(&raw);
    let vol = standardize(&raw, &mask).unwrap();
    (vol, lm, mask)
}
