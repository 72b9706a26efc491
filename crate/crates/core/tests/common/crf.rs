//! Mean-field oracles shared by the CRF tests and the acceptance suite.

use super::rng;
use rand::Rng;
use usseg::crf::*;
use usseg::{Geometry, ProbabilityMap, Volume};

pub fn random_pm(dims: [usize; 3], seed: u64) -> ProbabilityMap {
    let mut g = rng(seed);
    let n: usize = dims.iter().product();
    let mut probs = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let v: [f64; 3] = [g.random_range(0.01..1.0), g.random_range(0.01..1.0), g.random_range(0.01..1.0)];
        let s: f64 = v.iter().sum();
        probs.extend(v.iter().map(|x| (x / s) as f32));
    }
    ProbabilityMap::new(Geometry::unit(dims), probs).unwrap()
}

pub fn random_volume(dims: [usize; 3], seed: u64, scale: f32) -> Volume {
    let mut g = rng(seed);
    Volume::from_fn(Geometry::unit(dims), |_, _, _| g.random_range(-1.0..1.0f32) * scale).unwrap()
}

/// Straight-line mean field for two neighbouring voxels at unit distance.
pub fn two_voxel_trace(a: [f64; 3], b: [f64; 3], p: &CrfParams, da: f64) -> Vec<[[f64; 3]; 2]> {
    let ks = (-1.0 / (2.0 * p.theta_gamma * p.theta_gamma)).exp();
    let kb = (-1.0 / (2.0 * p.theta_alpha * p.theta_alpha) - da * da / (2.0 * p.theta_beta * p.theta_beta)).exp();
    let k = p.w_spatial * ks + p.w_bilateral * kb;
    let u = [a.map(|v| -v.ln()), b.map(|v| -v.ln())];
    let mut q = [a, b];
    let mut trace = Vec::new();
    for _ in 0..p.iterations {
        let mut next = [[0.0; 3]; 2];
        for i in 0..2 {
            let other = q[1 - i];
            let total: f64 = other.iter().map(|v| k * v).sum();
            let e: Vec<f64> = (0..3).map(|l| (-u[i][l] - (total - k * other[l])).exp()).collect();
            let s: f64 = e.iter().sum();
            for l in 0..3 {
                next[i][l] = e[l] / s;
            }
        }
        q = next;
        trace.push(q);
    }
    trace
}

pub fn two_voxel_hand_trace() {
    let a = [0.05, 0.9, 0.05];
    let b = [0.2, 0.25, 0.55];
    let p = CrfParams {
        w_spatial: 2.0,
        w_bilateral: 2.0,
        ..CrfParams::default()
    };
    let g = Geometry::unit([2, 1, 1]);
    let pm = ProbabilityMap::new(g.clone(), [a, b].iter().flatten().map(|&v| v as f32).collect()).unwrap();
    let vol = Volume::new(g, vec![0.3, 0.3]).unwrap();
    let expected = two_voxel_trace(a.map(|v| v as f32 as f64), b.map(|v| v as f32 as f64), &p, 0.0);

    for filtering in [Filtering::Exact, Filtering::Truncated] {
        let mut seen = Vec::new();
        let out = meanfield_with(&pm, &vol, &p, filtering, |it, q| seen.push((it, q.probs().to_vec()))).unwrap();
        assert_eq!(seen.len(), 5);
        for (it, probs) in &seen {
            let want = expected[*it];
            for v in 0..2 {
                for l in 0..3 {
                    assert!((probs[3 * v + l] as f64 - want[v][l]).abs() < 1e-6, "iteration {it}");
                }
            }
        }
        let labels = argmax_labels(&out);
        assert_eq!(labels.labels(), &[1, 1]);
    }
    // before refinement the second voxel prefers white matter
    assert_eq!(argmax_labels(&pm).labels(), &[1, 2]);
}

pub fn zero_weights_are_exact_identity() {
    let pm = random_pm([5, 4, 3], 1);
    let vol = random_volume([5, 4, 3], 2, 1.0);
    for iterations in [0, 1, 5, 12] {
        let p = CrfParams {
            w_spatial: 0.0,
            w_bilateral: 0.0,
            iterations,
            ..CrfParams::default()
        };
        assert_eq!(meanfield(&pm, &vol, &p).unwrap(), pm);
    }
}

pub fn max_diff(dims: [usize; 3], q: &[f64], vol: &Volume, k: Kernel) -> f64 {
    let e = gaussian_message(q, dims, vol.data(), k, Filtering::Exact).unwrap();
    let t = gaussian_message(q, dims, vol.data(), k, Filtering::Truncated).unwrap();
    e.iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn truncated_matches_exact_on_8_cubed() {
    let dims = [8, 8, 8];
    for seed in 0..5 {
        let vol = random_volume(dims, 3 + seed, 1.0);
        let mut g = rng(40 + seed);
        let q: Vec<f64> = (0..512).map(|_| g.random_range(0.0..1.0)).collect();
        for k in [Kernel::Spatial { theta: 3.0 }, Kernel::Bilateral { theta_pos: 5.0, theta_int: 0.1 }] {
            let diff = max_diff(dims, &q, &vol, k);
            assert!(diff <= 1e-3, "{k:?}: {diff}");
        }
    }
}

/// Runs the truncated mean field and returns the worst deviation of any
/// voxel's probabilities from summing to one, over all iterations, and whether
/// any probability went negative.
pub fn normalization_error(seed: u64, ws: f64, wb: f64) -> (f32, bool) {
    let dims = [5, 4, 6];
    let pm = random_pm(dims, seed);
    let vol = random_volume(dims, seed + 1, 1.0);
    let p = CrfParams {
        w_spatial: ws,
        w_bilateral: wb,
        theta_gamma: 1.5,
        theta_alpha: 2.0,
        ..CrfParams::default()
    };
    let mut worst = 0.0f32;
    let mut neg = false;
    meanfield_with(&pm, &vol, &p, Filtering::Truncated, |_, q| {
        worst = worst.max(q.max_normalization_error());
        neg |= q.probs().iter().any(|v| *v < 0.0);
    })
    .unwrap();
    (worst, neg)
}
