//! Direct-convolution oracle.

use super::{random_tensor, random_vec, rng};
use rand::Rng;
use usseg::tensor::{conv3d_valid, Tensor};

/// Seven nested loops over the `(N, C, D, H, W)` layout.
pub fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], cout: usize, k: usize) -> Tensor<f64> {
    let [n, cin, d, h, wd] = x.shape();
    let (od, oh, ow) = (d + 1 - k, h + 1 - k, wd + 1 - k);
    let xi = |b: usize, c: usize, z: usize, y: usize, xx: usize| x.data()[(((b * cin + c) * d + z) * h + y) * wd + xx];
    let mut out = Vec::with_capacity(n * cout * od * oh * ow);
    for bn in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wv = w[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                                        acc += wv * xi(bn, ci, z + kz, y + ky, xx + kx);
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    Tensor::from_vec([n, cout, od, oh, ow], out).unwrap()
}

/// Random instances up to `(2, 3, 8, 8, 8)` with kernel side 1 or 3. Returns
/// the largest absolute deviation from the oracle, in double and single
/// precision.
pub fn conv_oracle_errors(instances: u64) -> (f64, f64) {
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let mut g = rng(1000 + i);
        let k = if g.random_bool(0.5) { 3 } else { 1 };
        let n = g.random_range(1..=2);
        let cin = g.random_range(1..=3);
        let cout = g.random_range(1..=3);
        let sp = [0; 3].map(|_| g.random_range(k..=8));
        let x = random_tensor([n, cin, sp[0], sp[1], sp[2]], &mut g, -1.0, 1.0);
        let w = random_vec(cout * cin * k.pow(3), &mut g, -1.0, 1.0);
        let b = random_vec(cout, &mut g, -1.0, 1.0);
        let want = naive_conv(&x, &w, &b, cout, k);

        let got = conv3d_valid(&x, &w, &b, cout, k).unwrap();
        assert_eq!(got.shape(), want.shape());
        worst64 = worst64.max(max_abs_diff(got.data(), want.data()));

        let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let got32 = conv3d_valid(&x.cast::<f32>(), &w32, &b32, cout, k).unwrap();
        let got32: Vec<f64> = got32.data().iter().map(|&v| v as f64).collect();
        worst32 = worst32.max(max_abs_diff(&got32, want.data()));
    }
    (worst64, worst32)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
