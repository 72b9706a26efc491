mod common;

use common::rng;
use rand::Rng;
use usseg::volume::{
    compute_mask, label_histogram, read_labelmap, read_volume, resample_isotropic, resample_labelmap, standardize, write_labelmap,
    write_volume, FileFormat, Interpolation,
};
use usseg::{Geometry, LabelMap, Mask, Volume};

/// Sum over every source voxel of a separable hat-function weight.
fn hat_oracle(vol: &Volume, t: f64) -> Vec<f64> {
    let g = vol.geometry();
    let out_dims: Vec<usize> = (0..3).map(|a| ((g.dims[a] as f64 * g.spacing[a] / t) - 1e-9).ceil() as usize).collect();
    let hat = |a: usize, i: usize, j: usize| {
        let pos = (i as f64 * t / g.spacing[a]).clamp(0.0, (g.dims[a] - 1) as f64);
        (1.0 - (pos - j as f64).abs()).max(0.0)
    };
    let mut out = Vec::new();
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let mut acc = 0.0;
                for k in 0..g.dims[2] {
                    for j in 0..g.dims[1] {
                        for i in 0..g.dims[0] {
                            let w = hat(0, x, i) * hat(1, y, j) * hat(2, z, k);
                            acc += w * vol.get(i, j, k) as f64;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn random_volume(dims: [usize; 3], spacing: [f64; 3], seed: u64) -> Volume {
    let mut g = rng(seed);
    let geom = Geometry::new(dims, spacing, [1.5, -2.0, 0.25]).unwrap();
    Volume::from_fn(geom, |_, _, _| g.random_range(-1.0..1.0f32)).unwrap()
}

#[test]
fn trilinear_matches_hat_oracle() {
    for (seed, spacing) in [(1, [0.6; 3]), (2, [0.6, 0.5, 0.9])] {
        let vol = random_volume([5, 5, 5], spacing, seed);
        let out = resample_isotropic(&vol, 0.4, Interpolation::Trilinear).unwrap();
        let want = hat_oracle(&vol, 0.4);
        assert_eq!(out.data().len(), want.len());
        assert_eq!(out.geometry().spacing, [0.4; 3]);
        assert_eq!(out.geometry().origin, vol.geometry().origin);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
    let out = resample_isotropic(&random_volume([5, 5, 5], [0.6; 3], 1), 0.4, Interpolation::Trilinear).unwrap();
    assert_eq!(out.dims(), [8, 8, 8]);
}

#[test]
fn ramp_is_reproduced_exactly_inside() {
    let g = Geometry::new([6, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
    let vol = Volume::from_fn(g, |x, _, _| x as f32).unwrap();
    let out = resample_isotropic(&vol, 0.5, Interpolation::Trilinear).unwrap();
    assert_eq!(out.dims(), [12, 4, 4]);
    for x in 0..12 {
        let want = (x as f32 * 0.5).min(5.0);
        assert_eq!(out.get(x, 1, 3), want);
    }
}

#[test]
fn non_positive_target_rejected() {
    let vol = random_volume([3, 3, 3], [1.0; 3], 3);
    for t in [0.0, -0.4, f64::NAN] {
        assert_eq!(resample_isotropic(&vol, t, Interpolation::Trilinear).unwrap_err().kind(), "validation");
    }
}

#[test]
fn labels_resample_to_labels() {
    let g = Geometry::new([4, 4, 4], [0.8; 3], [0.0; 3]).unwrap();
    let lm = LabelMap::new(g, (0..64).map(|i| (i % 3) as u8).collect()).unwrap();
    let out = resample_labelmap(&lm, 0.4).unwrap();
    assert_eq!(out.dims(), [8, 8, 8]);
    assert!(out.labels().iter().all(|&l| l <= 2));
    assert_eq!(out.get(2, 4, 6), lm.get(1, 2, 3));
}

#[test]
fn preprocessing_chain() {
    let g = Geometry::unit([4, 4, 2]);
    let vol = Volume::from_fn(g.clone(), |x, y, z| if x < 2 { 0.0 } else { (1 + x + y + z) as f32 }).unwrap();
    let mask = compute_mask(&vol);
    assert_eq!(mask.count(), 16);
    let std = standardize(&vol, &mask).unwrap();
    let inside: Vec<f64> = std.data().iter().zip(mask.bits()).filter(|(_, &m)| m).map(|(&v, _)| v as f64).collect();
    let mean = inside.iter().sum::<f64>() / inside.len() as f64;
    let var = inside.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / inside.len() as f64;
    assert!(mean.abs() < 1e-5 && (var.sqrt() - 1.0).abs() < 1e-5);
    assert!(std.data().iter().zip(mask.bits()).all(|(&v, &m)| m || v == 0.0));

    let labels = LabelMap::new(g, (0..32).map(|i| if i % 4 < 2 { 0 } else { 2 }).collect()).unwrap();
    let h = label_histogram(&labels, &mask).unwrap();
    assert_eq!(h.0, [0.0, 0.0, 1.0]);
    assert!(label_histogram(&labels, &Mask::new([4, 4, 2], vec![false; 32]).unwrap()).is_err());
}

#[test]
fn file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let vol = random_volume([5, 3, 4], [0.4, 0.5, 0.6], 4);
    let lm = LabelMap::new(vol.geometry().clone(), (0..60).map(|i| (i % 3) as u8).collect()).unwrap();
    for (name, fmt) in [("v.nrrd", FileFormat::Nrrd), ("v.json", FileFormat::RawJson)] {
        let p = dir.path().join(name);
        write_volume(&vol, &p, fmt).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back.geometry(), vol.geometry());
        assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), vol.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let lp = dir.path().join(format!("l{name}"));
        write_labelmap(&lm, &lp, fmt).unwrap();
        assert_eq!(read_labelmap(&lp).unwrap(), lm);
    }
}
