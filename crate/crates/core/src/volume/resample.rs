use super::{Geometry, LabelMap, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Per-axis sampling plan: output dims and the source-index step per output voxel.
struct Plan {
    dims: [usize; 3],
    step: [f64; 3],
}

fn plan(g: &Geometry, target_mm: f64) -> Result<Plan> {
    if !(target_mm.is_finite() && target_mm > 0.0) {
        return Err(Error::Validation(format!("target spacing must be positive, got {target_mm}")));
    }
    let mut dims = [0; 3];
    let mut step = [0.0; 3];
    for a in 0..3 {
        let extent = g.dims[a] as f64 * g.spacing[a] / target_mm;
        // Tolerate rounding noise so exact multiples do not gain a voxel.
        dims[a] = ((extent - 1e-9).ceil() as usize).max(1);
        step[a] = target_mm / g.spacing[a];
    }
    Ok(Plan { dims, step })
}

#[inline]
fn clamp_pos(pos: f64, n: usize) -> f64 {
    pos.clamp(0.0, (n - 1) as f64)
}

/// Resamples to isotropic `target_mm` spacing. Output voxel `i` sits at
/// physical offset `i * target_mm` from the shared origin; samples outside
/// the source grid are edge-clamped.
pub fn resample_isotropic(vol: &Volume, target_mm: f64, kind: Interpolation) -> Result<Volume> {
    let g = vol.geometry();
    let p = plan(g, target_mm)?;
    let [nx, ny, nz] = g.dims;
    let src = vol.data();
    let out_geom = Geometry::new(p.dims, [target_mm; 3], g.origin)?;
    let mut out = Vec::with_capacity(out_geom.len());

    let axis_samples = |a: usize, n: usize| -> Vec<(usize, usize, f64)> {
        (0..p.dims[a])
            .map(|i| {
                let pos = clamp_pos(i as f64 * p.step[a], n);
                match kind {
                    Interpolation::Trilinear => {
                        let i0 = pos.floor() as usize;
                        let i1 = (i0 + 1).min(n - 1);
                        (i0, i1, pos - i0 as f64)
                    }
                    Interpolation::Nearest => {
                        let i0 = ((pos + 0.5).floor() as usize).min(n - 1);
                        (i0, i0, 0.0)
                    }
                }
            })
            .collect()
    };
    let xs = axis_samples(0, nx);
    let ys = axis_samples(1, ny);
    let zs = axis_samples(2, nz);

    let at = |x: usize, y: usize, z: usize| src[x + nx * (y + ny * z)] as f64;
    for &(z0, z1, fz) in &zs {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let v = if kind == Interpolation::Nearest {
                    at(x0, y0, z0)
                } else {
                    let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
                    let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
                    let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
                    let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
                    let c0 = c00 * (1.0 - fy) + c10 * fy;
                    let c1 = c01 * (1.0 - fy) + c11 * fy;
                    c0 * (1.0 - fz) + c1 * fz
                };
                out.push(v as f32);
            }
        }
    }
    Volume::new(out_geom, out)
}

/// Nearest-neighbour resampling, the only admissible kind for labels.
pub fn resample_labelmap(lm: &LabelMap, target_mm: f64) -> Result<LabelMap> {
    let v = resample_isotropic(&lm.to_volume(), target_mm, Interpolation::Nearest)?;
    LabelMap::from_volume(&v)
}
