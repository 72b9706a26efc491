//! Fully connected CRF refinement of probability maps by mean-field iteration.
//!
//! Pairwise potentials are Potts-weighted sums of a spatial Gaussian kernel
//! over voxel positions and a bilateral kernel over position and intensity.
//! Messages exclude each voxel's own contribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volume::{check_dims, Dims};
use crate::LabelMap;
use crate::{Error, ProbabilityMap, Result, Volume, NUM_CLASSES};

/// Unaries are `-ln(max(p, UNARY_FLOOR))`.
pub const UNARY_FLOOR: f64 = 1e-8;

/// Bilateral pairs whose intensity factor falls below `exp(-INTENSITY_CUTOFF)`
/// (about 1e-12) are skipped in the truncated path.
const INTENSITY_CUTOFF: f64 = 27.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfParams {
    pub w_spatial: f64,
    /// Spatial kernel standard deviation, voxels.
    pub theta_gamma: f64,
    pub w_bilateral: f64,
    /// Bilateral positional standard deviation, voxels.
    pub theta_alpha: f64,
    /// Bilateral intensity standard deviation, standardized intensity units.
    pub theta_beta: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w_spatial: 1.0,
            theta_gamma: 3.0,
            w_bilateral: 1.0,
            theta_alpha: 5.0,
            theta_beta: 0.1,
            iterations: 5,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta_gamma", self.theta_gamma),
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("w_spatial", self.w_spatial), ("w_bilateral", self.w_bilateral)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    Spatial { theta: f64 },
    Bilateral { theta_pos: f64, theta_int: f64 },
}

impl Kernel {
    fn theta_pos(&self) -> f64 {
        match *self {
            Kernel::Spatial { theta } => theta,
            Kernel::Bilateral { theta_pos, .. } => theta_pos,
        }
    }

    /// Half-width of the truncated window: `ceil(3 * theta)`.
    pub fn radius(&self) -> usize {
        (3.0 * self.theta_pos()).ceil() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filtering {
    /// All pairs, O(N^2). Reference only.
    Exact,
    /// Neighbours within a cubic window of half-width [`Kernel::radius`].
    Truncated,
}

/// Gaussian-weighted sum of `q` over all other voxels, for a single field.
pub fn gaussian_message(q: &[f64], dims: Dims, intensity: &[f32], kernel: Kernel, filtering: Filtering) -> Result<Vec<f64>> {
    gaussian_filter(q, 1, dims, intensity, kernel, filtering)
}

/// As [`gaussian_message`] for `channels` interleaved fields (channel-fastest).
pub fn gaussian_filter(
    q: &[f64],
    channels: usize,
    dims: Dims,
    intensity: &[f32],
    kernel: Kernel,
    filtering: Filtering,
) -> Result<Vec<f64>> {
    let n = dims.iter().product::<usize>();
    if q.len() != n * channels {
        return Err(Error::shape("gaussian_filter", format!("{} values for {n} voxels x {channels}", q.len())));
    }
    if matches!(kernel, Kernel::Bilateral { .. }) && intensity.len() != n {
        return Err(Error::shape(
            "gaussian_filter",
            format!("{} intensities for {n} voxels", intensity.len()),
        ));
    }
    Ok(match (filtering, kernel) {
        (Filtering::Exact, _) => exact(q, channels, dims, intensity, kernel),
        (Filtering::Truncated, Kernel::Spatial { theta }) => separable_spatial(q, channels, dims, theta),
        (Filtering::Truncated, Kernel::Bilateral { theta_pos, theta_int }) => {
            windowed_bilateral(q, channels, dims, intensity, theta_pos, theta_int)
        }
    })
}

fn exact(q: &[f64], c: usize, dims: Dims, intensity: &[f32], kernel: Kernel) -> Vec<f64> {
    let [nx, ny, _] = dims;
    let n = q.len() / c;
    let pos = |i: usize| [(i % nx) as f64, ((i / nx) % ny) as f64, (i / (nx * ny)) as f64];
    let (inv_p, inv_i) = match kernel {
        Kernel::Spatial { theta } => (1.0 / (2.0 * theta * theta), 0.0),
        Kernel::Bilateral { theta_pos, theta_int } => (1.0 / (2.0 * theta_pos * theta_pos), 1.0 / (2.0 * theta_int * theta_int)),
    };
    let bilateral = matches!(kernel, Kernel::Bilateral { .. });
    let mut out = vec![0.0; q.len()];
    out.par_chunks_mut(c).enumerate().for_each(|(i, o)| {
        let pi = pos(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let pj = pos(j);
            let d2 = (pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2) + (pi[2] - pj[2]).powi(2);
            let mut e = d2 * inv_p;
            if bilateral {
                let di = intensity[i] as f64 - intensity[j] as f64;
                e += di * di * inv_i;
            }
            let w = (-e).exp();
            for k in 0..c {
                o[k] += w * q[j * c + k];
            }
        }
    });
    out
}

fn gaussian_taps(theta: f64, r: usize) -> Vec<f64> {
    let inv = 1.0 / (2.0 * theta * theta);
    (0..=r).map(|d| (-((d * d) as f64) * inv).exp()).collect()
}

/// Three 1D passes; the box window is a product of axis ranges, so this equals
/// the windowed sum. The self term (weight 1) is subtracted at the end.
fn separable_spatial(q: &[f64], c: usize, dims: Dims, theta: f64) -> Vec<f64> {
    let r = Kernel::Spatial { theta }.radius();
    let taps = gaussian_taps(theta, r);
    let strides = [c, c * dims[0], c * dims[0] * dims[1]];
    let mut cur = q.to_vec();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let src = cur;
        let mut dst = vec![0.0; src.len()];
        dst.par_iter_mut().enumerate().for_each(|(idx, o)| {
            let pos = (idx / stride) % len;
            let lo = pos.saturating_sub(r);
            let hi = (pos + r).min(len - 1);
            let base = idx - pos * stride;
            let mut acc = 0.0;
            for p in lo..=hi {
                acc += taps[p.abs_diff(pos)] * src[base + p * stride];
            }
            *o = acc;
        });
        cur = dst;
    }
    for (o, v) in cur.iter_mut().zip(q) {
        *o -= v;
    }
    cur
}

fn windowed_bilateral(q: &[f64], c: usize, dims: Dims, intensity: &[f32], theta_pos: f64, theta_int: f64) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let r = Kernel::Bilateral { theta_pos, theta_int }.radius() as isize;
    let taps = gaussian_taps(theta_pos, r as usize);
    let inv_i = 1.0 / (2.0 * theta_int * theta_int);
    let mut out = vec![0.0; q.len()];
    out.par_chunks_mut(c * nx).enumerate().for_each(|(row, orow)| {
        let (y, z) = ((row % ny) as isize, (row / ny) as isize);
        for x in 0..nx as isize {
            let i = (x as usize) + nx * (y as usize + ny * z as usize);
            let ii = intensity[i] as f64;
            let o = &mut orow[x as usize * c..(x as usize + 1) * c];
            for zz in (z - r).max(0)..=(z + r).min(nz as isize - 1) {
                let wz = taps[zz.abs_diff(z)];
                for yy in (y - r).max(0)..=(y + r).min(ny as isize - 1) {
                    let wzy = wz * taps[yy.abs_diff(y)];
                    let base = nx * (yy as usize + ny * zz as usize);
                    for xx in (x - r).max(0)..=(x + r).min(nx as isize - 1) {
                        let j = base + xx as usize;
                        let di = ii - intensity[j] as f64;
                        let e = di * di * inv_i;
                        if e > INTENSITY_CUTOFF || j == i {
                            continue;
                        }
                        let w = wzy * taps[xx.abs_diff(x)] * (-e).exp();
                        for k in 0..c {
                            o[k] += w * q[j * c + k];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Per-voxel most probable label; ties go to the smaller label index.
pub fn argmax_labels(pm: &ProbabilityMap) -> LabelMap {
    pm.argmax_labels()
}

/// Mean-field refinement with the truncated filtering path.
pub fn meanfield(pm: &ProbabilityMap, vol: &Volume, p: &CrfParams) -> Result<ProbabilityMap> {
    meanfield_with(pm, vol, p, Filtering::Truncated, |_, _| {})
}

/// Mean-field refinement; `observer` sees the distribution after every iteration.
pub fn meanfield_with(
    pm: &ProbabilityMap,
    vol: &Volume,
    p: &CrfParams,
    filtering: Filtering,
    mut observer: impl FnMut(usize, &ProbabilityMap),
) -> Result<ProbabilityMap> {
    p.validate()?;
    check_dims("crf", pm.dims(), vol.dims())?;
    if p.w_spatial == 0.0 && p.w_bilateral == 0.0 {
        // without pairwise terms the input is the fixed point of the update
        for it in 0..p.iterations {
            observer(it, pm);
        }
        return Ok(pm.clone());
    }
    let dims = pm.dims();
    let unary: Vec<f64> = pm.probs().iter().map(|&v| -(v as f64).clamp(UNARY_FLOOR, 1.0).ln()).collect();
    let mut q: Vec<f64> = pm.probs().iter().map(|&v| v as f64).collect();
    let spatial = Kernel::Spatial { theta: p.theta_gamma };
    let bilateral = Kernel::Bilateral {
        theta_pos: p.theta_alpha,
        theta_int: p.theta_beta,
    };
    let mut out = pm.clone();
    for it in 0..p.iterations {
        let mut msg = vec![0.0; q.len()];
        if p.w_spatial != 0.0 {
            let m = gaussian_filter(&q, NUM_CLASSES, dims, vol.data(), spatial, filtering)?;
            msg.iter_mut().zip(m).for_each(|(a, b)| *a += p.w_spatial * b);
        }
        if p.w_bilateral != 0.0 {
            let m = gaussian_filter(&q, NUM_CLASSES, dims, vol.data(), bilateral, filtering)?;
            msg.iter_mut().zip(m).for_each(|(a, b)| *a += p.w_bilateral * b);
        }
        q.par_chunks_mut(NUM_CLASSES)
            .zip(msg.par_chunks(NUM_CLASSES))
            .zip(unary.par_chunks(NUM_CLASSES))
            .for_each(|((qv, m), u)| {
                let total: f64 = m.iter().sum();
                let mut e = [0.0; NUM_CLASSES];
                for l in 0..NUM_CLASSES {
                    // Potts: penalty from every other label's message
                    e[l] = -u[l] - (total - m[l]);
                }
                let mx = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..NUM_CLASSES {
                    e[l] = (e[l] - mx).exp();
                    s += e[l];
                }
                for l in 0..NUM_CLASSES {
                    qv[l] = e[l] / s;
                }
            });
        out = ProbabilityMap::from_parts_unchecked(pm.geometry().clone(), q.iter().map(|&v| v as f32).collect());
        observer(it, &out);
    }
    Ok(out)
}
