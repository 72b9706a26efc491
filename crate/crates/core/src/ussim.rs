//! Procedural brain-like phantoms and a simplified ultrasound sweep simulator.
//!
//! Rays run along +z through each (x, y) column. Interfaces deposit a
//! reflection and weaken the transmitted amplitude; per-voxel scatterers are
//! modulated by that amplitude. Both fields are blurred by a separable
//! Gaussian PSF, rectified and log-compressed.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seed::{stream, tag};
use crate::volume::{linear_index, Dims};
use crate::{Error, Geometry, LabelMap, Result, Volume, NUM_CLASSES};

/// Smallest phantom side length.
pub const MIN_PHANTOM_SIDE: usize = 32;

/// Label fractions (BG, GM, WM) a phantom aims for.
pub const TARGET_FRACTIONS: [f64; 3] = [0.23, 0.30, 0.47];

/// Per-label acoustic properties, indexed by label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TissueAcoustics {
    pub impedance: [f64; 3],
    /// Multiplicative amplitude decay per voxel traversed.
    pub attenuation: [f64; 3],
    /// Probability that a voxel holds a scatterer.
    pub scatter_density: [f64; 3],
    /// Standard deviation of scatterer amplitudes.
    pub scatter_amp: [f64; 3],
}

impl Default for TissueAcoustics {
    fn default() -> Self {
        TissueAcoustics {
            impedance: [1.0, 1.55, 1.65],
            attenuation: [0.999, 0.995, 0.996],
            scatter_density: [0.05, 0.5, 0.35],
            scatter_amp: [0.2, 1.0, 0.7],
        }
    }
}

impl TissueAcoustics {
    pub fn validate(&self) -> Result<()> {
        for l in 0..NUM_CLASSES {
            let (z, a, r, s) = (
                self.impedance[l],
                self.attenuation[l],
                self.scatter_density[l],
                self.scatter_amp[l],
            );
            if !(z > 0.0 && z.is_finite()) {
                return Err(Error::Config(format!("impedance of label {l} must be positive, got {z}")));
            }
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("attenuation of label {l} must lie in (0, 1], got {a}")));
            }
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("scatter density of label {l} must lie in [0, 1], got {r}")));
            }
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("scatter amplitude of label {l} must be non-negative, got {s}")));
            }
        }
        Ok(())
    }

    /// Intensity reflection coefficient for a ray passing from label `a` into `b`.
    pub fn reflection(&self, a: u8, b: u8) -> f64 {
        let (za, zb) = (self.impedance[a as usize], self.impedance[b as usize]);
        ((zb - za) / (zb + za)).powi(2)
    }
}

/// Gaussian PSF standard deviations in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Psf {
    /// Along z, the ray direction.
    pub axial: f64,
    /// Along x.
    pub lateral: f64,
    /// Along y.
    pub elevational: f64,
}

impl Default for Psf {
    fn default() -> Self {
        Psf {
            axial: 1.0,
            lateral: 2.0,
            elevational: 2.0,
        }
    }
}

impl Psf {
    /// Sigmas in (x, y, z) order.
    pub fn sigmas(&self) -> [f64; 3] {
        [self.lateral, self.elevational, self.axial]
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas().iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("psf sigmas must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub acoustics: TissueAcoustics,
    pub psf: Psf,
    /// Log-compression constant `c` in `ln(1 + c x) / ln(1 + c)`.
    pub log_c: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            acoustics: TissueAcoustics::default(),
            psf: Psf::default(),
            log_c: 100.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        self.acoustics.validate()?;
        self.psf.validate()?;
        if !(self.log_c > 0.0 && self.log_c.is_finite()) {
            return Err(Error::Config(format!("log_c must be positive, got {}", self.log_c)));
        }
        Ok(())
    }
}

/// Pre-PSF ray-casting output, x-fastest like every grid in the crate.
#[derive(Clone, Debug, PartialEq)]
pub struct RayFields {
    pub reflection: Vec<f64>,
    pub scatter: Vec<f64>,
    /// False for background voxels the ray crosses before its first interface.
    pub insonified: Vec<bool>,
}

/// Casts one ray per (x, y) column along +z. Scatterer draws for each column
/// come from a stream keyed by `(seed, x, y)`.
pub fn ray_cast(lm: &LabelMap, acoustics: &TissueAcoustics, seed: u64) -> RayFields {
    let [nx, ny, nz] = lm.dims();
    let columns: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = (0..nx * ny)
        .into_par_iter()
        .map(|col| {
            let (x, y) = (col % nx, col / nx);
            let mut rng = stream(seed, &[tag::SCATTER, x as u64, y as u64]);
            let mut refl = vec![0.0; nz];
            let mut scat = vec![0.0; nz];
            let mut lit = vec![false; nz];
            let mut amp = 1.0f64;
            let mut prev: Option<u8> = None;
            let mut reached = false;
            for z in 0..nz {
                let l = lm.labels()[linear_index(lm.dims(), x, y, z)];
                if let Some(p) = prev {
                    if p != l {
                        let r = acoustics.reflection(p, l);
                        refl[z] = amp * r;
                        amp *= 1.0 - r;
                        reached = true;
                    }
                }
                reached |= l != 0;
                let keep = rng.random_bool(acoustics.scatter_density[l as usize]);
                let g: f64 = StandardNormal.sample(&mut rng);
                if reached {
                    lit[z] = true;
                    if keep {
                        scat[z] = amp * acoustics.scatter_amp[l as usize] * g;
                    }
                }
                amp *= acoustics.attenuation[l as usize];
                prev = Some(l);
            }
            (refl, scat, lit)
        })
        .collect();
    let n = nx * ny * nz;
    let mut f = RayFields {
        reflection: vec![0.0; n],
        scatter: vec![0.0; n],
        insonified: vec![false; n],
    };
    for (col, (r, s, l)) in columns.into_iter().enumerate() {
        for z in 0..nz {
            let i = col + nx * ny * z;
            f.reflection[i] = r[z];
            f.scatter[i] = s[z];
            f.insonified[i] = l[z];
        }
    }
    f
}

/// Normalized Gaussian taps of half-width `ceil(3 sigma)`; sigma 0 is the identity.
pub fn psf_taps(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with zero padding outside the grid.
pub fn blur(field: &[f64], dims: Dims, psf: &Psf) -> Vec<f64> {
    let [nx, ny, _] = dims;
    let strides = [1, nx, nx * ny];
    let mut cur = field.to_vec();
    for (axis, sigma) in psf.sigmas().into_iter().enumerate() {
        let taps = psf_taps(sigma);
        let r = (taps.len() / 2) as isize;
        let (len, stride) = (dims[axis] as isize, strides[axis]);
        let src = cur;
        let mut dst = vec![0.0; src.len()];
        dst.par_iter_mut().enumerate().for_each(|(idx, o)| {
            let pos = ((idx / stride) as isize) % len;
            let base = idx - pos as usize * stride;
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                let p = pos + t as isize - r;
                if (0..len).contains(&p) {
                    acc += w * src[base + p as usize * stride];
                }
            }
            *o = acc;
        });
        cur = dst;
    }
    cur
}

/// Image before the final clamp: blurred fields summed, rectified and
/// log-compressed, with never-insonified voxels at exactly 0.
pub fn render_unclamped(lm: &LabelMap, params: &SimParams, seed: u64) -> Vec<f64> {
    let rays = ray_cast(lm, &params.acoustics, seed);
    let dims = lm.dims();
    let refl = blur(&rays.reflection, dims, &params.psf);
    let scat = blur(&rays.scatter, dims, &params.psf);
    let norm = (1.0 + params.log_c).ln();
    refl.iter()
        .zip(&scat)
        .zip(&rays.insonified)
        .map(|((r, s), &lit)| {
            if lit {
                (1.0 + params.log_c * (r + s).abs()).ln() / norm
            } else {
                0.0
            }
        })
        .collect()
}

pub fn simulate_sweep(lm: &LabelMap, params: &SimParams, seed: u64) -> Result<Volume> {
    params.validate()?;
    let data = render_unclamped(lm, params, seed).into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Volume::new(lm.geometry().clone(), data)
}

/// Smooth random field: a few low-frequency cosines.
struct SmoothNoise {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl SmoothNoise {
    fn new<R: Rng + ?Sized>(rng: &mut R, dims: Dims, amplitude: f64) -> Self {
        let waves = (0..6)
            .map(|_| {
                let k = [0, 1, 2].map(|a| {
                    let cycles: f64 = rng.random_range(0.5..2.0);
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    sign * 2.0 * std::f64::consts::PI * cycles / dims[a] as f64
                });
                let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                let amp = amplitude * rng.random_range(0.5..1.0) / 6f64.sqrt();
                (k, phase, amp)
            })
            .collect();
        SmoothNoise { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.waves
            .iter()
            .map(|(k, ph, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).cos())
            .sum()
    }
}

/// Value below which a `q` fraction of `values` lies.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    let k = ((q * v.len() as f64).round() as usize).clamp(1, v.len()) - 1;
    let (_, x, _) = v.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *x
}

/// Nested phantom: background outside a randomized ellipsoid, a grey matter
/// shell, and a white matter core with smoothly perturbed boundaries.
pub fn make_phantom<R: Rng + ?Sized>(rng: &mut R, dims: Dims, target: [f64; 3]) -> Result<LabelMap> {
    if dims.iter().any(|&d| d < MIN_PHANTOM_SIDE) {
        return Err(Error::Validation(format!(
            "phantom dims {dims:?} are infeasible: every side must be at least {MIN_PHANTOM_SIDE}"
        )));
    }
    let s: f64 = target.iter().sum();
    if target.iter().any(|&f| !(f > 0.0)) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!("target fractions {target:?} must be positive and sum to 1")));
    }
    let centre = [0, 1, 2].map(|a| dims[a] as f64 * (0.5 + rng.random_range(-0.05..0.05)));
    let semi = [0, 1, 2].map(|a| dims[a] as f64 * rng.random_range(0.55..0.7));
    let outer_noise = SmoothNoise::new(rng, dims, 0.06);
    let inner_noise = SmoothNoise::new(rng, dims, 0.12);
    let bg = (target[0] + rng.random_range(-0.03..0.03)).clamp(0.05, 0.9);
    let wm = (target[2] + rng.random_range(-0.03..0.03)).clamp(0.05, 0.9);

    let geometry = Geometry::unit(dims);
    let n = geometry.len();
    let mut outer = Vec::with_capacity(n);
    let mut inner = Vec::with_capacity(n);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let r = (0..3).map(|a| ((p[a] - centre[a]) / semi[a]).powi(2)).sum::<f64>().sqrt();
                outer.push(r + outer_noise.at(p));
                inner.push(r + inner_noise.at(p));
            }
        }
    }
    let t_outer = quantile(&outer, 1.0 - bg);
    let brain: Vec<f64> = inner.iter().zip(&outer).filter(|(_, o)| **o <= t_outer).map(|(i, _)| *i).collect();
    let t_inner = quantile(&brain, wm / (1.0 - bg));
    let labels = outer
        .iter()
        .zip(&inner)
        .map(|(&o, &i)| {
            if o > t_outer {
                0
            } else if i <= t_inner {
                2
            } else {
                1
            }
        })
        .collect();
    LabelMap::new(geometry, labels)
}

/// Per labelmap, `per_case` sweeps with impedances jittered by up to 10 % and
/// fresh scatterer seeds.
pub fn generate_pretrain_set<R: Rng + ?Sized>(
    labelmaps: &[LabelMap],
    per_case: usize,
    params: &SimParams,
    rng: &mut R,
) -> Result<Vec<(Volume, LabelMap)>> {
    if per_case == 0 {
        return Err(Error::Config("per_case must be at least 1".into()));
    }
    params.validate()?;
    let mut jobs = Vec::new();
    for (i, _) in labelmaps.iter().enumerate() {
        for _ in 0..per_case {
            let mut p = *params;
            for z in p.acoustics.impedance.iter_mut() {
                *z *= 1.0 + rng.random_range(-0.1..=0.1);
            }
            jobs.push((i, p, rng.random::<u64>()));
        }
    }
    jobs.into_par_iter()
        .map(|(i, p, seed)| Ok((simulate_sweep(&labelmaps[i], &p, seed)?, labelmaps[i].clone())))
        .collect()
}
