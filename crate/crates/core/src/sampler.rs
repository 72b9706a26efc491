//! Multi-scale patch extraction around class-balanced centers, geometric
//! augmentation and the dense tiling used at inference time.

use rand::Rng;

use crate::error::{Error, Result};
use crate::volume::{check_dims, coords_of, Dims, LabelMap, Mask, Volume};

/// Patch sizes of the multi-pathway network.
///
/// `factors` lists the sub-sampling strides of the low-resolution pathways;
/// the native pathway (stride 1) is implicit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub normal_size: usize,
    pub sub_size: usize,
    pub factors: Vec<usize>,
    pub conv_shrink: usize,
    pub head_shrink: usize,
    pub out_block: usize,
}

/// Side of every low-resolution pathway output before upsampling.
pub const LOW_RES_SIDE: usize = 3;

impl Default for PatchGeometry {
    fn default() -> Self {
        PatchGeometry {
            normal_size: 25,
            sub_size: 19,
            factors: vec![3, 5],
            conv_shrink: 16,
            head_shrink: 2,
            out_block: 7,
        }
    }
}

impl PatchGeometry {
    /// Smallest consistent geometry for `layers` valid 3^3 convolutions per
    /// pathway, one 3^3 head layer and an output block of side `out_block`.
    pub fn for_network(layers: usize, out_block: usize, factors: &[usize]) -> Result<Self> {
        let g = PatchGeometry {
            normal_size: out_block + 2 * layers + 2,
            sub_size: 2 * layers + LOW_RES_SIDE,
            factors: factors.to_vec(),
            conv_shrink: 2 * layers,
            head_shrink: 2,
            out_block,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn concat_side(&self) -> usize {
        self.normal_size - self.conv_shrink
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("patch geometry: {m}")));
        if self.out_block == 0 || self.out_block.is_multiple_of(2) {
            return bad(format!("output block {} must be odd", self.out_block));
        }
        if self.normal_size != self.conv_shrink + self.head_shrink + self.out_block {
            return bad("normal_size - conv_shrink - head_shrink != out_block".into());
        }
        if self.sub_size != self.conv_shrink + LOW_RES_SIDE {
            return bad("sub_size - conv_shrink != 3".into());
        }
        for &k in &self.factors {
            if k < 2 || LOW_RES_SIDE * k < self.concat_side() {
                return bad(format!("factor {k} does not cover the concatenation block"));
            }
        }
        Ok(())
    }

    /// Strides of all pathways, native first.
    pub fn strides(&self) -> Vec<usize> {
        std::iter::once(1).chain(self.factors.iter().copied()).collect()
    }

    pub fn side_for_stride(&self, stride: usize) -> usize {
        if stride == 1 {
            self.normal_size
        } else {
            self.sub_size
        }
    }
}

/// Cubic array with x-fastest linear order, indexed `(x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cube<T> {
    side: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Cube<T> {
    pub fn new(side: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != side * side * side {
            return Err(Error::shape("cube", format!("{} values for side {side}", data.len())));
        }
        Ok(Cube { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[x + self.side * (y + self.side * z)]
    }

    fn remap(&self, f: impl Fn(usize, usize, usize, usize) -> (usize, usize, usize)) -> Self {
        let n = self.side;
        let c = n - 1;
        let mut data = Vec::with_capacity(self.data.len());
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let (sx, sy, sz) = f(x, y, z, c);
                    data.push(self.get(sx, sy, sz));
                }
            }
        }
        Cube { side: n, data }
    }

    pub fn flip(&self, axis: Axis) -> Self {
        match axis {
            Axis::X => self.remap(|x, y, z, c| (c - x, y, z)),
            Axis::Y => self.remap(|x, y, z, c| (x, c - y, z)),
            Axis::Z => self.remap(|x, y, z, c| (x, y, c - z)),
        }
    }

    /// +90 degree rotation about `axis`, about the cube center.
    pub fn rot90(&self, axis: Axis) -> Self {
        match axis {
            // (x, y) -> (-y, x)
            Axis::Z => self.remap(|x, y, z, c| (y, c - x, z)),
            // (y, z) -> (-z, y)
            Axis::X => self.remap(|x, y, z, c| (x, z, c - y)),
            // (z, x) -> (-x, z)
            Axis::Y => self.remap(|x, y, z, c| (c - z, y, x)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

/// A geometric transform applied identically to every patch and the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Flip(Axis),
    Rot90(Axis),
}

/// Concentric multi-resolution patches plus the central target block.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// One patch per pathway stride, native resolution first.
    pub patches: Vec<Cube<f32>>,
    pub target: Cube<u8>,
    pub center: [usize; 3],
}

impl TrainingSample {
    pub fn apply(&self, t: Transform) -> Self {
        let f32op = |c: &Cube<f32>| match t {
            Transform::Flip(a) => c.flip(a),
            Transform::Rot90(a) => c.rot90(a),
        };
        let target = match t {
            Transform::Flip(a) => self.target.flip(a),
            Transform::Rot90(a) => self.target.rot90(a),
        };
        TrainingSample {
            patches: self.patches.iter().map(f32op).collect(),
            target,
            center: self.center,
        }
    }
}

/// Draws patch centers with a 1:1 background:foreground ratio in expectation.
#[derive(Clone, Debug)]
pub struct CenterSampler {
    dims: Dims,
    background: Vec<u32>,
    foreground: Vec<u32>,
}

impl CenterSampler {
    pub fn new(lm: &LabelMap, mask: &Mask) -> Result<Self> {
        check_dims("sample_center", lm.dims(), mask.dims())?;
        let mut background = Vec::new();
        let mut foreground = Vec::new();
        for (i, (&l, &m)) in lm.labels().iter().zip(mask.bits()).enumerate() {
            if m {
                if l == 0 {
                    background.push(i as u32);
                } else {
                    foreground.push(i as u32);
                }
            }
        }
        if background.is_empty() {
            return Err(Error::Sampling("no masked voxel carries the background label".into()));
        }
        if foreground.is_empty() {
            return Err(Error::Sampling("no masked voxel carries a foreground label (GM or WM)".into()));
        }
        Ok(CenterSampler {
            dims: lm.dims(),
            background,
            foreground,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [usize; 3] {
        let pool = if rng.random_bool(0.5) {
            &self.background
        } else {
            &self.foreground
        };
        let idx = pool[rng.random_range(0..pool.len())];
        coords_of(self.dims, idx as usize)
    }
}

/// Convenience wrapper over [`CenterSampler`] for a single draw.
pub fn sample_center<R: Rng + ?Sized>(lm: &LabelMap, mask: &Mask, rng: &mut R) -> Result<[usize; 3]> {
    Ok(CenterSampler::new(lm, mask)?.sample(rng))
}

fn strided_cube<T: Copy + Default>(side: usize, stride: usize, center: [usize; 3], read: impl Fn(isize, isize, isize) -> T) -> Cube<T> {
    let half = (side / 2) as isize;
    let s = stride as isize;
    let [cx, cy, cz] = center.map(|c| c as isize);
    let mut data = Vec::with_capacity(side * side * side);
    for k in -half..=half {
        for j in -half..=half {
            for i in -half..=half {
                data.push(read(cx + i * s, cy + j * s, cz + k * s));
            }
        }
    }
    Cube { side, data }
}

/// Input patches only (no target), zero-filled outside the volume.
pub fn extract_patches(vol: &Volume, center: [usize; 3], geom: &PatchGeometry) -> Vec<Cube<f32>> {
    geom.strides()
        .into_iter()
        .map(|k| strided_cube(geom.side_for_stride(k), k, center, |x, y, z| vol.get_or_zero(x, y, z)))
        .collect()
}

pub fn extract_sample(vol: &Volume, lm: &LabelMap, center: [usize; 3], geom: &PatchGeometry) -> Result<TrainingSample> {
    if vol.geometry() != lm.geometry() {
        return Err(Error::shape("extract_sample", "volume and label map geometry differ"));
    }
    let patches = extract_patches(vol, center, geom);
    let target = strided_cube(geom.out_block, 1, center, |x, y, z| lm.get_or_zero(x, y, z));
    Ok(TrainingSample {
        patches,
        target,
        center,
    })
}

/// Random flip and/or +90 degree rotation, each with its own probability.
pub fn augment<R: Rng + ?Sized>(s: &TrainingSample, rng: &mut R, p_flip: f64, p_rot: f64) -> TrainingSample {
    let mut out = s.clone();
    if rng.random_bool(p_flip) {
        out = out.apply(Transform::Flip(Axis::ALL[rng.random_range(0..3)]));
    }
    if rng.random_bool(p_rot) {
        out = out.apply(Transform::Rot90(Axis::ALL[rng.random_range(0..3)]));
    }
    out
}

/// Start offsets of output blocks along one axis; the last block is clamped
/// to end at the volume edge.
fn axis_starts(dim: usize, block: usize) -> Vec<usize> {
    if dim <= block {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * block).take_while(|&s| s + block < dim).collect();
    starts.push(dim - block);
    starts
}

/// One output block of a dense tiling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub center: [usize; 3],
    /// Half-open voxel ranges this tile owns, per axis. Where clamped edge
    /// blocks overlap, the later block owns the overlap.
    pub owned: [(usize, usize); 3],
}

pub fn tiles(dims: Dims, block: usize) -> Vec<Tile> {
    let per_axis: Vec<Vec<(usize, (usize, usize))>> = (0..3)
        .map(|a| {
            let starts = axis_starts(dims[a], block);
            starts
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let end = starts.get(i + 1).copied().unwrap_or(dims[a]);
                    (s + block / 2, (s, end.min(dims[a])))
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for &(cz, oz) in &per_axis[2] {
        for &(cy, oy) in &per_axis[1] {
            for &(cx, ox) in &per_axis[0] {
                out.push(Tile {
                    center: [cx, cy, cz],
                    owned: [ox, oy, oz],
                });
            }
        }
    }
    out
}

/// Centers of the output blocks covering every voxel.
pub fn dense_tiling(dims: Dims, block: usize) -> Vec<[usize; 3]> {
    tiles(dims, block).into_iter().map(|t| t.center).collect()
}
