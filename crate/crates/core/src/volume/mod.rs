//! Volume, label map and mask types plus the preprocessing chain applied to
//! every case before it reaches the sampler: isotropic resampling, the
//! image-information mask and masked standardization.
//!
//! All grids share one linear order: x fastest, then y, then z.

mod io;
mod preprocess;
mod resample;

pub use io::{read_labelmap, read_volume, sidecar_paths as io_paths, write_labelmap, write_volume, write_volume_data, FileFormat};
pub use preprocess::{compute_mask, label_histogram, standardize, LabelFractions};
pub use resample::{resample_isotropic, resample_labelmap, Interpolation};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

/// Number of segmentation classes (background, grey matter, white matter).
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    GreyMatter = 1,
    WhiteMatter = 2,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [Label::Background, Label::GreyMatter, Label::WhiteMatter];

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Background),
            1 => Some(Label::GreyMatter),
            2 => Some(Label::WhiteMatter),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Label::Background => "BG",
            Label::GreyMatter => "GM",
            Label::WhiteMatter => "WM",
        }
    }
}

/// Grid geometry: voxel counts, spacing in mm and origin in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: Dims, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: Dims) -> Self {
        Geometry {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn isotropic(dims: Dims, spacing: f64) -> Self {
        Geometry {
            dims,
            spacing: [spacing; 3],
            origin: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Validation(format!(
                "spacing must be finite and positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Validation(format!("origin must be finite, got {:?}", self.origin)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, x, y, z)
    }
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Inverse of [`linear_index`].
#[inline]
pub fn coords_of(dims: Dims, idx: usize) -> [usize; 3] {
    let x = idx % dims[0];
    let y = (idx / dims[0]) % dims[1];
    let z = idx / (dims[0] * dims[1]);
    [x, y, z]
}

/// Scalar intensity grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Integrity(format!(
                "volume data has {} values, dims {:?} require {}",
                data.len(),
                geometry.dims,
                geometry.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at voxel {i}")));
        }
        Ok(Volume { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.len();
        Volume {
            geometry,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(geometry, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> Dims {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Value at signed coordinates, 0 outside the grid.
    #[inline]
    pub fn get_or_zero(&self, x: isize, y: isize, z: isize) -> f32 {
        let [nx, ny, nz] = self.geometry.dims;
        if x < 0 || y < 0 || z < 0 || x as usize >= nx || y as usize >= ny || z as usize >= nz {
            0.0
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }
}

/// Per-voxel labels in {0, 1, 2}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    geometry: Geometry,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(geometry: Geometry, labels: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if labels.len() != geometry.len() {
            return Err(Error::Integrity(format!(
                "label data has {} values, dims {:?} require {}",
                labels.len(),
                geometry.dims,
                geometry.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!(
                "label {} at voxel {i} is outside {{0,1,2}}",
                labels[i]
            )));
        }
        Ok(LabelMap { geometry, labels })
    }

    pub fn filled(geometry: Geometry, label: Label) -> Self {
        let n = geometry.len();
        LabelMap {
            geometry,
            labels: vec![label as u8; n],
        }
    }

    /// Converts an intensity volume holding integral label values.
    pub fn from_volume(vol: &Volume) -> Result<Self> {
        let labels = vol
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v.fract() == 0.0 && (0.0..NUM_CLASSES as f32).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Validation(format!("voxel {i} holds {v}, not a label in {{0,1,2}}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMap::new(vol.geometry().clone(), labels)
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry.clone(),
            data: self.labels.iter().map(|&l| l as f32).collect(),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> Dims {
        self.geometry.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.geometry.index(x, y, z)]
    }

    #[inline]
    pub fn get_or_zero(&self, x: isize, y: isize, z: isize) -> u8 {
        let [nx, ny, nz] = self.geometry.dims;
        if x < 0 || y < 0 || z < 0 || x as usize >= nx || y as usize >= ny || z as usize >= nz {
            0
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    /// Replaces the geometry, keeping the labels. Dims must agree.
    pub fn with_geometry(mut self, geometry: Geometry) -> Result<Self> {
        if geometry.dims != self.geometry.dims {
            return Err(Error::Validation(format!(
                "cannot reassign geometry {:?} to label map of dims {:?}",
                geometry.dims, self.geometry.dims
            )));
        }
        geometry.validate()?;
        self.geometry = geometry;
        Ok(self)
    }
}

/// Boolean region of interest over a grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.iter().product::<usize>() {
            return Err(Error::Integrity(format!(
                "mask has {} bits, dims {:?} require {}",
                bits.len(),
                dims,
                dims.iter().product::<usize>()
            )));
        }
        Ok(Mask { dims, bits })
    }

    pub fn full(dims: Dims) -> Self {
        Mask {
            dims,
            bits: vec![true; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }
}

pub(crate) fn check_dims(stage: &str, a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::shape(stage, format!("dims {a:?} do not match {b:?}")));
    }
    Ok(())
}
