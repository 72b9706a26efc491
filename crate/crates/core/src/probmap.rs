//! Per-voxel class distributions and their file format.
//!
//! On disk a probability map is `name.raw` + `name.json`. The payload is
//! little-endian f32, channel fastest: the three class probabilities of voxel
//! 0, then those of voxel 1, with voxels in x-fastest order. The sidecar is
//! `{dims, spacing, origin, channels: 3, layout: "channel-fastest", dtype: "f32"}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Label, LabelMap, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    geometry: Geometry,
    probs: Vec<f32>,
}

pub const NORMALIZATION_TOL: f32 = 1e-5;

impl ProbabilityMap {
    /// Checks non-negativity and per-voxel normalization.
    pub fn new(geometry: Geometry, probs: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if probs.len() != geometry.len() * NUM_CLASSES {
            return Err(Error::Integrity(format!(
                "{} probabilities for {} voxels",
                probs.len(),
                geometry.len()
            )));
        }
        for (i, p) in probs.chunks_exact(NUM_CLASSES).enumerate() {
            let sum: f32 = p.iter().sum();
            if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Validation(format!("voxel {i} is not a distribution: {p:?}")));
            }
        }
        Ok(ProbabilityMap { geometry, probs })
    }

    pub(crate) fn from_parts_unchecked(geometry: Geometry, probs: Vec<f32>) -> Self {
        debug_assert_eq!(probs.len(), geometry.len() * NUM_CLASSES);
        ProbabilityMap { geometry, probs }
    }

    /// Probability 1 for `label` everywhere.
    pub fn certain(geometry: Geometry, label: Label) -> Self {
        let mut probs = vec![0.0; geometry.len() * NUM_CLASSES];
        for p in probs.chunks_exact_mut(NUM_CLASSES) {
            p[label.index()] = 1.0;
        }
        ProbabilityMap { geometry, probs }
    }

    /// One-hot encoding of a label map.
    pub fn one_hot(lm: &LabelMap) -> Self {
        let mut probs = vec![0.0; lm.labels().len() * NUM_CLASSES];
        for (p, &l) in probs.chunks_exact_mut(NUM_CLASSES).zip(lm.labels()) {
            p[l as usize] = 1.0;
        }
        ProbabilityMap {
            geometry: lm.geometry().clone(),
            probs,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub(crate) fn probs_mut(&mut self) -> &mut [f32] {
        &mut self.probs
    }

    #[inline]
    pub fn voxel(&self, idx: usize) -> &[f32] {
        &self.probs[idx * NUM_CLASSES..(idx + 1) * NUM_CLASSES]
    }

    /// Largest per-voxel deviation of the probability sum from 1.
    pub fn max_normalization_error(&self) -> f32 {
        self.probs
            .chunks_exact(NUM_CLASSES)
            .map(|p| (p.iter().sum::<f32>() - 1.0).abs())
            .fold(0.0, f32::max)
    }

    /// Per-voxel argmax; ties go to the smaller label.
    pub fn argmax_labels(&self) -> LabelMap {
        let labels = self
            .probs
            .chunks_exact(NUM_CLASSES)
            .map(|p| {
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.geometry.clone(), labels).expect("argmax yields valid labels")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let (raw, json) = crate::volume::io_paths(path.as_ref());
        let side = ProbSidecar {
            dims: self.geometry.dims,
            spacing: self.geometry.spacing,
            origin: self.geometry.origin,
            channels: NUM_CLASSES,
            layout: LAYOUT.into(),
            dtype: "f32".into(),
        };
        fs::write(&json, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&json, e))?;
        let mut bytes = Vec::with_capacity(self.probs.len() * 4);
        for v in &self.probs {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (raw, json) = crate::volume::io_paths(path.as_ref());
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let side: ProbSidecar = serde_json::from_str(&text)?;
        if side.channels != NUM_CLASSES {
            return Err(Error::format("channels", format!("expected {NUM_CLASSES}, got {}", side.channels)));
        }
        if side.layout != LAYOUT {
            return Err(Error::format("layout", format!("expected `{LAYOUT}`, got `{}`", side.layout)));
        }
        if side.dtype != "f32" {
            return Err(Error::format("dtype", format!("expected f32, got `{}`", side.dtype)));
        }
        let geometry = Geometry::new(side.dims, side.spacing, side.origin)?;
        let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        if bytes.len() != geometry.len() * NUM_CLASSES * 4 {
            return Err(Error::Integrity(format!(
                "payload has {} bytes, expected {}",
                bytes.len(),
                geometry.len() * NUM_CLASSES * 4
            )));
        }
        let probs = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ProbabilityMap::new(geometry, probs)
    }
}

const LAYOUT: &str = "channel-fastest";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbSidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    channels: usize,
    layout: String,
    dtype: String,
}
