use super::{check_dims, Label, LabelMap, Mask, Volume, NUM_CLASSES};
use crate::error::{Error, Result};

/// Image-information mask: voxels with intensity strictly above zero.
pub fn compute_mask(vol: &Volume) -> Mask {
    Mask::new(vol.dims(), vol.data().iter().map(|&v| v > 0.0).collect()).expect("dims from volume")
}

/// Zero-mean, unit population-std standardization over the mask; voxels
/// outside the mask become 0.
pub fn standardize(vol: &Volume, mask: &Mask) -> Result<Volume> {
    check_dims("standardize", vol.dims(), mask.dims())?;
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for (&v, &m) in vol.data().iter().zip(mask.bits()) {
        if m {
            n += 1;
            sum += v as f64;
        }
    }
    if n < 2 {
        return Err(Error::Degenerate(format!("mask selects {n} voxels, need at least 2")));
    }
    let mean = sum / n as f64;
    let var = vol
        .data()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::Degenerate("masked intensities have zero variance".into()));
    }
    let data = vol
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &m)| if m { ((v as f64 - mean) / std) as f32 } else { 0.0 })
        .collect();
    Volume::new(vol.geometry().clone(), data)
}

/// Label fractions over a mask, indexed by label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelFractions(pub [f64; NUM_CLASSES]);

impl LabelFractions {
    pub fn get(&self, l: Label) -> f64 {
        self.0[l.index()]
    }
}

pub fn label_histogram(lm: &LabelMap, mask: &Mask) -> Result<LabelFractions> {
    check_dims("label_histogram", lm.dims(), mask.dims())?;
    let mut counts = [0usize; NUM_CLASSES];
    for (&l, &m) in lm.labels().iter().zip(mask.bits()) {
        if m {
            counts[l as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Degenerate("label histogram over an empty mask".into()));
    }
    Ok(LabelFractions(counts.map(|c| c as f64 / total as f64)))
}
