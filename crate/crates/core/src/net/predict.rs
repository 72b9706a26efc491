use rayon::prelude::*;

use super::{Mode, NetInput, Network};
use crate::error::{Error, Result};
pub use crate::probmap::ProbabilityMap;
use crate::sampler::{extract_patches, tiles, Tile};
use crate::tensor::{softmax, Tensor};
use crate::volume::{check_dims, Label, Mask, Volume, NUM_CLASSES};

/// Tiles per forward pass.
const TILE_BATCH: usize = 8;

/// Dense prediction by non-overlapping output blocks. Each voxel takes the
/// prediction of the tile that owns it, so the result does not depend on the
/// order tiles are processed in. Voxels outside `mask` are background with
/// probability 1.
pub fn predict_volume(net: &Network<f32>, vol: &Volume, mask: &Mask) -> Result<ProbabilityMap> {
    let all = tiles(vol.dims(), net.config.out_block);
    let order: Vec<usize> = (0..all.len()).collect();
    predict_tiles(net, vol, mask, &all, &order)
}

/// As [`predict_volume`] but visiting tiles in the given permutation.
pub fn predict_volume_with_order(net: &Network<f32>, vol: &Volume, mask: &Mask, order: &[usize]) -> Result<ProbabilityMap> {
    let all = tiles(vol.dims(), net.config.out_block);
    let mut seen = vec![false; all.len()];
    for &i in order {
        if i >= all.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Validation("tile order is not a permutation".into()));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Validation("tile order is not a permutation".into()));
    }
    predict_tiles(net, vol, mask, &all, order)
}

fn predict_tiles(net: &Network<f32>, vol: &Volume, mask: &Mask, all: &[Tile], order: &[usize]) -> Result<ProbabilityMap> {
    check_dims("predict_volume", vol.dims(), mask.dims())?;
    let geom = net.geometry();
    let out = net.config.out_block;
    let half = out / 2;
    let dims = vol.dims();

    let blocks: Vec<Result<Vec<(usize, Tensor<f32>)>>> = order
        .par_chunks(TILE_BATCH)
        .map(|chunk| {
            let patches: Vec<_> = chunk.iter().map(|&i| extract_patches(vol, all[i].center, &geom)).collect();
            let input = NetInput::<f32>::from_patches(patches.iter().map(|p| p.as_slice()))?;
            let (logits, _) = net.forward(&input, Mode::Infer)?;
            let probs = softmax(&logits);
            Ok(chunk.iter().enumerate().map(|(j, &i)| (i, single(&probs, j))).collect())
        })
        .collect();

    let mut pm = ProbabilityMap::certain(vol.geometry().clone(), Label::Background);
    let probs = pm.probs_mut();
    let s = out * out * out;
    for batch in blocks {
        for (i, block) in batch? {
            let t = &all[i];
            for z in t.owned[2].0..t.owned[2].1 {
                for y in t.owned[1].0..t.owned[1].1 {
                    for x in t.owned[0].0..t.owned[0].1 {
                        let idx = x + dims[0] * (y + dims[1] * z);
                        if !mask.get(idx) {
                            continue;
                        }
                        let bz = z + half - t.center[2];
                        let by = y + half - t.center[1];
                        let bx = x + half - t.center[0];
                        let v = (bz * out + by) * out + bx;
                        for c in 0..NUM_CLASSES {
                            probs[idx * NUM_CLASSES + c] = block.data()[c * s + v];
                        }
                    }
                }
            }
        }
    }
    Ok(pm)
}

fn single(t: &Tensor<f32>, n: usize) -> Tensor<f32> {
    let sp = t.spatial();
    Tensor::from_vec([1, t.channels(), sp[0], sp[1], sp[2]], t.sample(n).to_vec()).expect("shape of one sample")
}
