//! Case directories: `<id>_image.<ext>` next to `<id>_labels.<ext>`, where
//! `<ext>` is `nrrd` or `json` (raw + JSON sidecar).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use usseg::eval::EvalCase;
use usseg::volume::{compute_mask, read_labelmap, read_volume, standardize};
use usseg::{LabelMap, Mask, Volume};

const IMAGE_SUFFIX: &str = "_image";
const LABEL_SUFFIX: &str = "_labels";

pub struct CaseFiles {
    pub id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
}

pub fn scan(dir: &Path) -> Result<Vec<CaseFiles>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).with_context(|| format!("reading data directory {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        if !matches!(ext, "nrrd" | "json") {
            continue;
        }
        if let Some(id) = stem.strip_suffix(IMAGE_SUFFIX) {
            let labels = path.with_file_name(format!("{id}{LABEL_SUFFIX}.{ext}"));
            if !labels.exists() {
                bail!(usseg::Error::Config(format!("image {} has no matching labels file", path.display())));
            }
            out.push(CaseFiles {
                id: id.to_string(),
                image: path,
                labels,
            });
        }
    }
    if out.is_empty() {
        bail!(usseg::Error::Config(format!("no `*{IMAGE_SUFFIX}.nrrd|json` cases in {}", dir.display())));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

pub fn case_paths(dir: &Path, id: &str, ext: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{id}{IMAGE_SUFFIX}.{ext}")),
        dir.join(format!("{id}{LABEL_SUFFIX}.{ext}")),
    )
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let lm = read_labelmap(path)?;
    Ok(Mask::new(lm.dims(), lm.labels().iter().map(|&l| l != 0).collect())?)
}

pub fn mask_to_labelmap(mask: &Mask, like: &Volume) -> Result<LabelMap> {
    Ok(LabelMap::new(
        like.geometry().clone(),
        mask.bits().iter().map(|&b| u8::from(b)).collect(),
    )?)
}

/// Mask from the given file or from the intensities, then standardization
/// inside it. Standardizing an already standardized volume is a no-op.
pub fn prepare(vol: &Volume, mask: Option<&Path>) -> Result<(Volume, Mask)> {
    let mask = match mask {
        Some(p) => read_mask(p)?,
        None => compute_mask(vol),
    };
    let std = standardize(vol, &mask)?;
    Ok((std, mask))
}

pub fn load_cases(dir: &Path) -> Result<Vec<EvalCase>> {
    scan(dir)?
        .into_iter()
        .map(|f| {
            let raw = read_volume(&f.image)?;
            let labels = read_labelmap(&f.labels)?;
            let (volume, mask) = prepare(&raw, None).with_context(|| format!("preparing case {}", f.id))?;
            Ok(EvalCase {
                id: f.id,
                volume,
                labels,
                mask,
            })
        })
        .collect()
}
