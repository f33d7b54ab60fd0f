//! Glue from a raw scene to labelled patch samples.

use crate::dataset::PatchSample;
use crate::error::Result;
use crate::raster::{filter_patches, partition, FilterConfig, MaskRaster, PatchOrigin, Rejection, RgbRaster, PATCH_SIZE};

pub struct Prepared {
    pub samples: Vec<(PatchSample, PatchOrigin)>,
    pub rejections: Vec<Rejection>,
}

/// Id of the patch cut from `source` at `origin`.
pub fn patch_id(source: &str, origin: PatchOrigin) -> String {
    format!("{source}_{:05}_{:05}", origin.x, origin.y)
}

/// Partitions a scene into non-overlapping 64×64 patches, drops bright or
/// blank ones and labels the rest.
pub fn prepare_samples(
    image: &RgbRaster,
    mask: &MaskRaster,
    source: &str,
    filter: &FilterConfig,
) -> Result<Prepared> {
    filter.validate()?;
    let patches = partition(image, mask, PATCH_SIZE, PATCH_SIZE)?;
    let (kept, rejections) = filter_patches(patches, filter);
    let samples = kept
        .into_iter()
        .map(|p| Ok((PatchSample::new(patch_id(source, p.origin), p.image, p.target)?, p.origin)))
        .collect::<Result<_>>()?;
    Ok(Prepared { samples, rejections })
}
