use crate::dataset::{coverage, PATCH_PIXELS};
use crate::error::{Error, Result};
use crate::raster::MaskRaster;

pub const DEFAULT_LOSS_A: f64 = 400.0;

/// Per-patch loss multiplier `coverage / a + 1`: patches holding more
/// minority pixels are penalised harder.
pub fn loss_weight(target: &MaskRaster, a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::Argument(format!("loss scale a must be positive, got {a}")));
    }
    Ok(coverage(target) as f64 / a + 1.0)
}

/// Scale `a` derived from dataset totals: the minority/majority pixel ratio
/// times the pixels in one patch.
pub fn default_a(total_invasive_px: u64, total_non_invasive_px: u64) -> Result<f64> {
    if total_non_invasive_px == 0 {
        return Err(Error::Argument(
            "no non-invasive pixels; ratio is undefined".into(),
        ));
    }
    Ok(total_invasive_px as f64 / total_non_invasive_px as f64 * PATCH_PIXELS as f64)
}
