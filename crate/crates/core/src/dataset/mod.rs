//! Labelled patch samples, coverage categories, stratified splits and augmentation.

mod augment;
mod split;
mod store;

pub use augment::{apply_spatial, augment, AugmentConfig, Flip, SpatialTransform};
pub use split::{stratified_split, ManifestEntry, SplitManifest, DEFAULT_RATIOS};
pub use store::{IndexEntry, PatchIndex, PatchStore};

use crate::error::{Error, Result};
use crate::raster::{MaskRaster, RgbRaster, PATCH_SIZE};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Pixels in one model patch.
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;

/// Patch classification by the share of target-species pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CoverageCategory {
    C0,
    C1_20,
    C21_50,
    C51_80,
    C81_100,
}

impl CoverageCategory {
    pub const ALL: [CoverageCategory; 5] = [
        CoverageCategory::C0,
        CoverageCategory::C1_20,
        CoverageCategory::C21_50,
        CoverageCategory::C51_80,
        CoverageCategory::C81_100,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CoverageCategory::C0 => "C0",
            CoverageCategory::C1_20 => "C1_20",
            CoverageCategory::C21_50 => "C21_50",
            CoverageCategory::C51_80 => "C51_80",
            CoverageCategory::C81_100 => "C81_100",
        }
    }

    /// Column heading used in reports.
    pub fn label(self) -> &'static str {
        match self {
            CoverageCategory::C0 => "0%",
            CoverageCategory::C1_20 => "1-20%",
            CoverageCategory::C21_50 => "21-50%",
            CoverageCategory::C51_80 => "51-80%",
            CoverageCategory::C81_100 => "81-100%",
        }
    }
}

impl fmt::Display for CoverageCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bins a 64×64 patch by its count of target pixels. Upper bounds are the
/// floors of 20%, 50% and 80% of 4096.
pub fn categorize(coverage_px: usize) -> Result<CoverageCategory> {
    let bound = |pct: usize| pct * PATCH_PIXELS / 100;
    Ok(match coverage_px {
        0 => CoverageCategory::C0,
        c if c <= bound(20) => CoverageCategory::C1_20,
        c if c <= bound(50) => CoverageCategory::C21_50,
        c if c <= bound(80) => CoverageCategory::C51_80,
        c if c <= PATCH_PIXELS => CoverageCategory::C81_100,
        c => {
            return Err(Error::Argument(format!(
                "coverage {c} exceeds {PATCH_PIXELS} pixels"
            )))
        }
    })
}

/// Number of target pixels.
pub fn coverage(target: &MaskRaster) -> usize {
    target.values.iter().filter(|&&v| v == 1).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

/// A 64×64 image/target pair with its coverage bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub id: String,
    pub image: RgbRaster,
    pub target: MaskRaster,
    pub coverage_px: usize,
    pub category: CoverageCategory,
    pub split: Split,
}

impl PatchSample {
    pub fn new(id: impl Into<String>, image: RgbRaster, target: MaskRaster) -> Result<Self> {
        for (what, w, h) in [
            ("image", image.width, image.height),
            ("target", target.width, target.height),
        ] {
            if (w, h) != (PATCH_SIZE, PATCH_SIZE) {
                return Err(Error::Dimension(format!(
                    "{what} is {w}×{h}, samples must be {PATCH_SIZE}×{PATCH_SIZE}"
                )));
            }
        }
        let coverage_px = coverage(&target);
        Ok(PatchSample {
            id: id.into(),
            image,
            target,
            coverage_px,
            category: categorize(coverage_px)?,
            split: Split::Unassigned,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn category_boundaries() {
        assert_eq!(categorize(0).unwrap(), CoverageCategory::C0);
        assert_eq!(categorize(1).unwrap(), CoverageCategory::C1_20);
        assert_eq!(categorize(819).unwrap(), CoverageCategory::C1_20);
        assert_eq!(categorize(820).unwrap(), CoverageCategory::C21_50);
        assert_eq!(categorize(2048).unwrap(), CoverageCategory::C21_50);
        assert_eq!(categorize(2049).unwrap(), CoverageCategory::C51_80);
        assert_eq!(categorize(3276).unwrap(), CoverageCategory::C51_80);
        assert_eq!(categorize(3277).unwrap(), CoverageCategory::C81_100);
        assert_eq!(categorize(4096).unwrap(), CoverageCategory::C81_100);
        assert!(matches!(categorize(4097), Err(Error::Argument(_))));
    }

    #[test]
    fn coverage_counts() {
        assert_eq!(coverage(&MaskRaster::zeros(64, 64)), 0);
        assert_eq!(coverage(&MaskRaster::new(64, 64, vec![1; 4096]).unwrap()), 4096);
        let mut one = MaskRaster::zeros(64, 64);
        one.values[1234] = 1;
        assert_eq!(coverage(&one), 1);
    }

    #[test]
    fn sample_rejects_wrong_size() {
        let img = RgbRaster::filled(32, 64, [0, 0, 0, 255]);
        assert!(matches!(
            PatchSample::new("a", img, MaskRaster::zeros(64, 64)),
            Err(Error::Dimension(_))
        ));
    }

    proptest! {
        #[test]
        fn categorize_monotone(a in 0usize..=4096, b in 0usize..=4096) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(categorize(lo).unwrap() <= categorize(hi).unwrap());
        }
    }
}
