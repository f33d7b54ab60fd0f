//! Orthomosaic rasters, species masks and their partition into aligned patches.

use crate::error::{Error, Result};
use image::{DynamicImage, ExtendedColorType, ImageError, ImageFormat};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;

/// Edge length of a model patch in pixels.
pub const PATCH_SIZE: usize = 64;
pub const DEFAULT_BRIGHTNESS_THRESHOLD: f64 = 160.0;
pub const DEFAULT_BLANK_THRESHOLD: f64 = 0.25;

/// Row-major RGBA imagery. Alpha 0 marks a blank (no-data) pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbRaster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 4]>,
    pub resolution_cm_per_px: Option<f64>,
}

/// Row-major binary map; 1 marks the target species.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRaster {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub x: usize,
    pub y: usize,
}

impl RgbRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 4]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}×{height} raster needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(RgbRaster {
            width,
            height,
            pixels,
            resolution_cm_per_px: None,
        })
    }

    pub fn filled(width: usize, height: usize, rgba: [u8; 4]) -> Self {
        RgbRaster {
            width,
            height,
            pixels: vec![rgba; width * height],
            resolution_cm_per_px: None,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 4] {
        self.pixels[y * self.width + x]
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::Dimension(format!(
                "crop {width}×{height} at ({x},{y}) exceeds {}×{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for row in y..y + height {
            let start = row * self.width + x;
            pixels.extend_from_slice(&self.pixels[start..start + width]);
        }
        Ok(RgbRaster {
            width,
            height,
            pixels,
            resolution_cm_per_px: self.resolution_cm_per_px,
        })
    }

    pub fn is_opaque(&self) -> bool {
        self.pixels.iter().all(|p| p[3] == 255)
    }
}

impl MaskRaster {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}×{height} mask needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Argument("mask values must be 0 or 1".into()));
        }
        Ok(MaskRaster {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        MaskRaster {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::Dimension(format!(
                "crop {width}×{height} at ({x},{y}) exceeds {}×{}",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(width * height);
        for row in y..y + height {
            let start = row * self.width + x;
            values.extend_from_slice(&self.values[start..start + width]);
        }
        Ok(MaskRaster {
            width,
            height,
            values,
        })
    }
}

fn read_png(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_png(path: &Path, buf: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<()> {
    image::save_buffer_with_format(path, buf, w as u32, h as u32, color, ImageFormat::Png).map_err(
        |e| match e {
            ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        },
    )
}

/// Loads 8-bit RGB or RGBA imagery. RGB input gains an opaque alpha channel.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbRaster> {
    let path = path.as_ref();
    let (w, h, pixels) = match read_png(path)? {
        DynamicImage::ImageRgb8(img) => (
            img.width(),
            img.height(),
            img.pixels().map(|p| [p[0], p[1], p[2], 255]).collect(),
        ),
        DynamicImage::ImageRgba8(img) => (img.width(), img.height(), img.pixels().map(|p| p.0).collect()),
        other => {
            return Err(Error::Format(format!(
                "{}: expected 8-bit RGB or RGBA, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    RgbRaster::new(w as usize, h as usize, pixels)
}

/// Writes RGB when every pixel is opaque, RGBA otherwise.
pub fn save_rgb(raster: &RgbRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if raster.is_opaque() {
        let buf: Vec<u8> = raster.pixels.iter().flat_map(|p| [p[0], p[1], p[2]]).collect();
        write_png(path, &buf, raster.width, raster.height, ExtendedColorType::Rgb8)
    } else {
        let buf: Vec<u8> = raster.pixels.iter().flatten().copied().collect();
        write_png(path, &buf, raster.width, raster.height, ExtendedColorType::Rgba8)
    }
}

fn binarize(luma: u8) -> u8 {
    u8::from(luma >= 128)
}

/// Rounded mean of the three colour samples.
fn rgb_luma(r: u8, g: u8, b: u8) -> u8 {
    ((r as u16 + g as u16 + b as u16 + 1) / 3) as u8
}

/// Loads a species map: 1 where luma ≥ 128, else 0.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskRaster> {
    let path = path.as_ref();
    let img = read_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<u8> = match img {
        DynamicImage::ImageLuma8(img) => img.pixels().map(|p| binarize(p[0])).collect(),
        DynamicImage::ImageLumaA8(img) => img.pixels().map(|p| binarize(p[0])).collect(),
        DynamicImage::ImageRgb8(img) => img
            .pixels()
            .map(|p| binarize(rgb_luma(p[0], p[1], p[2])))
            .collect(),
        DynamicImage::ImageRgba8(img) => img
            .pixels()
            .map(|p| binarize(rgb_luma(p[0], p[1], p[2])))
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: expected 8-bit grayscale or RGB mask, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    MaskRaster::new(w, h, values)
}

/// Writes a mask as 8-bit grayscale with 0 → 0 and 1 → 255.
pub fn save_mask(mask: &MaskRaster, path: impl AsRef<Path>) -> Result<()> {
    let buf: Vec<u8> = mask.values.iter().map(|&v| v * 255).collect();
    write_png(path.as_ref(), &buf, mask.width, mask.height, ExtendedColorType::L8)
}

/// One aligned image/target crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: PatchOrigin,
    pub image: RgbRaster,
    pub target: MaskRaster,
}

/// Window origins along one axis: `0, stride, 2·stride, …` while the window fits.
pub fn grid_positions(extent: usize, patch: usize, stride: usize) -> impl Iterator<Item = usize> {
    let count = if patch == 0 || stride == 0 || patch > extent {
        0
    } else {
        (extent - patch) / stride + 1
    };
    (0..count).map(move |i| i * stride)
}

/// Cuts an image and its species map into aligned square windows on a
/// regular grid. Windows that would cross the border are dropped.
pub fn partition(
    image: &RgbRaster,
    mask: &MaskRaster,
    patch: usize,
    stride: usize,
) -> Result<Vec<Patch>> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::Dimension(format!(
            "image is {}×{} but mask is {}×{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    if patch == 0 || stride == 0 {
        return Err(Error::Argument(format!(
            "patch ({patch}) and stride ({stride}) must be positive"
        )));
    }
    if patch > image.width.min(image.height) {
        return Err(Error::Argument(format!(
            "patch {patch} larger than {}×{} input",
            image.width, image.height
        )));
    }
    let mut out = Vec::new();
    for y in grid_positions(image.height, patch, stride) {
        for x in grid_positions(image.width, patch, stride) {
            out.push(Patch {
                origin: PatchOrigin { x, y },
                image: image.crop(x, y, patch, patch)?,
                target: mask.crop(x, y, patch, patch)?,
            });
        }
    }
    Ok(out)
}

/// Mean over every R, G and B sample; alpha is ignored.
pub fn mean_brightness(image: &RgbRaster) -> f64 {
    if image.pixels.is_empty() {
        return 0.0;
    }
    let total: u64 = image
        .pixels
        .iter()
        .map(|p| p[0] as u64 + p[1] as u64 + p[2] as u64)
        .sum();
    total as f64 / (3 * image.pixels.len()) as f64
}

pub fn blank_fraction(image: &RgbRaster) -> f64 {
    if image.pixels.is_empty() {
        return 0.0;
    }
    image.pixels.iter().filter(|p| p[3] == 0).count() as f64 / image.pixels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    Brightness,
    Blank,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Brightness => "brightness",
            RejectReason::Blank => "blank",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub origin: PatchOrigin,
    pub reason: RejectReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub brightness_threshold: f64,
    pub blank_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            brightness_threshold: DEFAULT_BRIGHTNESS_THRESHOLD,
            blank_threshold: DEFAULT_BLANK_THRESHOLD,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=255.0).contains(&self.brightness_threshold) {
            return Err(Error::Config(format!(
                "brightness threshold {} outside [0, 255]",
                self.brightness_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.blank_threshold) {
            return Err(Error::Config(format!(
                "blank threshold {} outside [0, 1]",
                self.blank_threshold
            )));
        }
        Ok(())
    }
}

/// Drops patches that show mostly bare ground (too bright) or mostly no-data.
/// Order of the kept patches is preserved.
pub fn filter_patches(patches: Vec<Patch>, config: &FilterConfig) -> (Vec<Patch>, Vec<Rejection>) {
    let mut kept = Vec::with_capacity(patches.len());
    let mut log = Vec::new();
    for p in patches {
        let reason = if mean_brightness(&p.image) > config.brightness_threshold {
            Some(RejectReason::Brightness)
        } else if blank_fraction(&p.image) > config.blank_threshold {
            Some(RejectReason::Blank)
        } else {
            None
        };
        match reason {
            Some(reason) => log.push(Rejection {
                origin: p.origin,
                reason,
            }),
            None => kept.push(p),
        }
    }
    (kept, log)
}

/// Writes `origin_x,origin_y,reason` lines.
pub fn write_rejection_log(rejections: &[Rejection], mut out: impl Write) -> std::io::Result<()> {
    for r in rejections {
        writeln!(out, "{},{},{}", r.origin.x, r.origin.y, r.reason)?;
    }
    Ok(())
}
