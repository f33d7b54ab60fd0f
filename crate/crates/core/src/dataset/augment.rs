use super::PatchSample;
use crate::error::{Error, Result};
use crate::raster::RgbRaster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Augmentation settings. Spatial transforms are interpolation-free and hit
/// image and target alike; photometric ones touch the image only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rot90: bool,
    pub flips: bool,
    /// Multiplicative brightness factor range.
    pub brightness_range: [f64; 2],
    /// Blend factor between the image and its 3×3 unsharp-masked version.
    pub sharpness_range: [f64; 2],
    /// Per-channel multiplicative gain range.
    pub color_gain_range: [f64; 2],
    /// Per-channel additive shift is drawn from `-max..=max`.
    pub channel_shift_max: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rot90: true,
            flips: true,
            brightness_range: [0.8, 1.2],
            sharpness_range: [0.0, 0.5],
            color_gain_range: [0.9, 1.1],
            channel_shift_max: 10,
        }
    }
}

impl AugmentConfig {
    /// Leaves every sample untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            rot90: false,
            flips: false,
            brightness_range: [1.0, 1.0],
            sharpness_range: [0.0, 0.0],
            color_gain_range: [1.0, 1.0],
            channel_shift_max: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("brightness_range", self.brightness_range),
            ("sharpness_range", self.sharpness_range),
            ("color_gain_range", self.color_gain_range),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] is not a valid range")));
            }
            if lo < 0.0 {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// A flip followed by a number of clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialTransform {
    pub quarter_turns: u8,
    pub flip: Flip,
}

impl SpatialTransform {
    pub const IDENTITY: SpatialTransform = SpatialTransform {
        quarter_turns: 0,
        flip: Flip::None,
    };

    pub fn inverse(self) -> Self {
        match self.flip {
            Flip::None => SpatialTransform {
                quarter_turns: (4 - self.quarter_turns % 4) % 4,
                flip: Flip::None,
            },
            // a reflection followed by a rotation is its own inverse
            _ => self,
        }
    }

    /// Applies the transform to a square row-major grid.
    pub fn apply<P: Copy>(self, grid: &[P], size: usize) -> Vec<P> {
        assert_eq!(grid.len(), size * size, "grid must be square");
        let mut out: Vec<P> = match self.flip {
            Flip::None => grid.to_vec(),
            Flip::Horizontal => (0..size * size)
                .map(|i| grid[(i / size) * size + size - 1 - i % size])
                .collect(),
            Flip::Vertical => (0..size * size)
                .map(|i| grid[(size - 1 - i / size) * size + i % size])
                .collect(),
        };
        for _ in 0..self.quarter_turns % 4 {
            out = rotate_cw(&out, size);
        }
        out
    }
}

fn rotate_cw<P: Copy>(grid: &[P], size: usize) -> Vec<P> {
    (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            grid[(size - 1 - x) * size + y]
        })
        .collect()
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// 3×3 box blur with edge replication, one channel.
fn box3(plane: &[f32], w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += plane[sy * w + sx];
                }
            }
            out[y * w + x] = acc / 9.0;
        }
    }
    out
}

struct Photometric {
    brightness: f64,
    sharpness: f64,
    gains: [f64; 3],
    shifts: [i32; 3],
}

fn photometric(image: &RgbRaster, p: &Photometric) -> RgbRaster {
    let (w, h) = (image.width, image.height);
    let mut out = image.clone();
    for c in 0..3 {
        let mut plane: Vec<f32> = image
            .pixels
            .iter()
            .map(|px| px[c] as f32 * p.brightness as f32)
            .collect();
        if p.sharpness != 0.0 {
            let blurred = box3(&plane, w, h);
            let s = p.sharpness as f32;
            for (v, b) in plane.iter_mut().zip(blurred) {
                let sharp = 2.0 * *v - b;
                *v = (1.0 - s) * *v + s * sharp;
            }
        }
        let (gain, shift) = (p.gains[c] as f32, p.shifts[c] as f32);
        for (px, v) in out.pixels.iter_mut().zip(plane) {
            px[c] = (v * gain + shift).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Draws one spatial transform and one set of photometric parameters from
/// `seed` and applies them. The target only ever sees the spatial part.
pub fn augment(sample: &PatchSample, config: &AugmentConfig, seed: u64) -> PatchSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turns = if config.rot90 { rng.gen_range(0..4u8) } else { 0 };
    let flip = if config.flips {
        [Flip::None, Flip::Horizontal, Flip::Vertical][rng.gen_range(0..3usize)]
    } else {
        Flip::None
    };
    let params = Photometric {
        brightness: draw(&mut rng, config.brightness_range),
        sharpness: draw(&mut rng, config.sharpness_range),
        gains: [(); 3].map(|_| draw(&mut rng, config.color_gain_range)),
        shifts: [(); 3].map(|_| {
            let m = config.channel_shift_max as i32;
            if m == 0 {
                0
            } else {
                rng.gen_range(-m..=m)
            }
        }),
    };
    let t = SpatialTransform {
        quarter_turns: turns,
        flip,
    };
    let mut out = apply_spatial(sample, t);
    out.image = photometric(&out.image, &params);
    out
}

/// Applies a spatial transform to both image and target.
pub fn apply_spatial(sample: &PatchSample, t: SpatialTransform) -> PatchSample {
    let size = sample.image.width;
    let mut out = sample.clone();
    out.image.pixels = t.apply(&sample.image.pixels, size);
    out.target.values = t.apply(&sample.target.values, size);
    out
}
