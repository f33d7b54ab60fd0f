//! Synthetic two-species canopy scenes.
//!
//! The majority species is a dark-green field of shaded crowns; the minority
//! species appears as yellow-green elliptical blobs. Optional sandy ground
//! cells are bright enough for the brightness filter to discard them.

use crate::error::{Error, Result};
use crate::raster::{self, MaskRaster, RgbRaster, PATCH_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAJORITY_RGB: [f64; 3] = [46.0, 84.0, 38.0];
const MINORITY_RGB: [f64; 3] = [112.0, 142.0, 52.0];
const GROUND_RGB: [f64; 3] = [222.0, 206.0, 178.0];
const CROWN_SPACING: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub minority_fraction_target: f64,
    /// The blob budget is drawn uniformly from this inclusive range.
    pub blob_count_range: [usize; 2],
    /// Ellipse semi-axes are drawn from this range, in pixels.
    pub blob_radius_range: [f64; 2],
    /// Chance that a 64×64 grid cell is bare ground.
    pub ground_patch_probability: f64,
    pub texture_noise_amplitude: u8,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 512,
            height: 512,
            minority_fraction_target: 0.10,
            blob_count_range: [500, 2000],
            blob_radius_range: [4.0, 12.0],
            ground_patch_probability: 0.05,
            texture_noise_amplitude: 25,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < PATCH_SIZE || self.height < PATCH_SIZE {
            return Err(Error::Config(format!(
                "scene must be at least {PATCH_SIZE}×{PATCH_SIZE}, got {}×{}",
                self.width, self.height
            )));
        }
        if !(self.minority_fraction_target > 0.0 && self.minority_fraction_target < 1.0) {
            return Err(Error::Config(format!(
                "minority_fraction_target {} outside (0, 1)",
                self.minority_fraction_target
            )));
        }
        let [lo, hi] = self.blob_count_range;
        if lo > hi {
            return Err(Error::Config("blob_count_range is inverted".into()));
        }
        let [rlo, rhi] = self.blob_radius_range;
        if !(rlo >= 1.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::Config(format!(
                "blob_radius_range [{rlo}, {rhi}] must satisfy 1 ≤ lo ≤ hi"
            )));
        }
        if !(0.0..=1.0).contains(&self.ground_patch_probability) {
            return Err(Error::Config("ground_patch_probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// A generated scene and its species map.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbRaster,
    pub mask: MaskRaster,
    pub achieved_minority_fraction: f64,
    /// Origins of the 64×64 cells filled with ground.
    pub ground_cells: Vec<[usize; 2]>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a SceneConfig,
    achieved_minority_fraction: f64,
    ground_cells: &'a [[usize; 2]],
}

impl Scene {
    /// Writes `<id>.img.png`, `<id>.tgt.png` and `<id>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, id: &str, config: &SceneConfig) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        raster::save_rgb(&self.image, dir.join(format!("{id}.img.png")))?;
        raster::save_mask(&self.mask, dir.join(format!("{id}.tgt.png")))?;
        let sidecar = Sidecar {
            config,
            achieved_minority_fraction: self.achieved_minority_fraction,
            ground_cells: &self.ground_cells,
        };
        let path = dir.join(format!("{id}.json"));
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Crown-shading factor for the majority canopy: bright crown centres,
/// darker gaps between crowns.
fn crown_field(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gx = w / CROWN_SPACING + 2;
    let gy = h / CROWN_SPACING + 2;
    let crowns: Vec<(f64, f64, f64)> = (0..gx * gy)
        .map(|i| {
            let (cx, cy) = ((i % gx) as f64, (i / gx) as f64);
            let s = CROWN_SPACING as f64;
            (
                (cx + rng.gen_range(0.0..1.0)) * s - s / 2.0,
                (cy + rng.gen_range(0.0..1.0)) * s - s / 2.0,
                rng.gen_range(0.55..0.9) * s,
            )
        })
        .collect();
    let mut field = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = (x / CROWN_SPACING, y / CROWN_SPACING);
            let mut best: f64 = 0.0;
            for j in cy..(cy + 3).min(gy) {
                for i in cx..(cx + 3).min(gx) {
                    let (px, py, r) = crowns[j * gx + i];
                    let d2 = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)) / (r * r);
                    best = best.max(1.0 - d2);
                }
            }
            field[y * w + x] = 0.6 + 0.5 * best.max(0.0);
        }
    }
    field
}

/// Generates a scene. Deterministic for a given config (including seed).
pub fn generate(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let total = w * h;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut ground = vec![false; total];
    let mut ground_cells = Vec::new();
    for cy in (0..=h - PATCH_SIZE).step_by(PATCH_SIZE) {
        for cx in (0..=w - PATCH_SIZE).step_by(PATCH_SIZE) {
            if rng.gen_bool(config.ground_patch_probability) {
                ground_cells.push([cx, cy]);
                for y in cy..cy + PATCH_SIZE {
                    ground[y * w + cx..y * w + cx + PATCH_SIZE].fill(true);
                }
            }
        }
    }

    let shade = crown_field(w, h, &mut rng);
    // minority shading per pixel; zero means "not minority"
    let mut blob_shade = vec![0.0f64; total];
    let target_px = config.minority_fraction_target * total as f64;
    let ceiling = 1.2 * target_px;
    let [blo, bhi] = config.blob_count_range;
    let budget = rng.gen_range(blo..=bhi);
    let mut count = 0usize;
    let [rlo, rhi] = config.blob_radius_range;
    for _ in 0..budget {
        if count as f64 >= target_px {
            break;
        }
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let a = rng.gen_range(rlo..=rhi);
        let b = rng.gen_range(rlo..=rhi);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        let reach = a.max(b).ceil() as isize;
        let mut fresh = Vec::new();
        for y in (cy as isize - reach).max(0)..(cy as isize + reach + 1).min(h as isize) {
            for x in (cx as isize - reach).max(0)..(cx as isize + reach + 1).min(w as isize) {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                let r2 = u * u + v * v;
                let idx = y as usize * w + x as usize;
                if r2 <= 1.0 && !ground[idx] && blob_shade[idx] == 0.0 {
                    fresh.push((idx, 0.75 + 0.35 * (1.0 - r2)));
                }
            }
        }
        if (count + fresh.len()) as f64 > ceiling {
            continue;
        }
        count += fresh.len();
        for (idx, s) in fresh {
            blob_shade[idx] = s;
        }
    }

    let amp = config.texture_noise_amplitude as i32;
    let mut pixels = Vec::with_capacity(total);
    let mut values = Vec::with_capacity(total);
    for i in 0..total {
        let (base, factor, is_minority) = if ground[i] {
            (GROUND_RGB, 1.0, false)
        } else if blob_shade[i] > 0.0 {
            (MINORITY_RGB, blob_shade[i], true)
        } else {
            (MAJORITY_RGB, shade[i], false)
        };
        let mut px = [0u8, 0, 0, 255];
        for c in 0..3 {
            let noise = if amp == 0 { 0 } else { rng.gen_range(-amp..=amp) };
            px[c] = (base[c] * factor + noise as f64).round().clamp(0.0, 255.0) as u8;
        }
        pixels.push(px);
        values.push(u8::from(is_minority));
    }
    let mask = MaskRaster::new(w, h, values)?;
    Ok(Scene {
        image: RgbRaster::new(w, h, pixels)?,
        achieved_minority_fraction: count as f64 / total as f64,
        mask,
        ground_cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::mean_brightness;

    #[test]
    fn hits_target_fraction() {
        let s = generate(&SceneConfig::default()).unwrap();
        assert!(
            (0.08..=0.12).contains(&s.achieved_minority_fraction),
            "{}",
            s.achieved_minority_fraction
        );
        let ones = s.mask.values.iter().filter(|&&v| v == 1).count();
        assert_eq!(ones as f64 / (512.0 * 512.0), s.achieved_minority_fraction);
    }

    #[test]
    fn no_blobs_means_empty_mask() {
        let cfg = SceneConfig {
            blob_count_range: [0, 0],
            ..SceneConfig::default()
        };
        let s = generate(&cfg).unwrap();
        assert!(s.mask.values.iter().all(|&v| v == 0));
        assert_eq!(s.achieved_minority_fraction, 0.0);
    }

    #[test]
    fn deterministic() {
        let cfg = SceneConfig {
            seed: 77,
            width: 128,
            height: 96,
            ..SceneConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn ground_is_bright_and_canopy_dark() {
        let cfg = SceneConfig {
            ground_patch_probability: 0.3,
            seed: 5,
            ..SceneConfig::default()
        };
        let s = generate(&cfg).unwrap();
        assert!(!s.ground_cells.is_empty());
        for &[x, y] in &s.ground_cells {
            let cell = s.image.crop(x, y, 64, 64).unwrap();
            assert!(mean_brightness(&cell) > 200.0);
        }
        for y in (0..512).step_by(64) {
            for x in (0..512).step_by(64) {
                if !s.ground_cells.contains(&[x, y]) {
                    let cell = s.image.crop(x, y, 64, 64).unwrap();
                    assert!(mean_brightness(&cell) < 160.0);
                }
            }
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SceneConfig { width: 32, ..SceneConfig::default() },
            SceneConfig { minority_fraction_target: 1.0, ..SceneConfig::default() },
            SceneConfig { blob_count_range: [5, 1], ..SceneConfig::default() },
            SceneConfig { ground_patch_probability: 1.5, ..SceneConfig::default() },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
    }
}
