//! Pixel confusion rates, threshold calibration and coverage-bucketed detection.

use crate::dataset::{categorize, coverage, CoverageCategory, PatchSample};
use crate::error::{Error, Result};
use crate::model::UNet;
use crate::raster::{MaskRaster, RgbRaster};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Threshold used when none has been calibrated.
pub const DEFAULT_THRESHOLD: f64 = 0.85;

/// `0.05, 0.10, …, 0.95`.
pub fn default_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// Sensitivity `tp / (tp + fn)`.
    pub fn tp_rate(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fn_, "no positive pixels")
    }

    /// Specificity `tn / (tn + fp)`.
    pub fn tn_rate(&self) -> Result<f64> {
        ratio(self.tn, self.tn + self.fp, "no negative pixels")
    }
}

fn ratio(num: u64, den: u64, what: &str) -> Result<f64> {
    if den == 0 {
        return Err(Error::Degenerate(what.into()));
    }
    Ok(num as f64 / den as f64)
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Argument(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(())
}

/// A pixel is predicted positive when its probability is at least `threshold`.
pub fn pixel_confusion(pred: &[f32], target: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_threshold(threshold)?;
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} target pixels",
            pred.len(),
            target.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (p as f64 >= threshold, t == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// A probability map together with the target it should reproduce.
#[derive(Clone, Copy, Debug)]
pub struct Prediction<'a> {
    pub target: &'a MaskRaster,
    pub probs: &'a [f32],
}

pub fn pooled_confusion(preds: &[Prediction<'_>], threshold: f64) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::default();
    for p in preds {
        total.merge(&pixel_confusion(p.probs, &p.target.values, threshold)?);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub tp_rate: f64,
    pub tn_rate: f64,
    pub youden_j: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub grid: Vec<ThresholdRow>,
    pub chosen_threshold: f64,
}

/// Picks the grid threshold maximising Youden's J on pooled pixel counts;
/// ties go to the lowest threshold.
pub fn calibrate_from_predictions(preds: &[Prediction<'_>], grid: &[f64]) -> Result<ThresholdReport> {
    if preds.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    if grid.is_empty() {
        return Err(Error::Argument("calibration grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut rows = Vec::with_capacity(sorted.len());
    for &t in &sorted {
        let counts = pooled_confusion(preds, t)?;
        let (tp_rate, tn_rate) = match (counts.tp_rate(), counts.tn_rate()) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                return Err(Error::Data(format!("cannot calibrate: {e}")))
            }
        };
        rows.push(ThresholdRow {
            threshold: t,
            counts,
            tp_rate,
            tn_rate,
            youden_j: tp_rate + tn_rate - 1.0,
        });
    }
    let mut best = &rows[0];
    for r in &rows[1..] {
        if r.youden_j > best.youden_j {
            best = r;
        }
    }
    Ok(ThresholdReport {
        chosen_threshold: best.threshold,
        grid: rows,
    })
}

/// Runs the model on a validation set and calibrates on its predictions.
pub fn calibrate_threshold(model: &UNet<f32>, validation: &[PatchSample], grid: &[f64]) -> Result<ThresholdReport> {
    if validation.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let images: Vec<_> = validation.iter().map(|s| &s.image).collect();
    let probs = model.predict_all(&images, 16)?;
    let preds: Vec<_> = validation
        .iter()
        .zip(&probs)
        .map(|(s, p)| Prediction {
            target: &s.target,
            probs: p,
        })
        .collect();
    calibrate_from_predictions(&preds, grid)
}

/// When a patch counts as handled correctly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionRule {
    /// Minimum share of a patch's target pixels that must be hit, in percent.
    pub min_detected_percent: u32,
    /// Largest number of false-positive pixels tolerated on a patch without targets.
    pub zero_fp_tolerance: u64,
}

impl Default for DetectionRule {
    fn default() -> Self {
        DetectionRule {
            min_detected_percent: 10,
            zero_fp_tolerance: 40,
        }
    }
}

impl DetectionRule {
    /// Applies the rule to one patch's confusion counts.
    pub fn is_correct(&self, coverage_px: u64, counts: &ConfusionCounts) -> bool {
        if coverage_px == 0 {
            counts.fp <= self.zero_fp_tolerance
        } else {
            // tp ≥ ⌈pct · coverage / 100⌉
            100 * counts.tp >= self.min_detected_percent as u64 * coverage_px
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub category: CoverageCategory,
    pub patches: usize,
    pub detected: usize,
    /// `None` when the bucket is empty.
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub threshold: f64,
    pub rows: Vec<BucketRow>,
}

impl BucketReport {
    pub fn total_patches(&self) -> usize {
        self.rows.iter().map(|r| r.patches).sum()
    }
}

/// Per coverage category, the share of patches the model handles correctly.
pub fn bucket_detection(preds: &[Prediction<'_>], threshold: f64, rule: &DetectionRule) -> Result<BucketReport> {
    if preds.is_empty() {
        return Err(Error::Data("no patches to evaluate".into()));
    }
    let mut patches = [0usize; 5];
    let mut detected = [0usize; 5];
    for p in preds {
        let cov = coverage(p.target);
        let cat = categorize(cov)?;
        let counts = pixel_confusion(p.probs, &p.target.values, threshold)?;
        patches[cat.index()] += 1;
        if rule.is_correct(cov as u64, &counts) {
            detected[cat.index()] += 1;
        }
    }
    Ok(BucketReport {
        threshold,
        rows: CoverageCategory::ALL
            .iter()
            .map(|&c| BucketRow {
                category: c,
                patches: patches[c.index()],
                detected: detected[c.index()],
                rate: (patches[c.index()] > 0)
                    .then(|| detected[c.index()] as f64 / patches[c.index()] as f64),
            })
            .collect(),
    })
}

/// Blends every pixel predicted positive 50/50 with pure red.
pub fn overlay(image: &RgbRaster, probs: &[f32], threshold: f64) -> Result<RgbRaster> {
    if probs.len() != image.pixels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for a {}×{} image",
            probs.len(),
            image.width,
            image.height
        )));
    }
    let mut out = image.clone();
    for (px, &p) in out.pixels.iter_mut().zip(probs) {
        if p as f64 >= threshold {
            *px = blend_red(*px);
        }
    }
    Ok(out)
}

pub(crate) fn blend_red(px: [u8; 4]) -> [u8; 4] {
    let mix = |a: u8, b: u8| (a as u16 + b as u16).div_ceil(2) as u8;
    [mix(px[0], 255), mix(px[1], 0), mix(px[2], 0), px[3]]
}

/// Pixel-level and bucketed results on a held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub patches: usize,
    pub confusion: ConfusionCounts,
    pub tp_rate: Option<f64>,
    pub tn_rate: Option<f64>,
    pub buckets: BucketReport,
}

pub fn evaluate(preds: &[Prediction<'_>], threshold: f64, rule: &DetectionRule) -> Result<EvalReport> {
    let buckets = bucket_detection(preds, threshold, rule)?;
    let confusion = pooled_confusion(preds, threshold)?;
    Ok(EvalReport {
        threshold,
        patches: preds.len(),
        tp_rate: confusion.tp_rate().ok(),
        tn_rate: confusion.tn_rate().ok(),
        confusion,
        buckets,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |r| format!("{:.1}%", 100.0 * r))
}

impl EvalReport {
    /// Two plain-text tables: class rates, then detection per coverage bucket.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "threshold {:.2}, {} test patches", self.threshold, self.patches);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16}{:>10}", "", "Target");
        let _ = writeln!(s, "{:<16}{:>10}", "True Positive", pct(self.tp_rate));
        let _ = writeln!(s, "{:<16}{:>10}", "True Negative", pct(self.tn_rate));
        let _ = writeln!(s);
        let mut head = format!("{:<30}", "Target coverage (%)");
        let mut count = format!("{:<30}", "Patches");
        let mut rate = format!("{:<30}", "Detected >= 10% of target (%)");
        for r in &self.buckets.rows {
            let label = r.category.label().trim_end_matches('%');
            let _ = write!(head, "{label:>9}");
            let _ = write!(count, "{:>9}", r.patches);
            let _ = write!(
                rate,
                "{:>9}",
                r.rate.map_or_else(|| "n/a".into(), |v| format!("{:.2}", 100.0 * v))
            );
        }
        let _ = writeln!(s, "{head}\n{count}\n{rate}");
        s
    }
}

impl ThresholdReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:>9}{:>10}{:>10}{:>10}\n", "threshold", "tp_rate", "tn_rate", "J");
        for r in &self.grid {
            let mark = if r.threshold == self.chosen_threshold { "  <" } else { "" };
            let _ = writeln!(
                s,
                "{:>9.2}{:>10.4}{:>10.4}{:>10.4}{mark}",
                r.threshold, r.tp_rate, r.tn_rate, r.youden_j
            );
        }
        let _ = writeln!(s, "chosen threshold: {:.2}", self.chosen_threshold);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: u8) -> MaskRaster {
        MaskRaster::new(64, 64, vec![v; 4096]).unwrap()
    }

    #[test]
    fn uniform_confusion() {
        let p = vec![0.9f32; 4096];
        let c = pixel_confusion(&p, &mask(1).values, 0.85).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 4096, ..Default::default() });
        let c = pixel_confusion(&p, &mask(0).values, 0.85).unwrap();
        assert_eq!(c, ConfusionCounts { fp: 4096, ..Default::default() });
        assert!(matches!(pixel_confusion(&p, &[0; 3], 0.5), Err(Error::Shape(_))));
        assert!(matches!(pixel_confusion(&p, &mask(0).values, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = pixel_confusion(&[0.85], &[1], 0.85).unwrap();
        assert_eq!(c.tp, 1);
    }

    #[test]
    fn rate_examples() {
        let c = ConfusionCounts { tp: 62, fn_: 38, tn: 981, fp: 19 };
        assert_eq!(c.tp_rate().unwrap(), 0.62);
        assert_eq!(c.tn_rate().unwrap(), 0.981);
        assert!(matches!(
            ConfusionCounts::default().tp_rate(),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn perfect_separator_picks_lowest_threshold() {
        let target = MaskRaster::new(64, 64, (0..4096).map(|i| (i % 2) as u8).collect()).unwrap();
        let probs: Vec<f32> = target.values.iter().map(|&v| if v == 1 { 0.99 } else { 0.01 }).collect();
        let r = calibrate_from_predictions(&[Prediction { target: &target, probs: &probs }], &default_grid()).unwrap();
        assert!(r.grid.iter().all(|row| row.youden_j == 1.0));
        assert_eq!(r.chosen_threshold, 0.05);
    }

    #[test]
    fn constant_model_has_zero_j() {
        let target = MaskRaster::new(64, 64, (0..4096).map(|i| u8::from(i % 5 == 0)).collect()).unwrap();
        let probs = vec![0.5f32; 4096];
        let r = calibrate_from_predictions(&[Prediction { target: &target, probs: &probs }], &default_grid()).unwrap();
        assert!(r.grid.iter().all(|row| row.youden_j == 0.0));
        assert_eq!(r.chosen_threshold, 0.05);
        assert!(matches!(calibrate_from_predictions(&[], &default_grid()), Err(Error::Data(_))));
    }

    #[test]
    fn detection_rule_examples() {
        let rule = DetectionRule::default();
        let hit = |tp| ConfusionCounts { tp, fn_: 100 - tp, ..Default::default() };
        assert!(rule.is_correct(100, &hit(10)));
        assert!(!rule.is_correct(100, &hit(9)));
        assert!(rule.is_correct(0, &ConfusionCounts { tn: 4096, ..Default::default() }));
        assert!(rule.is_correct(0, &ConfusionCounts { fp: 40, tn: 4056, ..Default::default() }));
        assert!(!rule.is_correct(0, &ConfusionCounts { fp: 41, tn: 4055, ..Default::default() }));
        // ⌈0.1 · 15⌉ = 2
        assert!(!rule.is_correct(15, &hit(1)));
        assert!(rule.is_correct(15, &hit(2)));
    }

    #[test]
    fn buckets_partition_patches() {
        let empty = mask(0);
        let full = mask(1);
        let probs_hi = vec![0.99f32; 4096];
        let probs_lo = vec![0.01f32; 4096];
        let preds = [
            Prediction { target: &empty, probs: &probs_lo },
            Prediction { target: &empty, probs: &probs_hi },
            Prediction { target: &full, probs: &probs_hi },
        ];
        let r = bucket_detection(&preds, 0.85, &DetectionRule::default()).unwrap();
        assert_eq!(r.total_patches(), 3);
        assert_eq!(r.rows[0].patches, 2);
        assert_eq!(r.rows[0].rate, Some(0.5));
        assert_eq!(r.rows[4].rate, Some(1.0));
        assert_eq!(r.rows[1].rate, None);
        assert!(matches!(bucket_detection(&[], 0.85, &DetectionRule::default()), Err(Error::Data(_))));
    }

    #[test]
    fn overlay_examples() {
        let img = RgbRaster::filled(2, 2, [100, 50, 0, 255]);
        assert_eq!(overlay(&img, &[0.1; 4], 0.5).unwrap(), img);
        let all = overlay(&img, &[0.9; 4], 0.5).unwrap();
        assert!(all.pixels.iter().all(|&p| p == [178, 25, 0, 255]));
        let one = overlay(&img, &[0.1, 0.9, 0.1, 0.1], 0.5).unwrap();
        assert_eq!(one.pixels.iter().filter(|&&p| p != img.pixels[0]).count(), 1);
        assert!(matches!(overlay(&img, &[0.1; 3], 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn text_report_mentions_rates() {
        let full = mask(1);
        let probs = vec![0.9f32; 4096];
        let r = evaluate(&[Prediction { target: &full, probs: &probs }], 0.85, &DetectionRule::default()).unwrap();
        let text = r.to_text();
        assert!(text.contains("True Positive"));
        assert!(text.contains("100.0%"));
        assert!(text.contains("n/a"));
    }
}
