use super::{CoverageCategory, Split};
use crate::error::{Error, Result};
use crate::seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub category: CoverageCategory,
    pub split: Split,
}

/// Train/val/test assignment for every patch id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub entries: Vec<ManifestEntry>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| e.id.as_str())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Splits `n` items by largest remainder: every count is within one item of
/// its exact quota. Leftover items go to the largest fractional parts, ties
/// resolved toward test, then val, then train.
fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| n as f64 * r);
    // round away float noise so that e.g. 5 × 0.6 floors to 3
    let floors = quotas.map(|q| (q + 1e-9).floor() as usize);
    let mut counts = floors;
    let mut left = n - floors.iter().sum::<usize>().min(n);
    let mut order = [2usize, 1, 0];
    let frac = |i: usize| ((quotas[i] - floors[i] as f64) * 1e9).round() as i64;
    order.sort_by_key(|&i| std::cmp::Reverse(frac(i)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Shuffles each coverage category independently and carves it into
/// train/val/test by `ratios`, so every split sees the same category mix.
///
/// Items are sorted by id before shuffling, so the result depends only on
/// the set of items and the seed.
pub fn stratified_split(
    items: &[(String, CoverageCategory)],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitManifest> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut entries = Vec::with_capacity(items.len());
    for cat in CoverageCategory::ALL {
        let mut ids: Vec<&str> = items
            .iter()
            .filter(|(_, c)| *c == cat)
            .map(|(id, _)| id.as_str())
            .collect();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[cat.index() as u64]));
        ids.shuffle(&mut rng);
        let [train, val, _] = allocate(ids.len(), &ratios);
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            entries.push(ManifestEntry {
                id: id.to_string(),
                category: cat,
                split,
            });
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(SplitManifest {
        seed,
        ratios,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn items(n: usize, cat: CoverageCategory) -> Vec<(String, CoverageCategory)> {
        (0..n).map(|i| (format!("{cat}_{i:04}"), cat)).collect()
    }

    fn counts(m: &SplitManifest, cat: CoverageCategory) -> [usize; 3] {
        let mut c = [0; 3];
        for e in m.entries.iter().filter(|e| e.category == cat) {
            c[match e.split {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
                Split::Unassigned => unreachable!(),
            }] += 1;
        }
        c
    }

    #[test]
    fn small_examples() {
        let m = stratified_split(&items(10, CoverageCategory::C0), DEFAULT_RATIOS, 3).unwrap();
        assert_eq!(counts(&m, CoverageCategory::C0), [6, 2, 2]);
        let m = stratified_split(&items(5, CoverageCategory::C21_50), DEFAULT_RATIOS, 3).unwrap();
        assert_eq!(counts(&m, CoverageCategory::C21_50), [3, 1, 1]);
    }

    #[test]
    fn allocation_stays_within_one_of_quota() {
        assert_eq!(allocate(9, &DEFAULT_RATIOS), [5, 2, 2]);
        assert_eq!(allocate(3, &DEFAULT_RATIOS), [2, 0, 1]);
        assert_eq!(allocate(1, &DEFAULT_RATIOS), [1, 0, 0]);
        assert_eq!(allocate(0, &DEFAULT_RATIOS), [0, 0, 0]);
    }

    #[test]
    fn deterministic_and_order_independent() {
        let mut it = items(37, CoverageCategory::C1_20);
        it.extend(items(12, CoverageCategory::C81_100));
        let a = stratified_split(&it, DEFAULT_RATIOS, 99).unwrap();
        it.reverse();
        let b = stratified_split(&it, DEFAULT_RATIOS, 99).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&it, DEFAULT_RATIOS, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_ratios_rejected() {
        let it = items(4, CoverageCategory::C0);
        for r in [[0.5, 0.5, 0.1], [1.0, 0.0, 0.0], [0.7, 0.4, -0.1]] {
            assert!(matches!(stratified_split(&it, r, 0), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn manifest_json_shape() {
        let m = stratified_split(&items(2, CoverageCategory::C1_20), DEFAULT_RATIOS, 5).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["seed"], 5);
        assert_eq!(v["ratios"], serde_json::json!([0.6, 0.2, 0.2]));
        assert_eq!(v["entries"][0]["category"], "C1_20");
        assert!(["train", "val", "test"].contains(&v["entries"][0]["split"].as_str().unwrap()));
    }

    proptest! {
        #[test]
        fn splits_are_stratified(sizes in proptest::collection::vec(0usize..60, 5), seed in any::<u64>()) {
            let mut it = Vec::new();
            for (cat, &n) in CoverageCategory::ALL.iter().zip(&sizes) {
                it.extend(items(n, *cat));
            }
            let m = stratified_split(&it, DEFAULT_RATIOS, seed).unwrap();
            let ids: HashSet<_> = m.entries.iter().map(|e| e.id.clone()).collect();
            prop_assert_eq!(ids.len(), it.len());
            for (cat, &n) in CoverageCategory::ALL.iter().zip(&sizes) {
                let c = counts(&m, *cat);
                prop_assert_eq!(c.iter().sum::<usize>(), n);
                for (k, r) in DEFAULT_RATIOS.iter().enumerate() {
                    prop_assert!((c[k] as f64 - n as f64 * r).abs() <= 1.0);
                }
            }
        }
    }
}
