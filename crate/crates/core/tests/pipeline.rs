use canopyseg::dataset::{stratified_split, PatchStore, Split, SplitManifest, DEFAULT_RATIOS};
use canopyseg::eval::{evaluate, DetectionRule, Prediction};
use canopyseg::model::{train, Checkpoint, TrainConfig, UNet, UNetConfig};
use canopyseg::pipeline::prepare_samples;
use canopyseg::raster::{self, FilterConfig};
use canopyseg::synth::{generate, SceneConfig};
use std::collections::HashSet;

fn scene() -> canopyseg::synth::Scene {
    generate(&SceneConfig {
        width: 320,
        height: 256,
        ground_patch_probability: 0.2,
        seed: 21,
        ..SceneConfig::default()
    })
    .unwrap()
}

#[test]
fn ground_cells_are_filtered_out() {
    let s = scene();
    let prepared = prepare_samples(&s.image, &s.mask, "sc", &FilterConfig::default()).unwrap();
    let rejected: HashSet<[usize; 2]> = prepared.rejections.iter().map(|r| [r.origin.x, r.origin.y]).collect();
    for cell in &s.ground_cells {
        assert!(rejected.contains(cell), "ground cell {cell:?} kept");
    }
    assert_eq!(prepared.samples.len() + prepared.rejections.len(), 5 * 4);
}

#[test]
fn store_round_trips_through_png() {
    let s = scene();
    let prepared = prepare_samples(&s.image, &s.mask, "sc", &FilterConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = PatchStore::create(dir.path().join("data")).unwrap();
    let entries: Vec<_> = prepared
        .samples
        .iter()
        .map(|(p, o)| store.write_sample(p, "sc", *o).unwrap())
        .collect();
    let index = store.merge_index(entries).unwrap();
    assert_eq!(index.entries.len(), prepared.samples.len());
    assert!(index.entries.windows(2).all(|w| w[0].id < w[1].id));

    for (sample, _) in &prepared.samples {
        assert_eq!(&store.load_sample(&sample.id).unwrap(), sample);
    }

    // re-preparing the same scene leaves the index unchanged
    let again: Vec<_> = prepared
        .samples
        .iter()
        .map(|(p, o)| store.write_sample(p, "sc", *o).unwrap())
        .collect();
    assert_eq!(store.merge_index(again).unwrap(), index);

    let items: Vec<_> = index.entries.iter().map(|e| (e.id.clone(), e.category)).collect();
    let manifest = stratified_split(&items, DEFAULT_RATIOS, 3).unwrap();
    let path = dir.path().join("manifest.json");
    manifest.save(&path).unwrap();
    let loaded = SplitManifest::load(&path).unwrap();
    assert_eq!(loaded, manifest);
    let total: usize = [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .map(|sp| store.load_split(&loaded, sp).unwrap().len())
        .sum();
    assert_eq!(total, index.entries.len());
}

#[test]
fn scene_files_load_back_identically() {
    let s = scene();
    let dir = tempfile::tempdir().unwrap();
    s.write(dir.path(), "a", &SceneConfig::default()).unwrap();
    assert_eq!(raster::load_rgb(dir.path().join("a.img.png")).unwrap(), s.image);
    assert_eq!(raster::load_mask(dir.path().join("a.tgt.png")).unwrap(), s.mask);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(sidecar["achieved_minority_fraction"], s.achieved_minority_fraction);
}

#[test]
fn trained_model_survives_checkpoint_and_evaluates() {
    let s = scene();
    let prepared = prepare_samples(&s.image, &s.mask, "sc", &FilterConfig::default()).unwrap();
    let samples: Vec<_> = prepared.samples.into_iter().map(|(p, _)| p).take(6).collect();
    let mut model = UNet::<f32>::build(UNetConfig::small(2, 4), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        learning_rate: 0.02,
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &samples, &cfg, &Default::default()).unwrap();
    assert_eq!(trace.len(), 2);
    assert!(trace.iter().all(|l| l.is_finite() && *l > 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::new(&model).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model;
    let before = model.predict(&samples[0].image).unwrap();
    assert_eq!(loaded.predict(&samples[0].image).unwrap(), before);

    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let probs = loaded.predict_all(&images, 4).unwrap();
    let preds: Vec<_> = samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| Prediction { target: &s.target, probs: p })
        .collect();
    let report = evaluate(&preds, 0.85, &DetectionRule::default()).unwrap();
    assert_eq!(report.patches, 6);
    assert_eq!(report.buckets.total_patches(), 6);
    assert_eq!(report.confusion.total(), 6 * 4096);
}
