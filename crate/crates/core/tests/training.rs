use agbnet::models::{ArchitectureDescriptor, ModelKind};
use agbnet::preprocess::{PatchSample, StandardizationStats};
use agbnet::raster::{FootprintRecord, GridSpec, RasterGrid, DEFAULT_NODATA};
use agbnet::training::{
    evaluate_footprints, evaluate_pixels, regression_metrics, split_dataset, train,
    write_history_csv, EvalLevel, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NODATA: f32 = DEFAULT_NODATA as f32;

fn roster(c: usize) -> Vec<String> {
    (0..c).map(|k| format!("f{k}")).collect()
}

/// Patches whose labels are a fixed function of the first feature, about a
/// quarter of pixels labeled.
fn toy_patches(n: usize, c: usize, size: usize, seed: u64) -> Vec<PatchSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let features: Vec<f32> = (0..c * size * size)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let labels = (0..size * size)
                .map(|p| {
                    if rng.random_bool(0.25) {
                        100.0 + 40.0 * features[p]
                    } else {
                        -1.0
                    }
                })
                .collect();
            PatchSample {
                features,
                labels,
                channels: c,
                size,
                origin_row: i * size,
                origin_col: 0,
                fold_id: 0,
            }
        })
        .collect()
}

fn small_desc(c: usize, size: usize) -> ArchitectureDescriptor {
    ArchitectureDescriptor {
        in_channels: c,
        patch_size: size,
        ..ArchitectureDescriptor::new(ModelKind::Au, 2, 4)
    }
}

#[test]
fn overfits_single_constant_patch() {
    let mut p = toy_patches(1, 3, 8, 4).remove(0);
    p.labels.iter_mut().for_each(|v| *v = 120.0);
    // two copies so train-mode normalization has a batch of two
    let data = vec![p.clone(), p];
    let config = TrainConfig {
        max_epochs: 200,
        batch_size: 2,
        weight_decay: 0.0,
        lr_decay_every: 1000,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(&data, &[], small_desc(3, 8), &config, &roster(3), NODATA).unwrap();
    assert_eq!(out.history.len(), 200);
    let best = out
        .history
        .iter()
        .map(|h| h.train_loss)
        .fold(f64::INFINITY, f64::min);
    assert!(best < 1e-3, "best training loss {best}");
}

#[test]
fn identical_seeds_give_identical_curves() {
    let data = toy_patches(10, 3, 8, 9);
    let config = TrainConfig {
        max_epochs: 4,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::default()
    };
    let desc = small_desc(3, 8);
    let a = train(&data[..8], &data[8..], desc, &config, &roster(3), NODATA).unwrap();
    let b = train(&data[..8], &data[8..], desc, &config, &roster(3), NODATA).unwrap();
    for (x, y) in a.history.iter().zip(&b.history) {
        assert!((x.train_loss - y.train_loss).abs() <= 1e-9);
        assert!((x.val_loss - y.val_loss).abs() <= 1e-9);
    }
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
    let lrs: Vec<f64> = a.history.iter().map(|h| h.lr).collect();
    assert_eq!(lrs, vec![1e-3; 4]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&a.history, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_loss,lr\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn stats_come_from_training_portion_only() {
    let data = toy_patches(10, 2, 8, 2);
    let split = split_dataset(data.len(), [7, 2, 1], 5).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    let (tr, va) = (pick(&split.train), pick(&split.val));
    let config = TrainConfig {
        max_epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let out = train(&tr, &va, small_desc(2, 8), &config, &roster(2), NODATA).unwrap();
    let refit = StandardizationStats::fit(&tr, &roster(2), NODATA).unwrap();
    assert_eq!(out.checkpoint.stats, refit);
    let everything = StandardizationStats::fit(&data, &roster(2), NODATA).unwrap();
    assert_ne!(out.checkpoint.stats, everything);

    let m = evaluate_pixels(&out.checkpoint, &va, NODATA).unwrap();
    let labeled: usize = va.iter().map(|p| p.labeled_count()).sum();
    assert_eq!(m.n, labeled);
    assert_eq!(m.level, EvalLevel::Pixel);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = toy_patches(6, 2, 8, 21);
    let config = TrainConfig {
        max_epochs: 2,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let out = train(
        &data[..4],
        &data[4..],
        small_desc(2, 8),
        &config,
        &roster(2),
        NODATA,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = out.checkpoint.save(dir.path(), "fold0").unwrap();
    let back = agbnet::training::ModelCheckpoint::load(&manifest).unwrap();
    assert_eq!(back.stats, out.checkpoint.stats);
    assert_eq!(
        (back.epoch, back.val_loss),
        (out.checkpoint.epoch, out.checkpoint.val_loss)
    );
    assert!(
        back.params == out.checkpoint.params,
        "parameters changed on disk"
    );
    let a = evaluate_pixels(&out.checkpoint, &data[4..], NODATA).unwrap();
    let b = evaluate_pixels(&back, &data[4..], NODATA).unwrap();
    assert_eq!(a, b);
}

#[test]
fn non_finite_features_abort_with_location() {
    let mut data = toy_patches(4, 2, 8, 1);
    data[0].features[3] = f32::INFINITY;
    let config = TrainConfig {
        max_epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let err = train(&data, &[], small_desc(2, 8), &config, &roster(2), NODATA).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("epoch 1") || msg.contains("standard"), "{msg}");
}

#[test]
fn footprint_level_pairs_constant_map() {
    let spec = GridSpec::new(20, 20, [0.0, 200.0], [10.0, -10.0]);
    let grid = RasterGrid::from_band(spec, "agb", DEFAULT_NODATA, vec![73.56; 400]).unwrap();
    let fp = |id: &str, x: f64, rh80: f64| FootprintRecord {
        id: id.into(),
        center_x: x,
        center_y: 100.0,
        radius: 12.5,
        rh80,
        rh98: rh80 + 5.0,
        canopy_cover: 0.5,
        sensitivity: 0.95,
        quality_flag: 1,
        degrade_flag: 0,
        solar_elevation: -5.0,
        beam_type: agbnet::raster::BeamType::Power,
    };
    let fps = vec![
        fp("a", 50.0, 10.0),
        fp("b", 120.0, 20.0),
        fp("off", 900.0, 20.0),
    ];
    let m = evaluate_footprints(&grid, &fps).unwrap();
    assert_eq!(m.n, 2);
    let expected =
        regression_metrics(&[73.56, 73.56], &[73.5625, 159.90], EvalLevel::Footprint).unwrap();
    assert!((m.bias - expected.bias).abs() < 0.05);
    assert_eq!(m.level, EvalLevel::Footprint);
}

#[test]
fn bias_shifts_with_constant_offset() {
    let truth = [10.0, 50.0, 80.0, 120.0];
    let pred = [12.0, 45.0, 90.0, 118.0];
    let base = regression_metrics(&pred, &truth, EvalLevel::Pixel).unwrap();
    let shifted: Vec<f64> = pred.iter().map(|p| p + 7.5).collect();
    let moved = regression_metrics(&shifted, &truth, EvalLevel::Pixel).unwrap();
    assert!((moved.bias - base.bias - 7.5).abs() < 1e-12);
}
