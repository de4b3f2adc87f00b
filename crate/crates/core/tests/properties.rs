use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agbnet::inference::ensemble;
use agbnet::inference::tiles::{stitch, TilePlan};
use agbnet::preprocess::{
    agb_from_rh80, footprint_mean, footprint_weights, rh80_from_agb, StandardizationStats,
};
use agbnet::raster::{
    decode_raster, encode_raster, format_footprints, parse_footprints, BeamType, FootprintRecord,
    GridSpec, RasterGrid, DEFAULT_NODATA,
};
use agbnet::training::metrics::{regression_metrics, EvalLevel};
use agbnet::training::split::{kfold_plan, split_dataset};

fn spec(rows: usize, cols: usize) -> GridSpec {
    GridSpec::new(rows, cols, [1000.0, 2000.0], [10.0, -10.0])
}

fn footprint(x: f64, y: f64, radius: f64) -> FootprintRecord {
    FootprintRecord {
        id: "fp".into(),
        center_x: x,
        center_y: y,
        radius,
        rh80: 20.0,
        rh98: 25.0,
        canopy_cover: 0.5,
        sensitivity: 0.97,
        quality_flag: 1,
        degrade_flag: 0,
        solar_elevation: -10.0,
        beam_type: BeamType::Power,
    }
}

#[test]
fn footprint_mean_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = spec(12, 12);
    let values: Vec<f32> = (0..2 * 144).map(|_| rng.random_range(0.0..100.0)).collect();
    let stack = RasterGrid {
        spec: s.clone(),
        band_names: vec!["a".into(), "b".into()],
        nodata: DEFAULT_NODATA,
        values,
    };
    for _ in 0..5 {
        let cx = 1000.0 + rng.random_range(30.0..90.0);
        let cy = 2000.0 - rng.random_range(30.0..90.0);
        let fp = footprint(cx, cy, 12.5);
        let exact = footprint_mean(&stack, &fp).unwrap();
        let n = 200_000;
        let mut acc = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        let mut k = 0;
        while k < n {
            let (dx, dy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if dx * dx + dy * dy > 1.0 {
                continue;
            }
            let (x, y) = (cx + 12.5 * dx, cy + 12.5 * dy);
            let col = ((x - 1000.0) / 10.0).floor() as usize;
            let row = ((2000.0 - y) / 10.0).floor() as usize;
            for b in 0..2 {
                let v = stack.get(b, row, col) as f64;
                acc[b] += v;
                sq[b] += v * v;
            }
            k += 1;
        }
        for b in 0..2 {
            let mean = acc[b] / n as f64;
            let se = ((sq[b] / n as f64 - mean * mean) / n as f64).sqrt();
            assert!(
                (exact[b] - mean).abs() < 5.0 * se + 1e-9,
                "band {b}: closed form {} vs sampled {mean} (se {se})",
                exact[b]
            );
        }
    }
}

#[test]
fn split_is_seed_deterministic() {
    let a = split_dataset(64, [70, 20, 10], 3).unwrap();
    assert_eq!(a, split_dataset(64, [70, 20, 10], 3).unwrap());
    assert_ne!(a, split_dataset(64, [70, 20, 10], 4).unwrap());
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (44, 12, 8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raster_round_trip(rows in 1usize..6, cols in 1usize..6, bands in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = RasterGrid {
            spec: spec(rows, cols),
            band_names: (0..bands).map(|b| format!("b{b}")).collect(),
            nodata: DEFAULT_NODATA,
            values: (0..rows * cols * bands).map(|_| rng.random::<f32>() * 1e4 - 5e3).collect(),
        };
        let back = decode_raster(&encode_raster(&grid).unwrap()).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn footprint_table_round_trip(
        x in -1e6f64..1e6, y in -1e6f64..1e6, rh80 in 0.0f64..60.0, extra in 0.0f64..20.0,
        cover in 0.0f64..=1.0, sens in 0.0f64..=1.0, q in 0u8..2, d in 0u8..2, sun in -90.0f64..90.0,
    ) {
        let mut fp = footprint(x, y, 12.5);
        fp.rh80 = rh80;
        fp.rh98 = rh80 + extra;
        fp.canopy_cover = cover;
        fp.sensitivity = sens;
        fp.quality_flag = q;
        fp.degrade_flag = d;
        fp.solar_elevation = sun;
        fp.beam_type = if q == 0 { BeamType::Coverage } else { BeamType::Power };
        let bytes = format_footprints(std::slice::from_ref(&fp)).unwrap();
        prop_assert_eq!(parse_footprints(bytes.as_slice()).unwrap(), vec![fp]);
    }

    #[test]
    fn interior_disc_weights_sum_to_disc_area(fx in 0.0f64..1.0, fy in 0.0f64..1.0, radius in 1.0f64..25.0) {
        let s = spec(10, 10);
        let fp = footprint(1030.0 + 40.0 * fx, 1970.0 - 40.0 * fy, radius);
        let w = footprint_weights(&s, &fp);
        let total: f64 = w.iter().map(|p| p.1).sum();
        prop_assert!((total - PI * radius * radius).abs() < 1e-9 * total.max(1.0));
        prop_assert!(w.iter().all(|p| p.1 > 0.0 && p.1 <= 100.0 + 1e-9));
    }

    #[test]
    fn allometry_inverts(rh80 in 0.5f64..80.0) {
        let agb = agb_from_rh80(rh80).unwrap();
        prop_assert!((rh80_from_agb(agb).unwrap() - rh80).abs() < 1e-9 * rh80);
    }

    #[test]
    fn split_partitions_indices(n in 10usize..200, seed: u64) {
        let s = split_dataset(n, [70, 20, 10], seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(s.train.len(), n * 70 / 100);
    }

    #[test]
    fn folds_cover_pool_once(n in 5usize..80, k in 2usize..6, seed: u64) {
        prop_assume!(n >= k);
        let pool: Vec<usize> = (100..100 + n).collect();
        let folds = kfold_plan(&pool, k, seed).unwrap();
        let mut vals: Vec<usize> = folds.iter().flat_map(|f| f.1.clone()).collect();
        vals.sort_unstable();
        prop_assert_eq!(&vals, &pool);
        for (train, val) in &folds {
            prop_assert_eq!(train.len() + val.len(), n);
            prop_assert!(train.iter().all(|t| !val.contains(t)));
            prop_assert!(val.len() == n / k || val.len() == n / k + 1);
        }
    }

    #[test]
    fn stitching_covers_and_preserves_constants(
        rows in 16usize..70, cols in 16usize..70, overlap in 0usize..8, trim in 0usize..4, c in -50.0f32..50.0,
    ) {
        prop_assume!(2 * trim <= overlap);
        let plan = TilePlan::new(rows, cols, 16, overlap, trim).unwrap();
        prop_assert!(plan.coverage().iter().all(|&n| n >= 1));
        let tiles = vec![vec![c; 256]; plan.len()];
        let map = stitch(&plan, &tiles).unwrap();
        prop_assert!(map.iter().all(|&v| (v - c).abs() <= 1e-5 * c.abs().max(1.0)));
    }

    #[test]
    fn ensemble_mean_is_bounded(k in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<RasterGrid> = (0..k)
            .map(|_| RasterGrid::from_band(spec(3, 4), "agb", DEFAULT_NODATA,
                (0..12).map(|_| rng.random_range(0.0..300.0)).collect()).unwrap())
            .collect();
        let (mean, std) = ensemble(&maps).unwrap();
        for i in 0..12 {
            let lo = maps.iter().map(|m| m.values[i]).fold(f32::MAX, f32::min);
            let hi = maps.iter().map(|m| m.values[i]).fold(f32::MIN, f32::max);
            prop_assert!(mean.values[i] >= lo - 1e-3 && mean.values[i] <= hi + 1e-3);
            prop_assert!(std.values[i] >= 0.0 && std.values[i] <= (hi - lo) + 1e-3);
        }
    }

    #[test]
    fn metrics_respond_to_offsets(truth in prop::collection::vec(0.0f64..300.0, 3..40), c in -20.0f64..20.0) {
        prop_assume!(truth.iter().any(|&t| (t - truth[0]).abs() > 1e-3));
        let exact = regression_metrics(&truth, &truth, EvalLevel::Pixel).unwrap();
        prop_assert_eq!(exact.r2, Some(1.0));
        prop_assert_eq!(exact.rmse, 0.0);
        let shifted: Vec<f64> = truth.iter().map(|t| t + c).collect();
        let m = regression_metrics(&shifted, &truth, EvalLevel::Pixel).unwrap();
        prop_assert!((m.bias - c).abs() < 1e-9);
        prop_assert!((m.rmse - c.abs()).abs() < 1e-9);
    }

    #[test]
    fn standardization_inverts(mean in -100.0f64..100.0, std in 0.01f64..50.0, v in -1e3f64..1e3) {
        let stats = StandardizationStats {
            channel_names: vec!["x".into()],
            channel_mean: vec![mean],
            channel_std: vec![std],
            label_mean: mean,
            label_std: std,
        };
        prop_assert!((stats.invert_channel(0, stats.apply_channel(0, v)) - v).abs() < 1e-9 * v.abs().max(1.0));
        prop_assert!((stats.invert_label(stats.apply_label(v)) - v).abs() < 1e-9 * v.abs().max(1.0));
    }
}
