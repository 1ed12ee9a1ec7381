use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::Vector2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ftsafe::geometry::{
    load_map, normalize_angle, to_cartesian, Beam, PointCloudMap, PolarScan, Pose,
};
use ftsafe::lidar::{reconstruct_scan, sense_lidar, LidarNoise, ScanParams};
use ftsafe::world::{rasterize, urban_district};

/// Nearest in-range map point per sector, scanning every point for every
/// sector.
fn brute_force(center: Pose, map: &PointCloudMap, sectors: usize, max_range: f64) -> Vec<Beam> {
    let width = TAU / sectors as f64;
    (0..sectors)
        .map(|k| {
            let (lo, hi) = (k as f64 * width, (k + 1) as f64 * width);
            let mut best: Option<f64> = None;
            for p in map.points() {
                let (dx, dy) = (p.x - center.x1, p.y - center.x2);
                let r = dx.hypot(dy);
                let mut a = dy.atan2(dx);
                if a < 0.0 {
                    a += TAU;
                }
                if a >= TAU {
                    a = 0.0;
                }
                let inside = (a >= lo && a < hi) || (k + 1 == sectors && a >= hi);
                if inside && r > 0.0 && r <= max_range && best.is_none_or(|b| r < b) {
                    best = Some(r);
                }
            }
            Beam {
                range: best,
                angle: (k as f64 + 0.5) * width,
            }
        })
        .collect()
}

fn arb_map(max_points: usize) -> impl Strategy<Value = PointCloudMap> {
    prop::collection::vec((-25.0..25.0f64, -25.0..25.0f64), 1..=max_points).prop_map(|pts| {
        PointCloudMap::new(pts.into_iter().map(|(x, y)| Vector2::new(x, y)).collect()).unwrap()
    })
}

fn arb_pose() -> impl Strategy<Value = Pose> {
    (-10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y)| Pose::new(x, y))
}

fn arb_scan() -> impl Strategy<Value = PolarScan> {
    prop::collection::vec(
        (prop::option::weighted(0.8, 0.01..30.0f64), 0.0..TAU),
        0..60,
    )
    .prop_map(|mut beams| {
        beams.sort_by(|a, b| a.1.total_cmp(&b.1));
        beams.dedup_by(|a, b| a.1 == b.1);
        PolarScan::new(
            beams
                .into_iter()
                .map(|(range, angle)| Beam { range, angle })
                .collect(),
            30.0,
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reconstruction_matches_brute_force(
        map in arb_map(500),
        center in arb_pose(),
        sectors in 4usize..720,
        max_range in 1.0..40.0f64,
    ) {
        let params = ScanParams::with_sectors(sectors, max_range).unwrap();
        let scan = reconstruct_scan(center, &map, &params);
        let expected = brute_force(center, &map, sectors, max_range);
        prop_assert_eq!(scan.beams(), expected.as_slice());
    }

    #[test]
    fn reconstructed_ranges_are_map_radii(map in arb_map(200), center in arb_pose(), max_range in 1.0..40.0f64) {
        let params = ScanParams::with_sectors(360, max_range).unwrap();
        let radii: Vec<f64> = map.points().iter().map(|p| (p.x - center.x1).hypot(p.y - center.x2)).collect();
        for b in reconstruct_scan(center, &map, &params).beams() {
            if let Some(r) = b.range {
                prop_assert!(r <= max_range);
                prop_assert!(radii.contains(&r));
            }
        }
    }

    #[test]
    fn each_in_range_point_lies_in_one_sector(map in arb_map(200), center in arb_pose(), sectors in 1usize..400) {
        let width = TAU / sectors as f64;
        for p in map.points() {
            let a = normalize_angle((p.y - center.x2).atan2(p.x - center.x1));
            let hits = (0..sectors)
                .filter(|&k| {
                    let (lo, hi) = (k as f64 * width, (k + 1) as f64 * width);
                    (a >= lo && a < hi) || (k + 1 == sectors && a >= hi)
                })
                .count();
            prop_assert_eq!(hits, 1);
        }
    }

    #[test]
    fn to_cartesian_is_translation_equivariant(scan in arb_scan(), pose in arb_pose(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let base = to_cartesian(pose, &scan);
        let moved = to_cartesian(Pose::new(pose.x1 + dx, pose.x2 + dy), &scan);
        prop_assert_eq!(base.len(), moved.len());
        for (a, b) in base.points.iter().zip(&moved.points) {
            let expected = a + Vector2::new(dx, dy);
            // one rounding per coordinate separates the two association orders
            prop_assert!((b - expected).amax() <= 1e-12 * (1.0 + expected.amax()));
        }
    }

    #[test]
    fn polar_round_trip(scan in arb_scan()) {
        let pts = to_cartesian(Pose::origin(), &scan);
        let valid: Vec<&Beam> = scan.beams().iter().filter(|b| b.is_valid()).collect();
        prop_assert_eq!(valid.len(), pts.len());
        for (b, p) in valid.iter().zip(&pts.points) {
            let r = p.x.hypot(p.y);
            let a = normalize_angle(p.y.atan2(p.x));
            prop_assert!((r - b.range.unwrap()).abs() <= 1e-12 * (1.0 + r));
            let da = normalize_angle(a - b.angle);
            prop_assert!(da.min(TAU - da) <= 1e-12 || r < 1e-9);
        }
    }

    #[test]
    fn polar_scan_text_round_trip(scan in arb_scan()) {
        prop_assert_eq!(PolarScan::parse(&scan.to_text(), 30.0).unwrap(), scan);
    }
}

#[test]
fn nearer_point_wins_its_sector() {
    let map = PointCloudMap::new(vec![Vector2::new(1.0, 0.0), Vector2::new(3.0, 1e-6)]).unwrap();
    let params = ScanParams::new(FRAC_PI_2, 10.0).unwrap();
    let scan = reconstruct_scan(Pose::origin(), &map, &params);
    assert_eq!(scan.beams()[0].range, Some(1.0));
    assert!(scan.beams()[1..].iter().all(|b| b.range.is_none()));
}

#[test]
fn bounded_noise_statistics() {
    let noise = LidarNoise::new(0.03, 0.09).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws: Vec<f64> = (0..10_000).map(|_| noise.sample(&mut rng)).collect();
    assert!(draws.iter().all(|d| d.abs() <= 0.09));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!(mean.abs() <= 3.0 * 0.03 / 100.0, "mean {mean}");
}

#[test]
fn sensed_scan_stays_within_noise_of_reconstruction() {
    let map = rasterize(&urban_district(), 0.25);
    let params = ScanParams::new(1f64.to_radians(), 30.0).unwrap();
    let noise = LidarNoise::new(0.03, 0.09).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pose = Pose::new(0.4, -12.0);
    let clean = reconstruct_scan(pose, &map, &params);
    let noisy = sense_lidar(pose, &map, &params, &noise, &mut rng);
    for (c, n) in clean.beams().iter().zip(noisy.beams()) {
        assert_eq!(c.angle, n.angle);
        match (c.range, n.range) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 0.09 + 1e-12),
            (None, None) => {}
            other => panic!("validity changed: {other:?}"),
        }
    }
}

#[test]
fn shipped_map_file_is_the_rasterized_district() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/urban_map.csv");
    assert_eq!(load_map(path).unwrap(), rasterize(&urban_district(), 0.25));
}

#[test]
fn malformed_map_lines_are_reported() {
    let err = PointCloudMap::parse("1,2\n# note\n3;4\n").unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}
