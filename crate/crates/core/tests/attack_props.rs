use std::collections::BTreeMap;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ftsafe::attack::{
    inject_fdi, spoof_scan, ActiveWindow, FdiSpec, LidarSpoofSpec, MAX_SPOOF_WIDTH,
};
use ftsafe::geometry::{normalize_angle, Beam, PolarScan};

fn arb_scan() -> impl Strategy<Value = PolarScan> {
    (
        36usize..720,
        prop::collection::vec(prop::option::weighted(0.85, 0.5..30.0f64), 720),
    )
        .prop_map(|(n, ranges)| {
            let res = std::f64::consts::TAU / n as f64;
            let beams = (0..n)
                .map(|k| Beam {
                    range: ranges[k],
                    angle: (k as f64 + 0.5) * res,
                })
                .collect();
            PolarScan::new(beams, 30.0).unwrap()
        })
}

fn arb_spoof() -> impl Strategy<Value = LidarSpoofSpec> {
    (-7.0..7.0f64, 0.001..=1.0f64, 1.0..20.0f64, 0.0..10.0f64).prop_map(|(lo, frac, r_lo, span)| {
        LidarSpoofSpec::new(
            lo,
            lo + frac * MAX_SPOOF_WIDTH,
            r_lo,
            r_lo + span,
            ActiveWindow::new(5, 10).unwrap(),
            false,
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn spoof_merge_invariants(scan in arb_scan(), spec in arb_spoof(), seed in any::<u64>(), k in 0usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = spoof_scan(&scan, &spec, k, &mut rng);
        prop_assert_eq!(out.scan.beams().len(), scan.beams().len());

        let offsets: Vec<f64> = out
            .injected
            .iter()
            .map(|&i| normalize_angle(out.scan.beams()[i].angle - spec.angle_lo()))
            .collect();
        for &o in &offsets {
            prop_assert!(o <= spec.width());
        }
        if let (Some(lo), Some(hi)) = (
            offsets.iter().copied().reduce(f64::min),
            offsets.iter().copied().reduce(f64::max),
        ) {
            prop_assert!(hi - lo <= spec.width());
        }

        for (i, (before, after)) in scan.beams().iter().zip(out.scan.beams()).enumerate() {
            prop_assert_eq!(before.angle.to_bits(), after.angle.to_bits());
            if let Some(b) = before.range {
                prop_assert!(after.range.unwrap() <= b);
            }
            if !spec.covers(before.angle) || !spec.window.contains(k) {
                prop_assert_eq!(before.range.map(f64::to_bits), after.range.map(f64::to_bits));
                prop_assert!(!out.injected.contains(&i));
            }
            if out.injected.contains(&i) {
                let r = after.range.unwrap();
                prop_assert!(r >= spec.range_lo && r <= spec.range_hi);
            } else {
                prop_assert_eq!(before, after);
            }
        }
        if !spec.window.contains(k) {
            prop_assert!(out.injected.is_empty());
        }
    }

    #[test]
    fn fdi_adds_bias_only_to_targets_inside_the_window(
        y in prop::collection::vec(-100.0..100.0f64, 2),
        bias in prop::collection::vec(-30.0..30.0f64, 2),
        target in 1usize..4,
        sensor in 1usize..4,
        start in 0usize..50,
        len in 0usize..50,
        k in 0usize..120,
    ) {
        let y = DVector::from_vec(y);
        let a = DVector::from_vec(bias);
        let spec = FdiSpec::new(BTreeMap::from([(target, a.clone())]), ActiveWindow::new(start, start + len).unwrap()).unwrap();
        let out = inject_fdi(&y, &spec, sensor, k).unwrap();
        if sensor == target && (start..=start + len).contains(&k) {
            prop_assert_eq!(out, &y + &a);
        } else {
            prop_assert_eq!(out, y);
        }
    }
}

#[test]
fn scenario_one_bias_example() {
    let spec = FdiSpec::new(
        BTreeMap::from([(1, DVector::from_vec(vec![-20.0, 0.0]))]),
        ActiveWindow::new(100, 300).unwrap(),
    )
    .unwrap();
    let y = DVector::zeros(2);
    assert_eq!(
        inject_fdi(&y, &spec, 1, 150).unwrap(),
        DVector::from_vec(vec![-20.0, 0.0])
    );
    assert_eq!(inject_fdi(&y, &spec, 2, 150).unwrap(), y);
    assert_eq!(inject_fdi(&y, &spec, 1, 99).unwrap(), y);
    let bad = DVector::zeros(3);
    assert!(inject_fdi(&bad, &spec, 1, 150).is_err());
}

#[test]
fn wide_windows_need_the_override() {
    let lo = (-70f64).to_radians();
    let hi = (-60f64).to_radians();
    let w = ActiveWindow::new(0, 1).unwrap();
    assert!(LidarSpoofSpec::new(lo, hi, 10.0, 15.0, w, false).is_err());
    let widened = LidarSpoofSpec::new(lo, hi, 10.0, 15.0, w, true).unwrap();
    assert!(widened.is_widened());
    let exact = LidarSpoofSpec::new(0.0, MAX_SPOOF_WIDTH, 10.0, 15.0, w, false).unwrap();
    assert!(!exact.is_widened());
}

#[test]
fn nearer_real_return_wins() {
    let scan = PolarScan::new(vec![Beam::hit(5.0, 0.01), Beam::no_return(0.03)], 30.0).unwrap();
    let spec = LidarSpoofSpec::new(
        0.0,
        0.05,
        12.0,
        12.0,
        ActiveWindow::new(0, 0).unwrap(),
        false,
    )
    .unwrap();
    let out = spoof_scan(&scan, &spec, 0, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(out.scan.beams()[0].range, Some(5.0));
    assert_eq!(out.scan.beams()[1].range, Some(12.0));
    assert_eq!(out.injected, vec![1]);
}

#[test]
fn window_without_beams_leaves_the_scan_alone() {
    let scan = PolarScan::new(vec![Beam::hit(5.0, 1.0), Beam::hit(6.0, 2.0)], 30.0).unwrap();
    let spec =
        LidarSpoofSpec::new(3.0, 3.1, 1.0, 2.0, ActiveWindow::new(0, 0).unwrap(), false).unwrap();
    let out = spoof_scan(&scan, &spec, 0, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(out.scan, scan);
    assert!(out.injected.is_empty());
}
