//! Classify a bank of position estimates against one LiDAR scan. A
//! far-off estimate (as produced by a biased sensor) is excluded.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ftsafe::estimation::EstimatorEntry;
use ftsafe::ft_estimation::evaluate_trust;
use ftsafe::geometry::Pose;
use ftsafe::lidar::sense_lidar;
use ftsafe::sim::ScenarioConfig;

fn main() -> ftsafe::Result<()> {
    let res = ScenarioConfig::shipped()?.resolve()?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scan = sense_lidar(
        Pose::new(0.0, -10.0),
        &res.map,
        &res.scan_params,
        &res.lidar_noise,
        &mut rng,
    );

    let bound = res.error_bounds[0];
    let bank = [(-20.0, -10.0), (0.1, -10.1), (0.3, -9.8)]
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            EstimatorEntry::new(
                i + 1,
                vec![i + 1],
                DVector::from_vec(vec![x, y]),
                DMatrix::identity(2, 2) * 0.01,
                bound,
            )
        })
        .collect::<ftsafe::Result<Vec<_>>>()?;

    let report = evaluate_trust(&bank, &res.map, &scan, &res.trust)?;
    for v in &report.verdicts {
        println!(
            "estimator {}: degradation {:8.3} (threshold {:.3}) -> {}",
            v.id,
            v.full.result.degradation,
            v.full.threshold,
            v.criterion.label()
        );
    }
    println!("trusted  {:?}", report.trusted);
    println!("excluded {:?}", report.excluded);
    println!("lidar trusted: {}", report.lidar_trusted);
    Ok(())
}
