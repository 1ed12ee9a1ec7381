//! Reconstruct a reference scan from the district map, sense a noisy scan at
//! a displaced pose, and recover the displacement with NDT.

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ftsafe::geometry::{to_cartesian, Pose};
use ftsafe::lidar::{reconstruct_scan, sense_lidar, LidarNoise, ScanParams};
use ftsafe::ndt::{build_grid, match_against, NdtConfig};
use ftsafe::world::{rasterize, urban_district};

fn main() -> ftsafe::Result<()> {
    let map = rasterize(&urban_district(), 0.25);
    let params = ScanParams::new(1f64.to_radians(), 30.0)?;
    let noise = LidarNoise::new(0.03, 0.09)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let believed = Pose::new(0.0, -10.0);
    let truth = Pose::new(0.25, -10.15);

    let reference = reconstruct_scan(believed, &map, &params);
    let measured = sense_lidar(truth, &map, &params, &noise, &mut rng);
    println!(
        "{} map points, {} reference returns, {} measured returns",
        map.points().len(),
        reference.valid_count(),
        measured.valid_count()
    );

    let cfg = NdtConfig::default();
    let grid = build_grid(&to_cartesian(believed, &reference), &cfg)?;
    let m = match_against(&grid, &to_cartesian(believed, &measured), &cfg);
    let shift = Vector2::new(truth.x1 - believed.x1, truth.x2 - believed.x2);

    println!("true shift      ({:+.3}, {:+.3})", shift.x, shift.y);
    println!("recovered shift ({:+.3}, {:+.3})", -m.offset.x, -m.offset.y);
    println!(
        "degradation {:.3} over {} points, {} iterations",
        m.degradation, m.n_points, m.iterations
    );
    Ok(())
}
