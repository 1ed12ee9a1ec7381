//! Inject a false-object cluster into a scan and let the sector search find
//! and drop the spoofed wedge.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ftsafe::attack::{spoof_scan, ActiveWindow, LidarSpoofSpec};
use ftsafe::ft_estimation::{ft_lidar_estimation, match_estimate};
use ftsafe::geometry::Pose;
use ftsafe::lidar::sense_lidar;
use ftsafe::sim::ScenarioConfig;

fn main() -> ftsafe::Result<()> {
    let res = ScenarioConfig::shipped()?.resolve()?;
    let lidar = &res.trust.lidar;
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let pose = Pose::new(0.0, -10.0);
    let clean = sense_lidar(pose, &res.map, &res.scan_params, &res.lidar_noise, &mut rng);
    let spec = LidarSpoofSpec::new(
        (-70f64).to_radians(),
        (-62f64).to_radians(),
        0.5,
        1.5,
        ActiveWindow::new(0, 0)?,
        false,
    )?;
    let spoofed = spoof_scan(&clean, &spec, 0, &mut rng);
    let angles: Vec<f64> = spoofed
        .injected
        .iter()
        .map(|&i| spoofed.scan.beams()[i].angle.to_degrees())
        .collect();
    println!(
        "{} beams replaced by the spoofer, {:.1}..{:.1} deg",
        angles.len(),
        angles.iter().copied().fold(f64::INFINITY, f64::min),
        angles.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    );

    for (name, scan) in [("clean", &clean), ("spoofed", &spoofed.scan)] {
        let m = match_estimate(
            pose,
            &res.map,
            scan,
            &lidar.params,
            &lidar.ndt,
            &lidar.threshold,
        )?;
        println!(
            "{name:8} full-scan degradation {:7.3}  threshold {:6.3}  consistent {}",
            m.result.degradation,
            m.threshold,
            m.consistent()
        );
    }

    let ft = ft_lidar_estimation(pose, &res.map, &spoofed.scan, lidar)?;
    println!(
        "removed sector {} starting at {:.1} deg, width {:.1} deg",
        ft.removed_sector.index,
        ft.removed_sector.start().to_degrees(),
        ft.removed_sector.width().to_degrees()
    );
    let caught = spoofed
        .injected
        .iter()
        .all(|&i| ft.removed_sector.contains(spoofed.scan.beams()[i].angle));
    println!("all spoofed beams inside the removed sector: {caught}");
    println!(
        "after removal: degradation {:.3} <= {:.3}, offset ({:+.3}, {:+.3}), {} sectors tried",
        ft.degradation,
        ft.threshold,
        ft.offset.x,
        ft.offset.y,
        ft.tried.len()
    );
    Ok(())
}
