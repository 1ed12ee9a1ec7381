//! Run one Kalman filter per proprioceptive sensor on the UAV model while a
//! bias is injected into the first sensor, and print each filter's error.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ftsafe::attack::{inject_fdi, ActiveWindow, FdiSpec};
use ftsafe::estimation::{ekf_step, SensorModel};
use ftsafe::sim::{step_dynamics, ScenarioConfig};

fn main() -> ftsafe::Result<()> {
    let cfg = ScenarioConfig::shipped()?;
    let res = cfg.resolve()?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let fdi = FdiSpec::new(
        BTreeMap::from([(1, DVector::from_vec(vec![-20.0, 0.0]))]),
        ActiveWindow::new(40, 80)?,
    )?;
    let mut bank = res.bank(&vec![res.initial_state.clone(); res.sensors.len()])?;
    let mut x = res.initial_state.clone();

    println!("   k  |x - xhat1|  |x - xhat2|");
    for k in 0..120 {
        let u = res.controller.nominal(&bank[1].estimate)?;
        x = step_dynamics(&res.system, &x, &u, &mut rng);
        for (entry, sensor) in bank.iter_mut().zip(&res.sensors) {
            let r = sensor.measurement_noise().map(f64::sqrt);
            let w = DVector::from_fn(2, |i, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                r[(i, i)] * z
            });
            let y = inject_fdi(&(sensor.observe(&x) + w), &fdi, sensor.id(), k)?;
            *entry = ekf_step(&res.system, sensor, entry, &u, &y)?;
        }
        if k % 10 == 9 {
            let errs: Vec<f64> = bank.iter().map(|e| (&x - &e.estimate).norm()).collect();
            println!("{:4}  {:10.3}  {:10.3}", k + 1, errs[0], errs[1]);
        }
    }
    println!("bias active on sensor 1 for k in 40..=80");
    Ok(())
}
