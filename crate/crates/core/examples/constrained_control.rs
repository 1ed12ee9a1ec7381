//! Input selection over a bank whose estimates disagree: first a feasible
//! intersection of deviation balls, then a disjoint one resolved by pruning
//! the estimator with the largest residual.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use ftsafe::barrier::{BarrierCertificate, Polynomial};
use ftsafe::control::{
    ft_control_step, BallConstraint, ControlContext, NominalController, Observation, SolverConfig,
};
use ftsafe::estimation::{EstimatorEntry, LinearSensor};

fn v2(x: f64, y: f64) -> DVector<f64> {
    DVector::from_vec(vec![x, y])
}

fn main() -> ftsafe::Result<()> {
    let ctrl = NominalController::new(v2(0.0, 0.0), DMatrix::identity(2, 2) * -0.5)?;
    let cert = BarrierCertificate::new(Polynomial::zero(2), 0.2, 0.0, 1.5)?;
    let solver = SolverConfig::default();
    let ctx = ControlContext {
        ctrl: &ctrl,
        cert: &cert,
        solver: &solver,
        lidar: None,
    };
    let sensors = [
        LinearSensor::identity(1, DMatrix::identity(2, 2))?,
        LinearSensor::identity(2, DMatrix::identity(2, 2))?,
    ];
    let y = v2(0.0, 0.0);
    let obs: Vec<Observation> = sensors
        .iter()
        .map(|s| Observation { sensor: s, y: &y })
        .collect();
    let active = BTreeSet::from([1, 2]);

    for (label, far) in [
        ("close estimates", v2(1.2, 0.0)),
        ("distant estimates", v2(-20.0, 0.0)),
    ] {
        let bank = [
            EstimatorEntry::new(1, vec![1], far, DMatrix::identity(2, 2), 0.5)?,
            EstimatorEntry::new(2, vec![2], v2(0.0, 0.0), DMatrix::identity(2, 2), 0.5)?,
        ];
        let radius = cert.effective_radius(&ctrl, 0.5);
        let balls = bank
            .iter()
            .map(|e| BallConstraint::new(ctrl.nominal(&e.estimate)?, radius))
            .collect::<ftsafe::Result<Vec<_>>>()?;
        let d = ft_control_step(&bank, &obs, &active, &ctx)?;
        println!("{label}:");
        println!("  ball radius {radius:.3}, path {}", d.path.label());
        println!(
            "  u = ({:+.3}, {:+.3}), anchor {}",
            d.u[0], d.u[1], d.anchor
        );
        println!("  excluded this step {:?}", d.excluded_this_step);
        for (e, b) in bank.iter().zip(&balls) {
            println!("  ball {} violation {:+.2e}", e.id, b.violation(&d.u));
        }
    }
    Ok(())
}
