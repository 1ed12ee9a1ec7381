//! Compare safety-violation rates of the fault-tolerant and baseline loops
//! over a handful of seeds, against the certified probability.

use ftsafe::sim::{run_batch, Mode, Scenario, ScenarioConfig};

fn main() -> ftsafe::Result<()> {
    let mut cfg = ScenarioConfig::shipped()?;
    cfg.scenario = Scenario::InsLidarAttack;
    cfg.horizon = 150;
    cfg.certificate.verify = false;

    let (report, _) = run_batch(&cfg, 4, &[Mode::Ft, Mode::Baseline])?;
    for run in &report.runs {
        println!(
            "seed {:3} {:8} min h0 {:+9.3} violation at {:?}",
            run.seed,
            run.mode.label(),
            run.safety.min_h0,
            run.safety.first_violation
        );
    }
    for mode in [Mode::Ft, Mode::Baseline] {
        println!(
            "{:8} violation fraction {:.2}",
            mode.label(),
            report.violation_fraction(mode)
        );
    }
    println!(
        "certified safety probability over {} steps: {:.4}",
        cfg.horizon, report.certified_probability
    );
    Ok(())
}
