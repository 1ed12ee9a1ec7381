//! Grid-verify the shipped barrier certificate against the closed loop and
//! print the per-condition margins and the certified probability.

use ftsafe::barrier::safety_probability;
use ftsafe::sim::{verify_config, ScenarioConfig};

fn main() -> ftsafe::Result<()> {
    let cfg = ScenarioConfig::shipped()?;
    let res = cfg.resolve()?;
    let report = verify_config(&cfg, &res)?;

    for (name, c) in [
        ("B <= gamma on safe set", &report.condition1),
        ("B >= 1 on unsafe set", &report.condition2),
        ("supermartingale decrease", &report.condition3),
    ] {
        println!(
            "{name:26} worst margin {:+.4e} over {} samples: {}",
            c.worst_margin,
            c.samples,
            if c.ok { "ok" } else { "FAIL" }
        );
    }
    println!("min B on grid      {:+.4e}", report.min_b);
    println!("effective radius   {:.4}", report.effective_radius);
    println!(
        "P(safe over {} steps) >= {:.4}",
        report.horizon, report.safety_probability
    );
    for t in [100, 300, 1000] {
        println!(
            "  horizon {t:5}: {:.4}",
            safety_probability(cfg.certificate.gamma, cfg.certificate.c, t)
        );
    }
    println!("all conditions hold: {}", report.all_ok());
    Ok(())
}
