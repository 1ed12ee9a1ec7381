//! The delivery scenario under combined INS and LiDAR attack, flown once with
//! the fault-tolerant loop and once with the PID baseline. Writes the run
//! artifacts and an SVG overlay of both trajectories.
//!
//! Usage: cargo run --release --example urban_delivery [OUT_DIR]

use std::path::PathBuf;

use ftsafe::sim::{overlay_svg, run_resolved, Mode, RunOptions, Scenario, ScenarioConfig, Trace};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ftsafe_urban_delivery"));

    let mut cfg = ScenarioConfig::shipped()?;
    cfg.scenario = Scenario::InsLidarAttack;
    let res = cfg.resolve()?;

    let mut runs = Vec::new();
    for mode in [Mode::Ft, Mode::Baseline] {
        let mut c = cfg.clone();
        c.mode = mode;
        let art = run_resolved(&c, &res, RunOptions::default(), None)?;
        let excluded_steps = art
            .records
            .iter()
            .filter(|r| !r.excluded.is_empty())
            .count();
        println!(
            "{:8} min h0 {:+9.3}  first violation {:?}  steps with exclusions {}",
            mode.label(),
            art.safety.min_h0,
            art.safety.first_violation,
            excluded_steps
        );
        let files = art.write(&out.join(mode.label()))?;
        for f in files {
            println!("  wrote {}", f.display());
        }
        runs.push((mode, art.states()));
    }

    let traces: Vec<Trace> = runs
        .iter()
        .map(|(mode, states)| Trace {
            label: mode.label(),
            color: if *mode == Mode::Ft {
                "#1f77b4"
            } else {
                "#d62728"
            },
            points: states,
        })
        .collect();
    let svg = out.join("overlay.svg");
    std::fs::write(&svg, overlay_svg(&res, &traces))?;
    println!("overlay {}", svg.display());
    Ok(())
}
