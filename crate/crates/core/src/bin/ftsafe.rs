use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use ftsafe::barrier::VerificationReport;
use ftsafe::ft_estimation::{match_estimate, DegradationThreshold};
use ftsafe::geometry::{load_map, PolarScan, Pose};
use ftsafe::lidar::ScanParams;
use ftsafe::ndt::NdtConfig;
use ftsafe::sim::{
    overlay_svg, require_verified, run_batch, run_resolved, run_with_partial, verify_config, Mode,
    RunArtifacts, RunOptions, Scenario, ScenarioConfig, Trace,
};
use ftsafe::Error;

#[derive(Parser)]
#[command(
    name = "ftsafe",
    version,
    about = "Fault-tolerant estimation and safe control under sensor attacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ft,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Nominal,
    InsAttack,
    InsLidarAttack,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop scenario and write its artifacts.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Horizon T in control steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the configured barrier certificate on its verification grid.
    VerifyCertificate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Match a scan against the map reconstruction at a pose.
    ScanMatch {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        scan: PathBuf,
        #[arg(long, value_parser = parse_pose)]
        pose: Pose,
        #[arg(long, default_value_t = 1.0)]
        resolution_deg: f64,
        #[arg(long, default_value_t = 30.0)]
        max_range: f64,
        #[arg(long, default_value_t = 4.0)]
        cell_size: f64,
        /// Per-beam range noise bound used for the consistency threshold.
        #[arg(long, default_value_t = 0.09)]
        noise_bound: f64,
        #[arg(long, default_value_t = 0.1)]
        margin: f64,
    },
    /// Run consecutive seeds in both modes and compare violation rates.
    Batch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_pose(s: &str) -> Result<Pose, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [x, y] = parts.as_slice() else {
        return Err(format!("expected `x,y`, got {s:?}"));
    };
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok(Pose::new(num(x)?, num(y)?))
}

/// Failure classes mapped onto the process exit code.
enum Failure {
    Config(Error),
    Safety(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::CertificateRejected(msg) => Failure::Safety(msg),
            other => Failure::Runtime(other),
        }
    }
}

fn config_stage<T>(r: ftsafe::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate {
            config,
            mode,
            scenario,
            seed,
            steps,
            out,
        } => simulate(&config, mode, scenario, seed, steps, &out),
        Command::VerifyCertificate { config } => verify(&config),
        Command::ScanMatch {
            map,
            scan,
            pose,
            resolution_deg,
            max_range,
            cell_size,
            noise_bound,
            margin,
        } => scan_match(
            &map,
            &scan,
            pose,
            resolution_deg,
            max_range,
            cell_size,
            noise_bound,
            margin,
        ),
        Command::Batch { config, seeds, out } => batch(&config, seeds, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Safety(msg)) => {
            eprintln!("safety verification failed: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|source| {
        Failure::Runtime(Error::Io {
            path: path.display().to_string(),
            source,
        })
    })
}

fn print_verification(report: &VerificationReport, epsilon: f64) {
    let line = |name: &str, c: &ftsafe::barrier::ConditionCheck| {
        println!(
            "{name}: {} (worst margin {:.4e}, {} samples)",
            if c.ok { "ok" } else { "FAILED" },
            c.worst_margin,
            c.samples
        );
        if !c.ok {
            if let Some(w) = &c.witness {
                println!("  witness: {w:?}");
            }
        }
    };
    line("condition 1 (B >= 0 on X)", &report.condition1);
    line("condition 2 (B >= 1 on unsafe set)", &report.condition2);
    line("condition 3 (expected decrease)", &report.condition3);
    println!("input deviation radius: {:.4}", report.input_radius);
    println!("effective radius: {:.4}", report.effective_radius);
    println!(
        "certified safety probability over {} steps: {:.4} (required {:.4})",
        report.horizon,
        report.safety_probability,
        1.0 - epsilon
    );
}

fn load_config(path: &Path) -> Result<ScenarioConfig, Failure> {
    config_stage(ScenarioConfig::load(path))
}

fn simulate(
    config: &Path,
    mode: Option<ModeArg>,
    scenario: Option<ScenarioArg>,
    seed: Option<u64>,
    steps: Option<usize>,
    out: &Path,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(m) = mode {
        cfg.mode = match m {
            ModeArg::Ft => Mode::Ft,
            ModeArg::Baseline => Mode::Baseline,
        };
    }
    if let Some(s) = scenario {
        cfg.scenario = match s {
            ScenarioArg::Nominal => Scenario::Nominal,
            ScenarioArg::InsAttack => Scenario::InsAttack,
            ScenarioArg::InsLidarAttack => Scenario::InsLidarAttack,
        };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = steps {
        cfg.horizon = t;
    }
    config_stage(cfg.validate())?;
    let res = config_stage(cfg.resolve())?;

    let verification = if cfg.certificate.verify {
        let report = verify_config(&cfg, &res)?;
        require_verified(&cfg, &report)?;
        Some(report)
    } else {
        None
    };
    let (artifacts, failure) =
        match run_with_partial(&cfg, &res, RunOptions::default(), verification) {
            Ok(a) => (a, None),
            Err(aborted) => (*aborted.partial, Some((aborted.k, aborted.error))),
        };
    let written = artifacts.write(out)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    if cfg.output.svg {
        let svg = trajectory_svg(&res, &artifacts);
        let path = out.join("trajectory.svg");
        write_file(&path, &svg)?;
        println!("wrote {}", path.display());
    }
    if let Some((k, e)) = failure {
        eprintln!("run aborted at step {k}; partial log written");
        return Err(Failure::Runtime(e));
    }
    let s = &artifacts.safety;
    println!(
        "{} / {} / seed {}: min h0 = {:.4}, first violation = {}",
        cfg.scenario.label(),
        cfg.mode.label(),
        cfg.seed,
        s.min_h0,
        s.first_violation
            .map_or("none".to_string(), |k| k.to_string())
    );
    Ok(())
}

fn trajectory_svg(res: &ftsafe::sim::Resolved, art: &RunArtifacts) -> String {
    const COLORS: [&str; 4] = ["#d62728", "#ff7f0e", "#9467bd", "#8c564b"];
    let states = art.states();
    let per_estimator: Vec<Vec<DVector<f64>>> = (0..art.estimator_ids.len())
        .map(|i| art.records.iter().map(|r| r.estimates[i].clone()).collect())
        .collect();
    let labels: Vec<String> = art
        .estimator_ids
        .iter()
        .map(|id| format!("estimate {id}"))
        .collect();
    let mut traces = vec![Trace {
        label: "true position",
        color: "#1f77b4",
        points: &states,
    }];
    for (i, pts) in per_estimator.iter().enumerate() {
        traces.push(Trace {
            label: &labels[i],
            color: COLORS[i % COLORS.len()],
            points: pts,
        });
    }
    overlay_svg(res, &traces)
}

fn verify(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let res = config_stage(cfg.resolve())?;
    let started = std::time::Instant::now();
    let report = verify_config(&cfg, &res)?;
    print_verification(&report, cfg.certificate.epsilon);
    println!("verified in {:.2?}", started.elapsed());
    require_verified(&cfg, &report)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn scan_match(
    map: &Path,
    scan: &Path,
    pose: Pose,
    resolution_deg: f64,
    max_range: f64,
    cell_size: f64,
    noise_bound: f64,
    margin: f64,
) -> Result<(), Failure> {
    let map = config_stage(load_map(map))?;
    let text = fs::read_to_string(scan).map_err(|source| {
        Failure::Config(Error::Io {
            path: scan.display().to_string(),
            source,
        })
    })?;
    let scan = config_stage(PolarScan::parse(&text, max_range))?;
    let params = config_stage(ScanParams::new(resolution_deg.to_radians(), max_range))?;
    let ndt = NdtConfig::with_cell_size(cell_size);
    let threshold = DegradationThreshold::NoiseBound {
        noise_bound,
        margin,
    };
    let m = match_estimate(pose, &map, &scan, &params, &ndt, &threshold)?;
    let r = &m.result;
    println!("offset = {:.6},{:.6}", r.offset.x, r.offset.y);
    println!("loss = {:.6}", r.loss);
    println!("points = {}", r.n_points);
    println!("uncovered_points = {}", r.uncovered_points);
    println!("degradation = {:.6}", r.degradation);
    println!("threshold = {:.6}", m.threshold);
    println!("consistent = {}", m.consistent());
    println!("iterations = {}", r.iterations);
    println!("converged = {}", r.converged);
    Ok(())
}

fn batch(config: &Path, seeds: u64, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    if seeds == 0 {
        return Err(Failure::Config(Error::Config(
            "--seeds must be at least 1".into(),
        )));
    }
    let res = config_stage(cfg.resolve())?;
    let (report, verification) = run_batch(&cfg, seeds, &[Mode::Ft, Mode::Baseline])?;
    fs::create_dir_all(out).map_err(|source| {
        Failure::Runtime(Error::Io {
            path: out.display().to_string(),
            source,
        })
    })?;

    let mut csv = String::from("seed,mode,min_h0,first_violation,exclusion_steps\n");
    for r in &report.runs {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.seed,
            r.mode.label(),
            r.safety.min_h0,
            r.safety
                .first_violation
                .map(|k| k.to_string())
                .unwrap_or_default(),
            r.exclusion_steps
        )
        .unwrap();
    }
    write_file(&out.join("summary.csv"), &csv)?;

    let bound = 1.0 - report.certified_probability;
    let ft = report.violation_fraction(Mode::Ft);
    let baseline = report.violation_fraction(Mode::Baseline);
    let mut summary = String::new();
    writeln!(summary, "config_hash = \"{}\"", cfg.hash()).unwrap();
    writeln!(summary, "scenario = \"{}\"", cfg.scenario.label()).unwrap();
    writeln!(summary, "seeds = {seeds}").unwrap();
    writeln!(summary, "first_seed = {}", cfg.seed).unwrap();
    writeln!(summary, "horizon = {}", cfg.horizon).unwrap();
    writeln!(summary, "ft_violation_fraction = {ft}").unwrap();
    writeln!(summary, "baseline_violation_fraction = {baseline}").unwrap();
    writeln!(summary, "certified_violation_bound = {bound}").unwrap();
    if let Some(v) = &verification {
        writeln!(summary, "certificate_verified = {}", v.all_ok()).unwrap();
    }
    write_file(&out.join("summary.toml"), &summary)?;

    let mut runs = Vec::new();
    for mode in [Mode::Ft, Mode::Baseline] {
        let mut c = cfg.clone();
        c.mode = mode;
        runs.push(run_resolved(&c, &res, RunOptions::default(), None)?.states());
    }
    let svg = overlay_svg(
        &res,
        &[
            Trace {
                label: "fault-tolerant",
                color: "#2ca02c",
                points: &runs[0],
            },
            Trace {
                label: "baseline PID",
                color: "#d62728",
                points: &runs[1],
            },
        ],
    );
    write_file(&out.join("comparison.svg"), &svg)?;

    println!("FT violation fraction:       {ft:.3}");
    println!("baseline violation fraction: {baseline:.3}");
    println!("certified bound gamma + cT:  {bound:.3}");
    if ft > bound {
        return Err(Failure::Safety(format!(
            "FT violation fraction {ft:.3} exceeds certified bound {bound:.3}"
        )));
    }
    Ok(())
}
