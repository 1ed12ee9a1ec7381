//! Closed-loop simulation of the UAV delivery case study: planar position
//! dynamics, two INS-driven filters, a LiDAR against a known city map, the
//! attack scripts, and either the fault-tolerant controller or a PID baseline
//! running on the first INS.

mod artifacts;
pub mod config;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

pub use artifacts::{overlay_svg, render_svg, Trace};
pub use config::{Mode, Resolved, Scenario, ScenarioConfig};

use crate::attack::{inject_fdi, spoof_scan};
use crate::barrier::{safety_probability, verify_certificate, Polynomial, VerificationReport};
use crate::control::{
    ft_control_step, ControlContext, ControlPath, LidarEvidence, Observation, SolverConfig,
};
use crate::error::{Error, Result};
use crate::estimation::{ekf_step, LinearSystem, SensorModel, SystemModel};
use crate::ft_estimation::{evaluate_trust, Criterion, TrustReport};
use crate::geometry::{PolarScan, Pose};
use crate::lidar::sense_lidar;

const STREAM_PROCESS: u64 = 1;
const STREAM_INITIAL: u64 = 2;
const STREAM_LIDAR: u64 = 3;
const STREAM_SPOOF: u64 = 4;
const STREAM_SENSOR_BASE: u64 = 100;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Zero-mean Gaussian draw with covariance `cov`.
fn gaussian(rng: &mut ChaCha8Rng, cov: &DMatrix<f64>) -> DVector<f64> {
    let n = cov.nrows();
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    match cov.clone().cholesky() {
        Some(ch) => ch.l() * z,
        // positive semidefinite (e.g. zero) covariance
        None => {
            let eig = nalgebra::SymmetricEigen::new(cov.clone());
            &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
                * z
        }
    }
}

/// The planar UAV position model with the default matrices.
pub fn uav_model(process_noise: DMatrix<f64>) -> Result<LinearSystem> {
    LinearSystem::new(
        DMatrix::from_row_slice(2, 2, &[1.0, -4.29e-5, -1.47e-5, 1.0]),
        DMatrix::from_row_slice(2, 2, &[0.0019, -1.93e-5, -2.91e-4, 0.0028]),
        process_noise,
    )
}

/// `x⁺ = A x + B u + w`, `w ~ N(0, Q)`.
pub fn step_dynamics(
    model: &LinearSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> DVector<f64> {
    model.transition(x, u) + gaussian(rng, model.process_noise())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub state: DVector<f64>,
    pub estimates: Vec<DVector<f64>>,
    /// Applied input; `None` on the final row.
    pub input: Option<DVector<f64>>,
    pub path: Option<ControlPath>,
    pub trusted: Option<BTreeSet<usize>>,
    pub excluded: BTreeSet<usize>,
    /// Full-scan degradation per estimator (FT mode).
    pub degradations: Vec<f64>,
    pub h0: f64,
    /// `‖u − π(x)‖ ≤ ξ`, checked when the anchor estimator is within its
    /// error bound.
    pub deviation_budget_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRow {
    pub k: usize,
    pub estimator: usize,
    pub criterion: Criterion,
    pub offset: [f64; 2],
    pub degradation: f64,
    pub threshold: f64,
    /// `(start, width)` of the removed sector, radians.
    pub removed_sector: Option<(f64, f64)>,
    pub lidar_trusted: bool,
}

/// LiDAR evidence at one step, kept when scans are recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarStep {
    pub k: usize,
    pub scan: PolarScan,
    pub injected_angles: Vec<f64>,
    pub estimates: Vec<DVector<f64>>,
    pub state: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyReport {
    pub min_h0: f64,
    pub first_violation: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub scenario: Scenario,
    pub mode: Mode,
    pub horizon: usize,
    pub departures: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metadata: RunMetadata,
    pub records: Vec<StepRecord>,
    pub trust_rows: Vec<TrustRow>,
    pub lidar_log: Vec<LidarStep>,
    pub snapshots: Vec<(usize, PolarScan)>,
    pub safety: SafetyReport,
    pub verification: Option<VerificationReport>,
    pub estimator_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Verify the certificate before stepping (when the config asks for it).
    pub verify: bool,
    /// Keep every step's scan in [`RunArtifacts::lidar_log`].
    pub record_scans: bool,
}

/// `min_k h₀(x[k])` and the first step with `h₀ < 0`.
pub fn evaluate_safety(states: &[DVector<f64>], h0: &Polynomial) -> Result<SafetyReport> {
    if states.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    let values: Vec<f64> = states.iter().map(|x| h0.eval(x.as_slice())).collect();
    Ok(SafetyReport {
        min_h0: values.iter().copied().fold(f64::INFINITY, f64::min),
        first_violation: values.iter().position(|v| *v < 0.0),
    })
}

/// Verify the configured certificate against the closed loop.
pub fn verify_config(cfg: &ScenarioConfig, res: &Resolved) -> Result<VerificationReport> {
    let anchor_bound = res
        .error_bounds
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    verify_certificate(
        &res.certificate,
        &res.sets,
        &res.system,
        &res.controller,
        anchor_bound,
        &res.grid,
        cfg.horizon,
    )
}

/// Fail with [`Error::CertificateRejected`] unless every condition holds and
/// the certified probability meets `1 − ε`.
pub fn require_verified(cfg: &ScenarioConfig, report: &VerificationReport) -> Result<()> {
    let need = 1.0 - cfg.certificate.epsilon;
    if !report.all_ok() {
        return Err(Error::CertificateRejected(format!(
            "margins: condition1 {:.3e}, condition2 {:.3e}, condition3 {:.3e}, min B {:.3e}",
            report.condition1.worst_margin,
            report.condition2.worst_margin,
            report.condition3.worst_margin,
            report.min_b
        )));
    }
    if report.safety_probability < need {
        return Err(Error::CertificateRejected(format!(
            "certified probability {:.4} below required {need:.4}",
            report.safety_probability
        )));
    }
    Ok(())
}

struct Pid {
    waypoint: usize,
    integral: DVector<f64>,
    previous: Option<DVector<f64>>,
}

impl Pid {
    fn input(
        &mut self,
        cfg: &ScenarioConfig,
        res: &Resolved,
        x_hat: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let wps = &cfg.baseline.waypoints;
        let target = |i: usize| DVector::from_column_slice(&wps[i]);
        let mut goal = target(self.waypoint);
        while (&goal - x_hat).norm() < cfg.baseline.acceptance_radius
            && self.waypoint + 1 < wps.len()
        {
            self.waypoint += 1;
            goal = target(self.waypoint);
        }
        let n = x_hat.len();
        let a = &res.system.a;
        let b_inv = res
            .system
            .b
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Config("B not invertible".into()))?;
        let feedforward = &b_inv * (DMatrix::identity(n, n) - a) * &goal;
        let e = &goal - x_hat;
        self.integral += &e;
        let de = self
            .previous
            .as_ref()
            .map_or_else(|| DVector::zeros(n), |p| &e - p);
        self.previous = Some(e.clone());
        let kp = -&res.controller.gain;
        Ok(feedforward + kp * (e + &self.integral * cfg.baseline.ki + de * cfg.baseline.kd))
    }
}

/// Run one closed-loop scenario as configured.
pub fn run_scenario(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunArtifacts> {
    let res = cfg.resolve()?;
    let verification = if opts.verify && cfg.certificate.verify {
        let report = verify_config(cfg, &res)?;
        require_verified(cfg, &report)?;
        Some(report)
    } else {
        None
    };
    run_resolved(cfg, &res, opts, verification)
}

/// [`run_scenario`] with the configuration already resolved.
pub fn run_resolved(
    cfg: &ScenarioConfig,
    res: &Resolved,
    opts: RunOptions,
    verification: Option<VerificationReport>,
) -> Result<RunArtifacts> {
    run_with_partial(cfg, res, opts, verification).map_err(|a| a.error)
}

/// A run that stopped at step `k` with `error`; `partial` holds everything
/// logged before it.
#[derive(Debug)]
pub struct Aborted {
    pub k: usize,
    pub error: Error,
    pub partial: Box<RunArtifacts>,
}

/// [`run_resolved`], keeping the partial log when a step fails.
pub fn run_with_partial(
    cfg: &ScenarioConfig,
    res: &Resolved,
    opts: RunOptions,
    verification: Option<VerificationReport>,
) -> std::result::Result<RunArtifacts, Aborted> {
    let seed = cfg.seed;
    let mut process_rng = stream(seed, STREAM_PROCESS);
    let mut initial_rng = stream(seed, STREAM_INITIAL);
    let mut lidar_rng = stream(seed, STREAM_LIDAR);
    let mut spoof_rng = stream(seed, STREAM_SPOOF);
    let mut sensor_rngs: Vec<ChaCha8Rng> = res
        .sensors
        .iter()
        .map(|s| stream(seed, STREAM_SENSOR_BASE + s.id() as u64))
        .collect();

    let mut x = res.initial_state.clone();
    let starts: Vec<DVector<f64>> = res
        .initial_covariances
        .iter()
        .map(|p0| &x + gaussian(&mut initial_rng, p0))
        .collect();
    let mut bank = res.bank(&starts).map_err(|error| Aborted {
        k: 0,
        error,
        partial: Box::new(empty_artifacts(cfg, res)),
    })?;
    let ids: Vec<usize> = bank.iter().map(|e| e.id).collect();
    let all_ids: BTreeSet<usize> = ids.iter().copied().collect();
    let mut persistent_active = all_ids.clone();

    let solver = SolverConfig::default();
    let mut pid = Pid {
        waypoint: 0,
        integral: DVector::zeros(x.len()),
        previous: None,
    };

    let mut records = Vec::with_capacity(cfg.horizon + 1);
    let mut trust_rows = Vec::new();
    let mut lidar_log = Vec::new();
    let mut snapshots = Vec::new();

    let mut failure = None;
    for k in 0..=cfg.horizon {
        if let Err(e) = (|| -> Result<()> {
            let h0 = res.sets.safe.eval(x.as_slice());
            let estimates: Vec<DVector<f64>> = bank.iter().map(|e| e.estimate.clone()).collect();
            if k == cfg.horizon {
                records.push(StepRecord {
                    k,
                    state: x.clone(),
                    estimates,
                    input: None,
                    path: None,
                    trusted: None,
                    excluded: BTreeSet::new(),
                    degradations: Vec::new(),
                    h0,
                    deviation_budget_ok: None,
                });
                return Ok(());
            }

            let mut measurements = Vec::with_capacity(bank.len());
            for (sensor, rng) in res.sensors.iter().zip(sensor_rngs.iter_mut()) {
                let clean = sensor.observe(&x) + gaussian(rng, sensor.measurement_noise());
                let y = match &res.fdi {
                    Some(spec) => inject_fdi(&clean, spec, sensor.id(), k)?,
                    None => clean,
                };
                measurements.push(y);
            }

            let truth = Pose::new(x[0], x[1]);
            let honest_scan = sense_lidar(
                truth,
                &res.map,
                &res.scan_params,
                &res.lidar_noise,
                &mut lidar_rng,
            );
            let (scan, injected) = match &res.spoof {
                Some(spec) => {
                    let out = spoof_scan(&honest_scan, spec, k, &mut spoof_rng);
                    let angles = out
                        .injected
                        .iter()
                        .map(|&i| out.scan.beams()[i].angle)
                        .collect();
                    (out.scan, angles)
                }
                None => (honest_scan, Vec::new()),
            };
            if cfg.output.snapshot_steps.contains(&k) {
                snapshots.push((k, scan.clone()));
            }
            if opts.record_scans {
                lidar_log.push(LidarStep {
                    k,
                    scan: scan.clone(),
                    injected_angles: injected,
                    estimates: estimates.clone(),
                    state: x.clone(),
                });
            }

            let record = match cfg.mode {
                Mode::Ft => {
                    let report = evaluate_trust(&bank, &res.map, &scan, &res.trust)?;
                    push_trust_rows(&mut trust_rows, k, &report);
                    let observations: Vec<Observation<'_>> = res
                        .sensors
                        .iter()
                        .zip(&measurements)
                        .map(|(s, y)| Observation { sensor: s, y })
                        .collect();
                    let active = if cfg.controller.persistent_exclusion {
                        persistent_active.clone()
                    } else {
                        all_ids.clone()
                    };
                    let ctx = ControlContext {
                        ctrl: &res.controller,
                        cert: &res.certificate,
                        solver: &solver,
                        lidar: Some(LidarEvidence {
                            map: &res.map,
                            scan: &scan,
                            trust: &res.trust,
                            precomputed: Some(&report),
                        }),
                    };
                    let decision = ft_control_step(&bank, &observations, &active, &ctx)?;
                    if cfg.controller.persistent_exclusion
                        && decision.active.len() < persistent_active.len()
                    {
                        persistent_active = decision.active.clone();
                    }
                    let anchor = bank
                        .iter()
                        .find(|e| e.id == decision.anchor)
                        .expect("anchor in bank");
                    let honest = (&anchor.estimate - &x).norm() <= anchor.error_bound;
                    let deviation_budget_ok = honest.then(|| {
                        let true_nominal =
                            res.controller.nominal(&x).expect("dimensions validated");
                        (&decision.u - true_nominal).norm() <= res.certificate.xi + 1e-9
                    });
                    debug_assert_ne!(
                        deviation_budget_ok,
                        Some(false),
                        "step {k}: input left the deviation budget under an honest anchor"
                    );
                    StepRecord {
                        k,
                        state: x.clone(),
                        estimates,
                        input: Some(decision.u.clone()),
                        path: Some(decision.path),
                        trusted: Some(report.trusted.clone()),
                        excluded: decision.excluded_this_step.clone(),
                        degradations: report
                            .verdicts
                            .iter()
                            .map(|v| v.full.result.degradation)
                            .collect(),
                        h0,
                        deviation_budget_ok,
                    }
                }
                Mode::Baseline => {
                    let u = pid.input(cfg, res, &bank[0].estimate)?;
                    StepRecord {
                        k,
                        state: x.clone(),
                        estimates,
                        input: Some(u),
                        path: None,
                        trusted: None,
                        excluded: BTreeSet::new(),
                        degradations: Vec::new(),
                        h0,
                        deviation_budget_ok: None,
                    }
                }
            };
            let u = record.input.clone().expect("set above");
            records.push(record);

            x = step_dynamics(&res.system, &x, &u, &mut process_rng);
            for ((entry, sensor), y) in bank.iter_mut().zip(&res.sensors).zip(&measurements) {
                *entry = ekf_step(&res.system, sensor, entry, &u, y)?;
            }
            Ok(())
        })() {
            failure = Some((k, e));
            break;
        }
    }

    let states: Vec<DVector<f64>> = records.iter().map(|r| r.state.clone()).collect();
    let safety = evaluate_safety(&states, &res.sets.safe).unwrap_or(SafetyReport {
        min_h0: f64::INFINITY,
        first_violation: None,
    });
    let artifacts = RunArtifacts {
        metadata: RunMetadata {
            config_hash: cfg.hash(),
            seed,
            scenario: cfg.scenario,
            mode: cfg.mode,
            horizon: cfg.horizon,
            departures: res.departures.clone(),
        },
        records,
        trust_rows,
        lidar_log,
        snapshots,
        safety,
        verification,
        estimator_ids: ids,
    };
    match failure {
        None => Ok(artifacts),
        Some((k, error)) => Err(Aborted {
            k,
            error,
            partial: Box::new(artifacts),
        }),
    }
}

fn empty_artifacts(cfg: &ScenarioConfig, res: &Resolved) -> RunArtifacts {
    RunArtifacts {
        metadata: RunMetadata {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            scenario: cfg.scenario,
            mode: cfg.mode,
            horizon: cfg.horizon,
            departures: res.departures.clone(),
        },
        records: Vec::new(),
        trust_rows: Vec::new(),
        lidar_log: Vec::new(),
        snapshots: Vec::new(),
        safety: SafetyReport {
            min_h0: f64::INFINITY,
            first_violation: None,
        },
        verification: None,
        estimator_ids: res.sensors.iter().map(|s| s.id()).collect(),
    }
}

fn push_trust_rows(rows: &mut Vec<TrustRow>, k: usize, report: &TrustReport) {
    for v in &report.verdicts {
        let (offset, degradation, threshold, removed_sector) = match &v.sector_removal {
            Some(ft) if v.criterion == Criterion::CaseII => (
                ft.offset,
                ft.degradation,
                ft.threshold,
                Some((ft.removed_sector.start(), ft.removed_sector.width())),
            ),
            _ => (
                v.full.result.offset,
                v.full.result.degradation,
                v.full.threshold,
                None,
            ),
        };
        rows.push(TrustRow {
            k,
            estimator: v.id,
            criterion: v.criterion,
            offset: [offset.x, offset.y],
            degradation,
            threshold,
            removed_sector,
            lidar_trusted: report.lidar_trusted,
        });
    }
}

impl RunArtifacts {
    pub fn states(&self) -> Vec<DVector<f64>> {
        self.records.iter().map(|r| r.state.clone()).collect()
    }

    /// `‖x − x̂ᵢ‖` per step, one column per estimator.
    pub fn estimation_errors(&self) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .map(|r| r.estimates.iter().map(|e| (e - &r.state).norm()).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRun {
    pub seed: u64,
    pub mode: Mode,
    pub safety: SafetyReport,
    /// Steps at which some estimator was excluded.
    pub exclusion_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub runs: Vec<BatchRun>,
    pub certified_probability: f64,
}

impl BatchReport {
    pub fn violation_fraction(&self, mode: Mode) -> f64 {
        let runs: Vec<&BatchRun> = self.runs.iter().filter(|r| r.mode == mode).collect();
        if runs.is_empty() {
            return 0.0;
        }
        runs.iter()
            .filter(|r| r.safety.first_violation.is_some())
            .count() as f64
            / runs.len() as f64
    }
}

/// Run `seeds` consecutive seeds (starting at the config seed) in each mode,
/// in parallel. The certificate is verified once beforehand when configured.
pub fn run_batch(
    cfg: &ScenarioConfig,
    seeds: u64,
    modes: &[Mode],
) -> Result<(BatchReport, Option<VerificationReport>)> {
    let res = cfg.resolve()?;
    let verification = if cfg.certificate.verify {
        let report = verify_config(cfg, &res)?;
        require_verified(cfg, &report)?;
        Some(report)
    } else {
        None
    };
    let jobs: Vec<(u64, Mode)> = (0..seeds)
        .flat_map(|i| modes.iter().map(move |m| (cfg.seed + i, *m)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, mode)| -> Result<BatchRun> {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            run_cfg.mode = mode;
            let art = run_resolved(&run_cfg, &res, RunOptions::default(), None)?;
            Ok(BatchRun {
                seed,
                mode,
                safety: art.safety,
                exclusion_steps: art
                    .records
                    .iter()
                    .filter(|r| !r.excluded.is_empty())
                    .count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        BatchReport {
            runs,
            certified_probability: safety_probability(
                cfg.certificate.gamma,
                cfg.certificate.c,
                cfg.horizon,
            ),
        },
        verification,
    ))
}

/// Per-estimator attack-free error bound: the 99th percentile of `‖x − x̂ᵢ‖`
/// over `seeds` nominal runs, plus 50%.
pub fn calibrate_error_bounds(cfg: &ScenarioConfig, seeds: u64) -> Result<Vec<f64>> {
    let mut base = cfg.clone();
    base.scenario = Scenario::Nominal;
    base.mode = Mode::Baseline;
    let res = base.resolve()?;
    let per_seed = (0..seeds)
        .into_par_iter()
        .map(|i| {
            let mut c = base.clone();
            c.seed = cfg.seed + i;
            run_resolved(&c, &res, RunOptions::default(), None).map(|a| a.estimation_errors())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.sensors.len();
    Ok((0..n)
        .map(|j| {
            let mut all: Vec<f64> = per_seed.iter().flatten().map(|row| row[j]).collect();
            all.sort_by(f64::total_cmp);
            let idx = ((all.len() as f64 * 0.99).ceil() as usize).clamp(1, all.len()) - 1;
            all[idx] * 1.5
        })
        .collect())
}
