//! Fault-tolerant input selection.
//!
//! Every active estimator `i` proposes its nominal input `uᵢ = π₀ + K_c x̂ᵢ`
//! and owns the ball `‖u − uᵢ‖ ≤ ξ − ‖K_c‖ ζ̄ᵢ`. An input inside every ball of
//! an honest estimator stays within `ξ` of the true-state nominal input. When
//! the balls do not intersect, estimators are excluded: first by the LiDAR
//! trust criteria, then by largest measurement residual.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::barrier::BarrierCertificate;
use crate::error::{Error, Result};
use crate::estimation::{residual, EstimatorEntry, SensorModel};
use crate::ft_estimation::{evaluate_trust, TrustConfig, TrustReport};
use crate::geometry::{PointCloudMap, PolarScan};

/// `π(x̂) = π₀ + K_c x̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalController {
    pub offset: DVector<f64>,
    pub gain: DMatrix<f64>,
    gain_norm: f64,
}

impl NominalController {
    pub fn new(offset: DVector<f64>, gain: DMatrix<f64>) -> Result<Self> {
        if offset.len() != gain.nrows() {
            return Err(Error::InvalidInput(
                "controller offset and gain rows differ".into(),
            ));
        }
        if offset.iter().chain(gain.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "controller entries must be finite".into(),
            ));
        }
        let gain_norm = gain.clone().singular_values().max();
        Ok(Self {
            offset,
            gain,
            gain_norm,
        })
    }

    /// Spectral norm `‖K_c‖₂`.
    pub fn gain_norm(&self) -> f64 {
        self.gain_norm
    }

    pub fn nominal(&self, x_hat: &DVector<f64>) -> Result<DVector<f64>> {
        if x_hat.len() != self.gain.ncols() {
            return Err(Error::InvalidInput(format!(
                "state has dimension {} but gain expects {}",
                x_hat.len(),
                self.gain.ncols()
            )));
        }
        Ok(&self.offset + &self.gain * x_hat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallConstraint {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl BallConstraint {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "ball radius {radius} must be > 0"
            )));
        }
        Ok(Self { center, radius })
    }

    /// `‖u − center‖ − radius`; non-positive inside.
    pub fn violation(&self, u: &DVector<f64>) -> f64 {
        (u - &self.center).norm() - self.radius
    }

    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        let d = u - &self.center;
        let n = d.norm();
        if n <= self.radius {
            u.clone()
        } else {
            &self.center + d * (self.radius / n)
        }
    }
}

fn max_violation(balls: &[BallConstraint], u: &DVector<f64>) -> f64 {
    balls
        .iter()
        .map(|b| b.violation(u))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `J(u) = ½ uᵀHu + gᵀu` with `H` positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    h: DMatrix<f64>,
    g: DVector<f64>,
    lipschitz: f64,
}

impl QuadraticCost {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Result<Self> {
        if h.nrows() != g.len() || !h.is_square() {
            return Err(Error::InvalidInput("cost dimensions differ".into()));
        }
        let sym = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        if !(eig.eigenvalues.min() > 0.0) {
            return Err(Error::InvalidInput(
                "cost Hessian must be positive definite".into(),
            ));
        }
        Ok(Self {
            h: sym,
            g,
            lipschitz: eig.eigenvalues.max(),
        })
    }

    /// `‖u − target‖²` (up to a constant).
    pub fn distance_to(target: &DVector<f64>) -> Self {
        let n = target.len();
        Self::new(DMatrix::identity(n, n) * 2.0, target * -2.0).expect("2I is positive definite")
    }

    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.g.dot(u)
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.h * u + &self.g
    }

    pub fn minimizer(&self) -> DVector<f64> {
        -self
            .h
            .clone()
            .cholesky()
            .expect("validated positive definite")
            .solve(&self.g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub step_tol: f64,
    pub feasibility_rounds: usize,
    pub feasibility_tol: f64,
    pub projection_rounds: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            step_tol: 1e-8,
            feasibility_rounds: 2000,
            feasibility_tol: 1e-7,
            projection_rounds: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Solution {
    Optimal(DVector<f64>),
    Infeasible,
}

/// Euclidean projection onto the intersection of the balls (Dykstra's
/// alternating projections). Assumes the intersection is nonempty.
fn project_intersection(balls: &[BallConstraint], z: &DVector<f64>, rounds: usize) -> DVector<f64> {
    if balls.len() == 1 {
        return balls[0].project(z);
    }
    let mut x = z.clone();
    let mut corr = vec![DVector::zeros(z.len()); balls.len()];
    for _ in 0..rounds {
        let before = x.clone();
        for (ball, p) in balls.iter().zip(corr.iter_mut()) {
            let y = &x + &*p;
            x = ball.project(&y);
            *p = y - &x;
        }
        if (&x - before).norm() <= 1e-15 * (1.0 + x.norm()) && max_violation(balls, &x) <= 0.0 {
            break;
        }
    }
    x
}

/// Pull a nearly feasible point into every ball.
fn polish(balls: &[BallConstraint], mut u: DVector<f64>) -> DVector<f64> {
    for _ in 0..100 {
        if max_violation(balls, &u) <= 0.0 {
            break;
        }
        for b in balls {
            u = b.project(&u);
        }
    }
    u
}

/// Minimize `cost` over the intersection of `balls`, or report that the
/// intersection is empty.
pub fn solve_constrained(
    cost: &QuadraticCost,
    balls: &[BallConstraint],
    cfg: &SolverConfig,
) -> Result<Solution> {
    if balls.is_empty() {
        return Err(Error::InvalidInput("need at least one ball".into()));
    }
    if balls.iter().any(|b| b.center.len() != cost.g.len()) {
        return Err(Error::InvalidInput(
            "ball and cost dimensions differ".into(),
        ));
    }

    let free = cost.minimizer();
    if max_violation(balls, &free) <= 0.0 {
        return Ok(Solution::Optimal(free));
    }

    let mut x = free.clone();
    let mut feasible = false;
    for _ in 0..cfg.feasibility_rounds {
        for b in balls {
            x = b.project(&x);
        }
        if max_violation(balls, &x) <= cfg.feasibility_tol {
            feasible = true;
            break;
        }
    }
    if !feasible {
        return Ok(Solution::Infeasible);
    }

    let step = 1.0 / cost.lipschitz;
    let mut u = project_intersection(balls, &x, cfg.projection_rounds);
    let mut last_step = f64::INFINITY;
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let next = project_intersection(
            balls,
            &(&u - cost.gradient(&u) * step),
            cfg.projection_rounds,
        );
        last_step = (&next - &u).norm();
        u = next;
        if last_step < cfg.step_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SolverDiverged {
            iterations: cfg.max_iter,
            last_step,
        });
    }
    let u = polish(balls, u);
    if max_violation(balls, &u) > 1e-9 {
        return Ok(Solution::Infeasible);
    }
    Ok(Solution::Optimal(u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlPath {
    Direct,
    Qcqp,
    PostFtQcqp,
    ResiduePrune,
}

impl ControlPath {
    pub fn label(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Qcqp => "qcqp",
            Self::PostFtQcqp => "post_ft_qcqp",
            Self::ResiduePrune => "residue_prune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDecision {
    pub u: DVector<f64>,
    /// `u − π(x̂_α)` for the final anchor `α`.
    pub u_hat: DVector<f64>,
    pub path: ControlPath,
    pub anchor: usize,
    pub active: BTreeSet<usize>,
    pub excluded_this_step: BTreeSet<usize>,
    pub trust: Option<TrustReport>,
}

/// LiDAR evidence available to the escalation. A precomputed report is used
/// as-is instead of re-running the trust criteria.
pub struct LidarEvidence<'a> {
    pub map: &'a PointCloudMap,
    pub scan: &'a PolarScan,
    pub trust: &'a TrustConfig,
    pub precomputed: Option<&'a TrustReport>,
}

pub struct ControlContext<'a> {
    pub ctrl: &'a NominalController,
    pub cert: &'a BarrierCertificate,
    pub solver: &'a SolverConfig,
    pub lidar: Option<LidarEvidence<'a>>,
}

/// Latest measurement for each estimator's sensor, aligned with the bank.
pub struct Observation<'a> {
    pub sensor: &'a dyn SensorModel,
    pub y: &'a DVector<f64>,
}

struct Candidate {
    id: usize,
    error_bound: f64,
    nominal: DVector<f64>,
    ball: BallConstraint,
}

fn anchor_of<'c>(cands: &'c [Candidate], active: &BTreeSet<usize>) -> &'c Candidate {
    cands
        .iter()
        .filter(|c| active.contains(&c.id))
        .min_by(|a, b| {
            a.error_bound
                .total_cmp(&b.error_bound)
                .then(a.id.cmp(&b.id))
        })
        .expect("active set is nonempty")
}

fn solve_active(
    cands: &[Candidate],
    active: &BTreeSet<usize>,
    solver: &SolverConfig,
) -> Result<(Solution, usize)> {
    let anchor = anchor_of(cands, active);
    let balls: Vec<BallConstraint> = cands
        .iter()
        .filter(|c| active.contains(&c.id))
        .map(|c| c.ball.clone())
        .collect();
    let sol = solve_constrained(&QuadraticCost::distance_to(&anchor.nominal), &balls, solver)?;
    Ok((sol, anchor.id))
}

/// One step of fault-tolerant input selection over the estimators in
/// `active` (ids into `bank`).
pub fn ft_control_step(
    bank: &[EstimatorEntry],
    observations: &[Observation<'_>],
    active: &BTreeSet<usize>,
    ctx: &ControlContext<'_>,
) -> Result<ControlDecision> {
    if bank.is_empty() || active.is_empty() {
        return Err(Error::InvalidInput("no active estimators".into()));
    }
    if observations.len() != bank.len() {
        return Err(Error::InvalidInput(
            "one observation per estimator required".into(),
        ));
    }

    let mut cands = Vec::new();
    for e in bank.iter().filter(|e| active.contains(&e.id)) {
        let radius = ctx.cert.effective_radius(ctx.ctrl, e.error_bound);
        let nominal = ctx.ctrl.nominal(&e.estimate)?;
        let ball = BallConstraint::new(nominal.clone(), radius).map_err(|_| {
            Error::InvalidInput(format!(
                "estimator {}: effective radius {radius} must be > 0",
                e.id
            ))
        })?;
        cands.push(Candidate {
            id: e.id,
            error_bound: e.error_bound,
            nominal,
            ball,
        });
    }
    let mut active: BTreeSet<usize> = cands.iter().map(|c| c.id).collect();
    if active.is_empty() {
        return Err(Error::InvalidInput(
            "active ids not found in the bank".into(),
        ));
    }
    let mut excluded = BTreeSet::new();
    let mut trust = None;

    let finish =
        |u: DVector<f64>, path, active: BTreeSet<usize>, excluded, trust, cands: &[Candidate]| {
            let anchor = anchor_of(cands, &active);
            ControlDecision {
                u_hat: &u - &anchor.nominal,
                u,
                path,
                anchor: anchor.id,
                active,
                excluded_this_step: excluded,
                trust,
            }
        };

    let anchor = anchor_of(&cands, &active);
    let in_all = cands
        .iter()
        .all(|c| c.ball.violation(&anchor.nominal) <= 0.0);
    if in_all {
        let u = anchor.nominal.clone();
        return Ok(finish(
            u,
            ControlPath::Direct,
            active,
            excluded,
            trust,
            &cands,
        ));
    }

    if let (Solution::Optimal(u), _) = solve_active(&cands, &active, ctx.solver)? {
        return Ok(finish(
            u,
            ControlPath::Qcqp,
            active,
            excluded,
            trust,
            &cands,
        ));
    }

    if let Some(ev) = &ctx.lidar {
        let report = match ev.precomputed {
            Some(r) => r.clone(),
            None => evaluate_trust(bank, ev.map, ev.scan, ev.trust)?,
        };
        let kept: BTreeSet<usize> = active.intersection(&report.trusted).copied().collect();
        let dropped: BTreeSet<usize> = active.difference(&kept).copied().collect();
        trust = Some(report);
        if !kept.is_empty() && !dropped.is_empty() {
            excluded.extend(dropped);
            active = kept;
            if let (Solution::Optimal(u), _) = solve_active(&cands, &active, ctx.solver)? {
                return Ok(finish(
                    u,
                    ControlPath::PostFtQcqp,
                    active,
                    excluded,
                    trust,
                    &cands,
                ));
            }
        }
    }

    let residual_norm = |id: usize| -> f64 {
        let pos = bank.iter().position(|e| e.id == id).expect("id from bank");
        residual(observations[pos].sensor, &bank[pos], observations[pos].y).norm()
    };
    while active.len() > 1 {
        let worst = active
            .iter()
            .copied()
            .max_by(|&a, &b| {
                residual_norm(a)
                    .total_cmp(&residual_norm(b))
                    .then(a.cmp(&b))
            })
            .expect("nonempty");
        active.remove(&worst);
        excluded.insert(worst);
        if let (Solution::Optimal(u), _) = solve_active(&cands, &active, ctx.solver)? {
            return Ok(finish(
                u,
                ControlPath::ResiduePrune,
                active,
                excluded,
                trust,
                &cands,
            ));
        }
    }
    let u = anchor_of(&cands, &active).nominal.clone();
    Ok(finish(
        u,
        ControlPath::ResiduePrune,
        active,
        excluded,
        trust,
        &cands,
    ))
}
