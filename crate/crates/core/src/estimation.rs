//! Discrete-time extended Kalman filters, one per sensor subset, plus
//! runtime monitoring of the matrix bounds the EKF error analysis relies on.
//!
//! The filter runs in one-step predictor form:
//!
//! ```text
//! x̂⁺ = F(x̂, u) + K (y − o(x̂)),   K = A P Cᵀ (C P Cᵀ + R)⁻¹
//! P⁺ = A P Aᵀ + Q − K (C P Cᵀ + R) Kᵀ
//! ```
//!
//! with `F(x, u) = f(x) + g(x) u`, `A = ∂F/∂x` and `C = ∂o/∂x` evaluated at
//! the current estimate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub trait SystemModel {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Drift `f(x)`.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Input map `g(x)` (n × m).
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Jacobian of `F(x, u)` with respect to `x`.
    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    /// Process noise covariance `Q`.
    fn process_noise(&self) -> &DMatrix<f64>;

    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_map(x) * u
    }
}

pub trait SensorModel {
    /// Sensor index within the proprioceptive set.
    fn id(&self) -> usize;
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Measurement noise covariance `R`.
    fn measurement_noise(&self) -> &DMatrix<f64>;
}

fn require_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!("{name} must be square")));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::InvalidInput(format!("{name} must be symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::InvalidInput(format!(
            "{name} must be positive definite"
        )));
    }
    Ok(())
}

/// `x⁺ = A x + B u + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() || q.nrows() != a.nrows() {
            return Err(Error::InvalidInput("inconsistent system dimensions".into()));
        }
        require_spd("process noise Q", &q)?;
        Ok(Self { a, b, q })
    }
}

impl SystemModel for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    fn input_map(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }

    fn jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn process_noise(&self) -> &DMatrix<f64> {
        &self.q
    }

    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// `y = C x + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSensor {
    id: usize,
    pub c: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl LinearSensor {
    pub fn new(id: usize, c: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != c.nrows() {
            return Err(Error::InvalidInput("R and C row counts differ".into()));
        }
        require_spd("measurement noise R", &r)?;
        Ok(Self { id, c, r })
    }

    /// Full-state position sensor `o(x) = x`.
    pub fn identity(id: usize, r: DMatrix<f64>) -> Result<Self> {
        let n = r.nrows();
        Self::new(id, DMatrix::identity(n, n), r)
    }
}

impl SensorModel for LinearSensor {
    fn id(&self) -> usize {
        self.id
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.c.clone()
    }

    fn measurement_noise(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// Several sensors observed jointly: stacked outputs, block-diagonal noise.
pub struct StackedSensor<'a> {
    id: usize,
    parts: Vec<&'a dyn SensorModel>,
    r: DMatrix<f64>,
}

impl<'a> StackedSensor<'a> {
    pub fn new(id: usize, parts: Vec<&'a dyn SensorModel>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidInput(
                "stacked sensor needs at least one part".into(),
            ));
        }
        let dim: usize = parts.iter().map(|s| s.measurement_noise().nrows()).sum();
        let mut r = DMatrix::zeros(dim, dim);
        let mut at = 0;
        for s in &parts {
            let block = s.measurement_noise();
            let k = block.nrows();
            r.view_mut((at, at), (k, k)).copy_from(block);
            at += k;
        }
        Ok(Self { id, parts, r })
    }
}

impl SensorModel for StackedSensor<'_> {
    fn id(&self) -> usize {
        self.id
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        let outs: Vec<DVector<f64>> = self.parts.iter().map(|s| s.observe(x)).collect();
        DVector::from_iterator(
            outs.iter().map(|v| v.len()).sum(),
            outs.iter().flat_map(|v| v.iter().copied()),
        )
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = self.parts.iter().map(|s| s.jacobian(x)).collect();
        let rows = blocks.iter().map(|b| b.nrows()).sum();
        let mut out = DMatrix::zeros(rows, x.len());
        let mut at = 0;
        for b in blocks {
            out.view_mut((at, 0), (b.nrows(), b.ncols())).copy_from(&b);
            at += b.nrows();
        }
        out
    }

    fn measurement_noise(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// One filter of the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorEntry {
    pub id: usize,
    /// Proprioceptive sensors feeding this filter.
    pub sensors: Vec<usize>,
    pub estimate: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Configured bound on `‖x − x̂‖` for an attack-free filter.
    pub error_bound: f64,
    pub trusted: bool,
    pub last_residual: DVector<f64>,
}

impl EstimatorEntry {
    pub fn new(
        id: usize,
        sensors: Vec<usize>,
        estimate: DVector<f64>,
        covariance: DMatrix<f64>,
        error_bound: f64,
    ) -> Result<Self> {
        if !(error_bound > 0.0) {
            return Err(Error::InvalidInput(format!(
                "estimator {id}: error bound must be > 0"
            )));
        }
        if covariance.nrows() != estimate.len() || !covariance.is_square() {
            return Err(Error::InvalidInput(format!(
                "estimator {id}: covariance shape mismatch"
            )));
        }
        Ok(Self {
            id,
            sensors,
            estimate,
            covariance,
            error_bound,
            trusted: true,
            last_residual: DVector::zeros(0),
        })
    }

    /// Planar position carried in the first two state components.
    pub fn position(&self) -> crate::geometry::Pose {
        crate::geometry::Pose::new(self.estimate[0], self.estimate[1])
    }
}

/// `(A_k, C_k, P_k)` of one filter step, for assumption monitoring.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

pub fn symmetrize_psd(p: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() >= 0.0 {
        return sym;
    }
    let vals = eig.eigenvalues.map(|l| l.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

pub fn residual(
    sensor: &dyn SensorModel,
    entry: &EstimatorEntry,
    y: &DVector<f64>,
) -> DVector<f64> {
    y - sensor.observe(&entry.estimate)
}

pub fn ekf_step(
    model: &dyn SystemModel,
    sensor: &dyn SensorModel,
    entry: &EstimatorEntry,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<EstimatorEntry> {
    ekf_step_traced(model, sensor, entry, u, y).map(|(e, _)| e)
}

/// [`ekf_step`] also returning the matrices used in the step.
pub fn ekf_step_traced(
    model: &dyn SystemModel,
    sensor: &dyn SensorModel,
    entry: &EstimatorEntry,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(EstimatorEntry, StepTrace)> {
    let n = model.state_dim();
    if entry.estimate.len() != n || u.len() != model.input_dim() {
        return Err(Error::InvalidInput(format!(
            "estimator {}: state/input dimension mismatch",
            entry.id
        )));
    }
    let x = &entry.estimate;
    let p = &entry.covariance;
    let a = model.jacobian(x, u);
    let c = sensor.jacobian(x);
    let r = sensor.measurement_noise();
    if y.len() != c.nrows() {
        return Err(Error::InvalidInput(format!(
            "estimator {}: measurement dimension mismatch",
            entry.id
        )));
    }

    let innovation_cov = &c * p * c.transpose() + r;
    let inv = innovation_cov
        .clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .or_else(|| innovation_cov.clone().try_inverse())
        .ok_or_else(|| {
            Error::Numerical(format!(
                "estimator {}: singular innovation covariance",
                entry.id
            ))
        })?;
    let gain = &a * p * c.transpose() * inv;
    let innovation = y - sensor.observe(x);

    let estimate = model.transition(x, u) + &gain * &innovation;
    let next_p =
        &a * p * a.transpose() + model.process_noise() - &gain * &innovation_cov * gain.transpose();
    let covariance = symmetrize_psd(&next_p);

    let next = EstimatorEntry {
        estimate,
        covariance,
        last_residual: innovation,
        ..entry.clone()
    };
    Ok((next, StepTrace { a, c, p: p.clone() }))
}

/// Configured constants of the EKF boundedness assumption.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AssumptionBounds {
    pub a_bar: f64,
    pub c_bar: f64,
    pub p_lower: f64,
    pub p_upper: f64,
    pub q_lower: f64,
    pub r_lower: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub steps: usize,
    pub max_a_norm: f64,
    pub max_c_norm: f64,
    pub min_p_eig: f64,
    pub max_p_eig: f64,
    pub nonsingular_a: bool,
}

impl AssumptionReport {
    /// Whether the monitored window respects `bounds`, given the noise
    /// covariances in use.
    pub fn satisfies(&self, bounds: &AssumptionBounds, q: &DMatrix<f64>, r: &DMatrix<f64>) -> bool {
        let min_eig = |m: &DMatrix<f64>| SymmetricEigen::new(m.clone()).eigenvalues.min();
        self.nonsingular_a
            && self.max_a_norm <= bounds.a_bar
            && self.max_c_norm <= bounds.c_bar
            && self.min_p_eig >= bounds.p_lower
            && self.max_p_eig <= bounds.p_upper
            && min_eig(q) >= bounds.q_lower
            && min_eig(r) >= bounds.r_lower
    }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

pub fn monitor_assumption(trace: &[StepTrace]) -> Result<AssumptionReport> {
    if trace.is_empty() {
        return Err(Error::InvalidInput("empty trace".into()));
    }
    let mut report = AssumptionReport {
        steps: trace.len(),
        max_a_norm: 0.0,
        max_c_norm: 0.0,
        min_p_eig: f64::INFINITY,
        max_p_eig: f64::NEG_INFINITY,
        nonsingular_a: true,
    };
    for step in trace {
        report.max_a_norm = report.max_a_norm.max(spectral_norm(&step.a));
        report.max_c_norm = report.max_c_norm.max(spectral_norm(&step.c));
        let eig = SymmetricEigen::new(step.p.clone()).eigenvalues;
        report.min_p_eig = report.min_p_eig.min(eig.min());
        report.max_p_eig = report.max_p_eig.max(eig.max());
        if !step.a.is_square() || step.a.determinant().abs() <= 1e-12 {
            report.nonsingular_a = false;
        }
    }
    Ok(report)
}
