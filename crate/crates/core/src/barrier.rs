//! Stochastic control barrier certificates: polynomial representation, exact
//! one-step expectation for quadratic certificates, grid verification of the
//! three certificate conditions, and the finite-horizon safety bound.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::NominalController;
use crate::error::{Error, Result};
use crate::estimation::SystemModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub exponents: Vec<u32>,
    pub coef: f64,
}

/// Sparse multivariate polynomial, one entry per monomial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub dim: usize,
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(dim: usize, terms: Vec<Monomial>) -> Result<Self> {
        for t in &terms {
            if t.exponents.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "monomial has {} exponents for a {dim}-dimensional polynomial",
                    t.exponents.len()
                )));
            }
            if !t.coef.is_finite() {
                return Err(Error::InvalidInput(
                    "polynomial coefficient is not finite".into(),
                ));
            }
        }
        Ok(Self { dim, terms })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: Vec::new(),
        }
    }

    /// `½ xᵀHx + bᵀx + c`.
    pub fn quadratic(h: &DMatrix<f64>, b: &DVector<f64>, c: f64) -> Result<Self> {
        let n = b.len();
        if h.nrows() != n || h.ncols() != n {
            return Err(Error::InvalidInput(
                "quadratic form dimensions differ".into(),
            ));
        }
        let mut terms = Vec::new();
        let unit = |i: usize, p: u32| {
            let mut e = vec![0; n];
            e[i] += p;
            e
        };
        for i in 0..n {
            if h[(i, i)] != 0.0 {
                terms.push(Monomial {
                    exponents: unit(i, 2),
                    coef: 0.5 * h[(i, i)],
                });
            }
            for j in i + 1..n {
                let v = 0.5 * (h[(i, j)] + h[(j, i)]);
                if v != 0.0 {
                    let mut e = vec![0; n];
                    e[i] = 1;
                    e[j] = 1;
                    terms.push(Monomial {
                        exponents: e,
                        coef: v,
                    });
                }
            }
            if b[i] != 0.0 {
                terms.push(Monomial {
                    exponents: unit(i, 1),
                    coef: b[i],
                });
            }
        }
        if c != 0.0 {
            terms.push(Monomial {
                exponents: vec![0; n],
                coef: c,
            });
        }
        Self::new(n, terms)
    }

    /// `scale · Σᵢ ((xᵢ − centerᵢ)/axesᵢ)² + offset`.
    pub fn ellipsoidal(center: &[f64], axes: &[f64], scale: f64, offset: f64) -> Result<Self> {
        if center.len() != axes.len() || axes.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::InvalidInput(
                "ellipsoid needs one positive axis per center coordinate".into(),
            ));
        }
        let n = center.len();
        let h = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0 * scale / (axes[i] * axes[i])
            } else {
                0.0
            }
        });
        let b = DVector::from_fn(n, |i, _| -2.0 * scale * center[i] / (axes[i] * axes[i]));
        let c: f64 = (0..n)
            .map(|i| scale * (center[i] / axes[i]).powi(2))
            .sum::<f64>()
            + offset;
        Self::quadratic(&h, &b, c)
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .filter(|t| t.coef != 0.0)
            .map(|t| t.exponents.iter().sum())
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.exponents
                    .iter()
                    .zip(x)
                    .fold(t.coef, |acc, (&e, &xi)| acc * xi.powi(e as i32))
            })
            .sum()
    }

    /// `(H, b, c)` with `p(x) = ½ xᵀHx + bᵀx + c`, when the degree is at most 2.
    pub fn quadratic_parts(&self) -> Option<(DMatrix<f64>, DVector<f64>, f64)> {
        if self.degree() > 2 {
            return None;
        }
        let n = self.dim;
        let mut h = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        let mut c = 0.0;
        for t in &self.terms {
            let nz: Vec<(usize, u32)> = t
                .exponents
                .iter()
                .copied()
                .enumerate()
                .filter(|&(_, e)| e > 0)
                .collect();
            match nz.as_slice() {
                [] => c += t.coef,
                [(i, 1)] => b[*i] += t.coef,
                [(i, 2)] => h[(*i, *i)] += 2.0 * t.coef,
                [(i, 1), (j, 1)] => {
                    h[(*i, *j)] += t.coef;
                    h[(*j, *i)] += t.coef;
                }
                _ => return None,
            }
        }
        Some((h, b, c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierCertificate {
    pub b: Polynomial,
    pub gamma: f64,
    pub c: f64,
    /// Total budget on the deviation of the applied input from the
    /// true-state nominal input.
    pub xi: f64,
}

impl BarrierCertificate {
    pub fn new(b: Polynomial, gamma: f64, c: f64, xi: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidInput(format!("gamma {gamma} outside [0, 1)")));
        }
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::InvalidInput(format!("c {c} must be >= 0")));
        }
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(Error::InvalidInput(format!("xi {xi} must be > 0")));
        }
        Ok(Self { b, gamma, c, xi })
    }

    /// Ball radius `ξ − ‖K_c‖ ζ̄` left for an estimator with error bound `ζ̄`.
    pub fn effective_radius(&self, ctrl: &NominalController, error_bound: f64) -> f64 {
        self.xi - ctrl.gain_norm() * error_bound
    }
}

/// State space `X = {h ≥ 0}`, safe set `C = {h₀ ≥ 0}`, unsafe region
/// `D = {h_d ≥ 0}` and a sampling box.
#[derive(Debug, Clone, PartialEq)]
pub struct SetSpec {
    pub state_space: Polynomial,
    pub safe: Polynomial,
    pub unsafe_region: Option<Polynomial>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SetSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.safe.dim;
        if self.state_space.dim != n || self.unsafe_region.as_ref().is_some_and(|d| d.dim != n) {
            return Err(Error::InvalidInput(
                "set polynomials disagree on dimension".into(),
            ));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::InvalidInput(
                "sampling box dimension mismatch".into(),
            ));
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u))
        {
            return Err(Error::InvalidInput(
                "sampling box must be finite and non-degenerate".into(),
            ));
        }
        Ok(())
    }

    pub fn in_state_space(&self, x: &[f64]) -> bool {
        self.state_space.eval(x) >= 0.0
    }

    pub fn in_safe(&self, x: &[f64]) -> bool {
        self.safe.eval(x) >= 0.0
    }

    pub fn in_unsafe(&self, x: &[f64]) -> bool {
        self.unsafe_region
            .as_ref()
            .is_some_and(|d| d.eval(x) >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expectation {
    pub value: f64,
    /// Zero when exact.
    pub std_error: f64,
}

pub const MONTE_CARLO_SAMPLES: usize = 100_000;

/// `E[B(F(x, π₀ + K_c x + û) + w)]` for `w ~ N(0, Q)`. Exact for degree ≤ 2;
/// seeded Monte-Carlo with [`MONTE_CARLO_SAMPLES`] draws otherwise.
pub fn expected_next_b(
    cert: &BarrierCertificate,
    model: &dyn SystemModel,
    ctrl: &NominalController,
    x: &DVector<f64>,
    u_hat: &DVector<f64>,
) -> Result<Expectation> {
    let u = ctrl.nominal(x)? + u_hat;
    let mu = model.transition(x, &u);
    let q = model.process_noise();
    if let Some((h, _, _)) = cert.b.quadratic_parts() {
        let value = cert.b.eval(mu.as_slice()) + 0.5 * (&h * q).trace();
        return Ok(Expectation {
            value,
            std_error: 0.0,
        });
    }
    Ok(monte_carlo_expectation(
        &cert.b,
        &mu,
        q,
        MONTE_CARLO_SAMPLES,
        0,
    ))
}

/// Seeded Monte-Carlo estimate of `E[p(μ + w)]`, `w ~ N(0, Q)`.
pub fn monte_carlo_expectation(
    p: &Polynomial,
    mu: &DVector<f64>,
    q: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Expectation {
    let eig = SymmetricEigen::new(q.clone());
    let root =
        &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mu.len();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let v = p.eval((mu + &root * z).as_slice());
        sum += v;
        sum_sq += v * v;
    }
    let m = samples as f64;
    let mean = sum / m;
    let var = ((sum_sq / m - mean * mean) * m / (m - 1.0)).max(0.0);
    Expectation {
        value: mean,
        std_error: (var / m).sqrt(),
    }
}

/// `max(0, 1 − γ − cT)`.
pub fn safety_probability(gamma: f64, c: f64, horizon: usize) -> f64 {
    (1.0 - gamma - c * horizon as f64).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub points_per_axis: usize,
    pub input_radii: usize,
    pub input_angles: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points_per_axis: 101,
            input_radii: 8,
            input_angles: 16,
        }
    }
}

impl GridSpec {
    /// Same box with the spacing halved.
    pub fn refined(&self) -> Self {
        Self {
            points_per_axis: 2 * self.points_per_axis - 1,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionCheck {
    pub ok: bool,
    /// Smallest margin found (`+∞` when no sample applies).
    pub worst_margin: f64,
    pub witness: Option<Vec<f64>>,
    pub samples: usize,
}

impl ConditionCheck {
    fn from_margins(margins: impl Iterator<Item = (Vec<f64>, f64)>) -> Self {
        let mut out = Self {
            ok: true,
            worst_margin: f64::INFINITY,
            witness: None,
            samples: 0,
        };
        for (x, m) in margins {
            out.samples += 1;
            if m < out.worst_margin {
                out.worst_margin = m;
                out.witness = Some(x);
            }
        }
        out.ok = out.worst_margin >= 0.0;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    /// `B ≤ γ` on the safe set.
    pub condition1: ConditionCheck,
    /// `B ≥ 1` on the unsafe region.
    pub condition2: ConditionCheck,
    /// `E[B(next)] ≤ B + c` on the state space for every admissible deviation.
    pub condition3: ConditionCheck,
    pub min_b: f64,
    pub effective_radius: f64,
    /// Radius of the deviation ball checked in the decrease condition.
    pub input_radius: f64,
    pub grid: GridSpec,
    pub horizon: usize,
    pub safety_probability: f64,
}

impl VerificationReport {
    pub fn all_ok(&self) -> bool {
        self.condition1.ok && self.condition2.ok && self.condition3.ok && self.min_b >= 0.0
    }
}

fn grid_points(lower: &[f64], upper: &[f64], per_axis: usize) -> Vec<Vec<f64>> {
    let n = lower.len();
    let total = per_axis.pow(n as u32);
    let coord = |axis: usize, i: usize| {
        if per_axis == 1 {
            0.5 * (lower[axis] + upper[axis])
        } else {
            lower[axis] + (upper[axis] - lower[axis]) * i as f64 / (per_axis - 1) as f64
        }
    };
    (0..total)
        .map(|mut flat| {
            // first axis varies slowest: lexicographic order
            let mut idx = vec![0; n];
            for axis in (0..n).rev() {
                idx[axis] = flat % per_axis;
                flat /= per_axis;
            }
            idx.iter().enumerate().map(|(a, &i)| coord(a, i)).collect()
        })
        .collect()
}

/// Radial-angular lattice over the ball of radius `rho` in 1 or 2 dims,
/// center and boundary included.
pub fn ball_lattice(
    dim: usize,
    rho: f64,
    radii: usize,
    angles: usize,
) -> Result<Vec<DVector<f64>>> {
    let mut out = vec![DVector::zeros(dim)];
    if rho == 0.0 {
        return Ok(out);
    }
    let radii = radii.max(1);
    match dim {
        1 => {
            for i in 1..=radii {
                let r = rho * i as f64 / radii as f64;
                out.push(DVector::from_element(1, r));
                out.push(DVector::from_element(1, -r));
            }
        }
        2 => {
            let angles = angles.max(4);
            for i in 1..=radii {
                let r = rho * i as f64 / radii as f64;
                for a in 0..angles {
                    let t = std::f64::consts::TAU * a as f64 / angles as f64;
                    out.push(DVector::from_vec(vec![r * t.cos(), r * t.sin()]));
                }
            }
        }
        _ => {
            return Err(Error::InvalidInput(format!(
                "deviation-ball covering supports 1 or 2 inputs, got {dim}"
            )))
        }
    }
    Ok(out)
}

/// Check the three certificate conditions on a deterministic grid.
///
/// The decrease condition is checked for every deviation `‖û‖ ≤ ξ` from the
/// true-state nominal input, which is what a trusted estimator within its
/// error bound guarantees when the applied input stays in its ball.
pub fn verify_certificate(
    cert: &BarrierCertificate,
    sets: &SetSpec,
    model: &(dyn SystemModel + Sync),
    ctrl: &NominalController,
    anchor_error_bound: f64,
    grid: &GridSpec,
    horizon: usize,
) -> Result<VerificationReport> {
    sets.validate()?;
    let n = model.state_dim();
    if sets.safe.dim != n || cert.b.dim != n {
        return Err(Error::InvalidInput(
            "certificate/set dimension differs from the state".into(),
        ));
    }
    let effective_radius = cert.effective_radius(ctrl, anchor_error_bound);
    if !(effective_radius > 0.0) {
        return Err(Error::InvalidInput(format!(
            "effective deviation radius {effective_radius} must be > 0"
        )));
    }
    if grid.points_per_axis < 2 {
        return Err(Error::InvalidInput(
            "grid needs at least 2 points per axis".into(),
        ));
    }
    let lattice = ball_lattice(
        model.input_dim(),
        cert.xi,
        grid.input_radii,
        grid.input_angles,
    )?;
    let points = grid_points(&sets.lower, &sets.upper, grid.points_per_axis);

    struct Sample {
        b: f64,
        safe: bool,
        unsafe_: bool,
        in_x: bool,
        decrease: f64,
    }
    let samples: Vec<Sample> = points
        .par_iter()
        .map(|x| -> Result<Sample> {
            let b = cert.b.eval(x);
            let in_x = sets.in_state_space(x);
            let mut decrease = f64::INFINITY;
            if in_x {
                let xv = DVector::from_column_slice(x);
                for u_hat in &lattice {
                    let e = expected_next_b(cert, model, ctrl, &xv, u_hat)?;
                    decrease = decrease.min(b + cert.c - (e.value + 3.0 * e.std_error));
                }
            }
            Ok(Sample {
                b,
                safe: sets.in_safe(x),
                unsafe_: sets.in_unsafe(x),
                in_x,
                decrease,
            })
        })
        .collect::<Result<_>>()?;

    let pairs = || points.iter().zip(&samples);
    let condition1 = ConditionCheck::from_margins(
        pairs()
            .filter(|(_, s)| s.safe)
            .map(|(x, s)| (x.clone(), cert.gamma - s.b)),
    );
    let condition2 = ConditionCheck::from_margins(
        pairs()
            .filter(|(_, s)| s.unsafe_)
            .map(|(x, s)| (x.clone(), s.b - 1.0)),
    );
    let condition3 = ConditionCheck::from_margins(
        pairs()
            .filter(|(_, s)| s.in_x)
            .map(|(x, s)| (x.clone(), s.decrease)),
    );
    let min_b = samples
        .iter()
        .filter(|s| s.in_x)
        .map(|s| s.b)
        .fold(f64::INFINITY, f64::min);

    Ok(VerificationReport {
        condition1,
        condition2,
        condition3,
        min_b,
        effective_radius,
        input_radius: cert.xi,
        grid: *grid,
        horizon,
        safety_probability: safety_probability(cert.gamma, cert.c, horizon),
    })
}
