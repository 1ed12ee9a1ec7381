//! Scenario configuration file (TOML).
//!
//! Relative paths inside the file resolve against the file's directory.
//! See `data/uav_delivery.toml` for a fully populated example.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{ActiveWindow, FdiSpec, LidarSpoofSpec};
use crate::barrier::{BarrierCertificate, GridSpec, Monomial, Polynomial, SetSpec};
use crate::control::NominalController;
use crate::error::{Error, Result};
use crate::estimation::{EstimatorEntry, LinearSensor, LinearSystem};
use crate::ft_estimation::{DegradationThreshold, FtLidarConfig, TrustConfig};
use crate::geometry::{load_map, PointCloudMap};
use crate::lidar::{LidarNoise, ScanParams};
use crate::ndt::NdtConfig;
use crate::world::{rasterize, urban_district};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Nominal,
    InsAttack,
    InsLidarAttack,
}

impl Scenario {
    pub fn label(self) -> &'static str {
        match self {
            Self::Nominal => "nominal",
            Self::InsAttack => "ins-attack",
            Self::InsLidarAttack => "ins-lidar-attack",
        }
    }

    pub fn has_fdi(self) -> bool {
        !matches!(self, Self::Nominal)
    }

    pub fn has_spoof(self) -> bool {
        matches!(self, Self::InsLidarAttack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Ft,
    Baseline,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Self::Ft => "ft",
            Self::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub process_noise: Vec<Vec<f64>>,
    pub initial_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSection {
    pub id: usize,
    pub noise: Vec<Vec<f64>>,
    /// Attack-free bound on `‖x − x̂‖` for this sensor's filter (meters).
    pub error_bound: f64,
    /// Covariance of the initial estimation error.
    pub initial_covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarSection {
    /// Path to a map file, or `builtin:urban`.
    pub map: String,
    pub resolution_deg: f64,
    pub max_range: f64,
    pub noise_sigma: f64,
    pub noise_bound: f64,
    pub cell_size: f64,
    pub sectors: usize,
    /// Margin on the noise-only degradation bound.
    pub threshold_margin: f64,
    /// Overrides the noise-derived threshold with a constant.
    #[serde(default)]
    pub fixed_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub goal: Vec<f64>,
    /// Closed-loop contraction per step toward the goal, in (0, 1).
    pub contraction: f64,
    /// Explicit `K_c`; derived from goal and contraction when absent.
    #[serde(default)]
    pub gain: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
    /// Offset tolerance for the trust criteria; smallest error bound if absent.
    #[serde(default)]
    pub theta_h: Option<f64>,
    #[serde(default)]
    pub persistent_exclusion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub waypoints: Vec<Vec<f64>>,
    pub acceptance_radius: f64,
    /// Integral and derivative weights relative to the proportional gain.
    pub ki: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolynomialSpec {
    /// `scale · Σ ((xᵢ − centerᵢ)/axesᵢ)² + offset`.
    Ellipsoid {
        center: Vec<f64>,
        axes: Vec<f64>,
        scale: f64,
        offset: f64,
    },
    Terms {
        dim: usize,
        terms: Vec<Monomial>,
    },
}

impl PolynomialSpec {
    pub fn build(&self) -> Result<Polynomial> {
        match self {
            Self::Ellipsoid {
                center,
                axes,
                scale,
                offset,
            } => Polynomial::ellipsoidal(center, axes, *scale, *offset),
            Self::Terms { dim, terms } => Polynomial::new(*dim, terms.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSection {
    pub b: PolynomialSpec,
    pub gamma: f64,
    pub c: f64,
    pub xi: f64,
    /// Desired bound on the probability of leaving the safe set.
    pub epsilon: f64,
    /// Verify the certificate before simulating.
    pub verify: bool,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetsSection {
    pub state_space: PolynomialSpec,
    pub safe: PolynomialSpec,
    #[serde(default)]
    pub unsafe_region: Option<PolynomialSpec>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdiSection {
    pub sensor: usize,
    pub bias: Vec<f64>,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpoofSection {
    pub angle_lo_deg: f64,
    pub angle_hi_deg: f64,
    pub range_lo: f64,
    pub range_hi: f64,
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub widen_beyond_hw_limit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub fdi: FdiSection,
    pub spoof: SpoofSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Steps whose LiDAR scans are written as snapshot files.
    #[serde(default)]
    pub snapshot_steps: Vec<usize>,
    #[serde(default)]
    pub svg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub horizon: usize,
    pub scenario: Scenario,
    pub mode: Mode,
    pub system: SystemSection,
    pub sensors: Vec<SensorSection>,
    pub lidar: LidarSection,
    pub controller: ControllerSection,
    pub baseline: BaselineSection,
    pub certificate: CertificateSection,
    pub sets: SetsSection,
    pub attack: AttackSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory relative paths resolve against (not serialized).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn matrix(name: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<DMatrix<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(cfg_err(format!("{name} must be {}x{}", shape.0, shape.1)));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(cfg_err(format!("{name} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(shape.0, shape.1, |i, j| rows[i][j]))
}

fn vector(name: &str, v: &[f64], len: usize) -> Result<DVector<f64>> {
    if v.len() != len || v.iter().any(|x| !x.is_finite()) {
        return Err(cfg_err(format!("{name} must hold {len} finite numbers")));
    }
    Ok(DVector::from_column_slice(v))
}

/// Fully built runtime objects of a configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub system: LinearSystem,
    pub initial_state: DVector<f64>,
    pub sensors: Vec<LinearSensor>,
    pub initial_covariances: Vec<DMatrix<f64>>,
    pub error_bounds: Vec<f64>,
    pub map: PointCloudMap,
    pub scan_params: ScanParams,
    pub lidar_noise: LidarNoise,
    pub trust: TrustConfig,
    pub controller: NominalController,
    pub goal: DVector<f64>,
    pub feedforward_goal: DVector<f64>,
    pub certificate: BarrierCertificate,
    pub sets: SetSpec,
    pub grid: GridSpec,
    pub fdi: Option<FdiSpec>,
    pub spoof: Option<LidarSpoofSpec>,
    /// Deliberate departures from the threat model, for run metadata.
    pub departures: Vec<String>,
}

impl ScenarioConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, dir)
    }

    /// The configuration shipped with the crate.
    pub fn shipped() -> Result<Self> {
        Self::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("data/uav_delivery.toml"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn state_dim(&self) -> usize {
        self.system.initial_state.len()
    }

    pub fn input_dim(&self) -> usize {
        self.system.b.first().map_or(0, Vec::len)
    }

    /// Cheap structural checks. [`ScenarioConfig::resolve`] performs the rest.
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(cfg_err("horizon must be at least 1"));
        }
        if self.sensors.is_empty() {
            return Err(cfg_err("at least one sensor is required"));
        }
        let mut ids: Vec<usize> = self.sensors.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(cfg_err("sensor ids must be unique"));
        }
        if self.state_dim() != 2 {
            return Err(cfg_err(
                "the simulator models planar position (state dimension 2)",
            ));
        }
        if !(self.controller.contraction > 0.0 && self.controller.contraction < 1.0) {
            return Err(cfg_err("controller.contraction must lie in (0, 1)"));
        }
        if self.baseline.waypoints.is_empty() {
            return Err(cfg_err("baseline needs at least one waypoint"));
        }
        if !(self.certificate.epsilon > 0.0 && self.certificate.epsilon < 1.0) {
            return Err(cfg_err("certificate.epsilon must lie in (0, 1)"));
        }
        Ok(())
    }

    fn resolve_map(&self) -> Result<PointCloudMap> {
        if self.lidar.map == "builtin:urban" {
            return Ok(rasterize(&urban_district(), 0.25));
        }
        let path = self.base_dir.join(&self.lidar.map);
        load_map(&path).map_err(|e| cfg_err(format!("map {}: {e}", path.display())))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let n = self.state_dim();
        let m = self.input_dim();
        let wrap = |e: Error| cfg_err(e.to_string());

        let a = matrix("system.a", &self.system.a, (n, n))?;
        let b = matrix("system.b", &self.system.b, (n, m))?;
        let q = matrix("system.process_noise", &self.system.process_noise, (n, n))?;
        let system = LinearSystem::new(a.clone(), b.clone(), q).map_err(wrap)?;
        let initial_state = vector("system.initial_state", &self.system.initial_state, n)?;

        let mut sensors = Vec::new();
        let mut initial_covariances = Vec::new();
        let mut error_bounds = Vec::new();
        for s in &self.sensors {
            let r = matrix(&format!("sensor {} noise", s.id), &s.noise, (n, n))?;
            sensors.push(LinearSensor::identity(s.id, r).map_err(wrap)?);
            initial_covariances.push(matrix(
                &format!("sensor {} initial_covariance", s.id),
                &s.initial_covariance,
                (n, n),
            )?);
            if !(s.error_bound > 0.0) {
                return Err(cfg_err(format!("sensor {} error_bound must be > 0", s.id)));
            }
            error_bounds.push(s.error_bound);
        }

        let l = &self.lidar;
        let scan_params =
            ScanParams::new(l.resolution_deg.to_radians(), l.max_range).map_err(wrap)?;
        let lidar_noise = LidarNoise::new(l.noise_sigma, l.noise_bound).map_err(wrap)?;
        if !(l.cell_size > 0.0) {
            return Err(cfg_err("lidar.cell_size must be > 0"));
        }
        let threshold = match l.fixed_threshold {
            Some(v) => DegradationThreshold::Fixed(v),
            None => DegradationThreshold::NoiseBound {
                noise_bound: l.noise_bound,
                margin: l.threshold_margin,
            },
        };
        let trust = TrustConfig {
            lidar: FtLidarConfig {
                sectors: l.sectors,
                params: scan_params,
                ndt: NdtConfig::with_cell_size(l.cell_size),
                threshold,
            },
            theta_h: self.controller.theta_h,
        };
        if l.sectors < 2 {
            return Err(cfg_err("lidar.sectors must be at least 2"));
        }
        let map = self.resolve_map()?;

        let c = &self.controller;
        let goal = vector("controller.goal", &c.goal, n)?;
        let b_inv = b
            .clone()
            .try_inverse()
            .ok_or_else(|| cfg_err("system.b must be invertible to derive the controller"))?;
        let identity = DMatrix::<f64>::identity(n, n);
        // u_eq holds the goal fixed: goal = A goal + B u_eq
        let feedforward_goal = &b_inv * (&identity - &a) * &goal;
        let gain = match &c.gain {
            Some(rows) => matrix("controller.gain", rows, (m, n))?,
            None => &b_inv * (&identity * (1.0 - c.contraction) - &a),
        };
        let offset = match &c.offset {
            Some(v) => vector("controller.offset", v, m)?,
            None => &feedforward_goal - &gain * &goal,
        };
        let controller = NominalController::new(offset, gain).map_err(wrap)?;

        let cs = &self.certificate;
        let certificate =
            BarrierCertificate::new(cs.b.build().map_err(wrap)?, cs.gamma, cs.c, cs.xi)
                .map_err(wrap)?;
        let sets = SetSpec {
            state_space: self.sets.state_space.build().map_err(wrap)?,
            safe: self.sets.safe.build().map_err(wrap)?,
            unsafe_region: self
                .sets
                .unsafe_region
                .as_ref()
                .map(|p| p.build())
                .transpose()
                .map_err(wrap)?,
            lower: self.sets.lower.clone(),
            upper: self.sets.upper.clone(),
        };
        sets.validate().map_err(wrap)?;
        let grid = GridSpec {
            points_per_axis: cs.grid_points,
            ..GridSpec::default()
        };
        for bound in &error_bounds {
            let radius = certificate.effective_radius(&controller, *bound);
            if !(radius > 0.0) {
                return Err(cfg_err(format!(
                    "xi = {} leaves no deviation budget for error bound {bound} (radius {radius})",
                    cs.xi
                )));
            }
        }

        let mut departures = Vec::new();
        let fdi = if self.scenario.has_fdi() {
            let f = &self.attack.fdi;
            if !self.sensors.iter().any(|s| s.id == f.sensor) {
                return Err(cfg_err(format!("FDI targets unknown sensor {}", f.sensor)));
            }
            let mut biases = std::collections::BTreeMap::new();
            biases.insert(f.sensor, vector("attack.fdi.bias", &f.bias, n)?);
            Some(
                FdiSpec::new(biases, ActiveWindow::new(f.start, f.end).map_err(wrap)?)
                    .map_err(wrap)?,
            )
        } else {
            None
        };
        let spoof = if self.scenario.has_spoof() {
            let s = &self.attack.spoof;
            let spec = LidarSpoofSpec::new(
                s.angle_lo_deg.to_radians(),
                s.angle_hi_deg.to_radians(),
                s.range_lo,
                s.range_hi,
                ActiveWindow::new(s.start, s.end).map_err(wrap)?,
                s.widen_beyond_hw_limit,
            )
            .map_err(wrap)?;
            if spec.is_widened() {
                departures.push(format!(
                    "spoof window {:.1} deg exceeds the 8 deg hardware bound (widen_beyond_hw_limit set)",
                    spec.width().to_degrees()
                ));
            }
            Some(spec)
        } else {
            None
        };

        Ok(Resolved {
            system,
            initial_state,
            sensors,
            initial_covariances,
            error_bounds,
            map,
            scan_params,
            lidar_noise,
            trust,
            controller,
            goal,
            feedforward_goal,
            certificate,
            sets,
            grid,
            fdi,
            spoof,
            departures,
        })
    }
}

impl Resolved {
    /// Fresh filter bank, one entry per sensor, started at `estimates`.
    pub fn bank(&self, estimates: &[DVector<f64>]) -> Result<Vec<EstimatorEntry>> {
        self.sensors
            .iter()
            .zip(estimates)
            .zip(&self.initial_covariances)
            .zip(&self.error_bounds)
            .map(|(((s, x0), p0), bound)| {
                use crate::estimation::SensorModel;
                EstimatorEntry::new(s.id(), vec![s.id()], x0.clone(), p0.clone(), *bound)
            })
            .collect()
    }
}
