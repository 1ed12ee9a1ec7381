//! 2D Normal Distributions Transform.
//!
//! A reference scan is summarized as one Gaussian `(q, Σ)` per occupied grid
//! cell. A measured scan shifted by a candidate translation `r'` is scored by
//!
//! ```text
//! L(r') = Σ_i exp(-½ dᵢᵀ Σᵢ⁻¹ dᵢ),   dᵢ = (pᵢ - r') - qᵢ
//! ```
//!
//! where `(qᵢ, Σᵢ)` belong to the cell containing `pᵢ - r'` (points landing in
//! no cell contribute nothing). Matching maximizes `L` with damped Newton.
//! The degradation of a match is `ζ = n - L(r)`, `n` the measured point count.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};

use crate::error::{Error, Result};
use crate::geometry::CartesianScan;

pub type CellKey = (i64, i64);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NdtConfig {
    pub cell_size: f64,
    pub min_points: usize,
    /// Smallest covariance eigenvalue as a fraction of the largest.
    pub eig_floor: f64,
    pub tol_step: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Longest Newton step taken in one iteration (meters).
    pub max_step: f64,
}

impl Default for NdtConfig {
    fn default() -> Self {
        Self {
            cell_size: 2.0,
            min_points: 3,
            eig_floor: 1e-3,
            tol_step: 1e-4,
            max_iter: 50,
            max_halvings: 20,
            max_step: 0.5,
        }
    }
}

impl NdtConfig {
    pub fn with_cell_size(cell_size: f64) -> Self {
        Self {
            cell_size,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdtCell {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
    pub information: Matrix2<f64>,
    pub point_count: usize,
    /// Largest eigenvalue of the information matrix `Σ⁻¹`.
    pub max_information_eig: f64,
}

#[derive(Debug, Clone)]
pub struct NdtGrid {
    cell_size: f64,
    keys: Vec<CellKey>,
    cells: Vec<NdtCell>,
    /// Dense index over the bounding box of occupied keys.
    origin: CellKey,
    width: usize,
    height: usize,
    slots: Vec<Option<usize>>,
}

fn floor_i64(v: f64) -> i64 {
    // f64::floor is a libm call on baseline x86-64; this is the hot path
    let t = v as i64;
    if (t as f64) > v {
        t - 1
    } else {
        t
    }
}

fn key_for(cell_size: f64, p: &Vector2<f64>) -> CellKey {
    (floor_i64(p.x / cell_size), floor_i64(p.y / cell_size))
}

impl NdtGrid {
    /// Grid from explicit cells. Later duplicates of a key replace earlier ones.
    pub fn from_cells(cell_size: f64, cells: impl IntoIterator<Item = (CellKey, NdtCell)>) -> Self {
        let mut sorted: std::collections::BTreeMap<CellKey, NdtCell> =
            std::collections::BTreeMap::new();
        sorted.extend(cells);
        let (keys, cells): (Vec<_>, Vec<_>) = sorted.into_iter().unzip();
        let (mut lo, mut hi) = ((i64::MAX, i64::MAX), (i64::MIN, i64::MIN));
        for k in &keys {
            lo = (lo.0.min(k.0), lo.1.min(k.1));
            hi = (hi.0.max(k.0), hi.1.max(k.1));
        }
        let (width, height) = if keys.is_empty() {
            (0, 0)
        } else {
            ((hi.0 - lo.0 + 1) as usize, (hi.1 - lo.1 + 1) as usize)
        };
        let mut slots = vec![None; width * height];
        for (i, k) in keys.iter().enumerate() {
            slots[(k.1 - lo.1) as usize * width + (k.0 - lo.0) as usize] = Some(i);
        }
        Self {
            cell_size,
            keys,
            cells,
            origin: lo,
            width,
            height,
            slots,
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn key_of(&self, p: &Vector2<f64>) -> CellKey {
        key_for(self.cell_size, p)
    }

    fn slot(&self, key: CellKey) -> Option<usize> {
        let dx = key.0.checked_sub(self.origin.0)?;
        let dy = key.1.checked_sub(self.origin.1)?;
        if dx < 0 || dy < 0 || dx as usize >= self.width || dy as usize >= self.height {
            return None;
        }
        self.slots[dy as usize * self.width + dx as usize]
    }

    pub fn cell(&self, key: CellKey) -> Option<&NdtCell> {
        self.slot(key).map(|i| &self.cells[i])
    }

    pub fn lookup(&self, p: &Vector2<f64>) -> Option<&NdtCell> {
        self.cell(self.key_of(p))
    }

    /// Cells in key order.
    pub fn cells(&self) -> impl Iterator<Item = (&CellKey, &NdtCell)> {
        self.keys.iter().zip(&self.cells)
    }

    /// Stored cell for each point after shifting it by `-r`.
    pub fn matched_cells(&self, points: &[Vector2<f64>], r: &Vector2<f64>) -> Vec<Option<CellKey>> {
        points
            .iter()
            .map(|p| {
                let key = self.key_of(&(p - r));
                self.slot(key).map(|_| key)
            })
            .collect()
    }
}

fn floored_covariance(cov: Matrix2<f64>, ratio: f64) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(cov);
    let largest = eig.eigenvalues.max().max(0.0);
    // identical points give a zero covariance; keep it invertible
    let floor = (ratio * largest).max(1e-12);
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let v = eig.eigenvectors;
    let out = v * Matrix2::from_diagonal(&vals) * v.transpose();
    (out + out.transpose()) * 0.5
}

/// Build the per-cell Gaussians of a reference scan.
pub fn build_grid(reference: &CartesianScan, cfg: &NdtConfig) -> Result<NdtGrid> {
    if !(cfg.cell_size > 0.0 && cfg.cell_size.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "cell size {} must be positive",
            cfg.cell_size
        )));
    }
    let mut buckets: BTreeMap<CellKey, Vec<Vector2<f64>>> = BTreeMap::new();
    for p in &reference.points {
        buckets
            .entry(key_for(cfg.cell_size, p))
            .or_default()
            .push(*p);
    }
    let min_points = cfg.min_points.max(2);
    let mut cells = Vec::with_capacity(buckets.len());
    for (key, pts) in buckets {
        if pts.len() < min_points {
            continue;
        }
        let n = pts.len() as f64;
        let mean = pts.iter().sum::<Vector2<f64>>() / n;
        let scatter = pts
            .iter()
            .map(|p| (p - mean) * (p - mean).transpose())
            .sum::<Matrix2<f64>>();
        let covariance = floored_covariance(scatter / (n - 1.0), cfg.eig_floor);
        let information = covariance
            .try_inverse()
            .ok_or_else(|| Error::Numerical(format!("cell {key:?} covariance not invertible")))?;
        let information = (information + information.transpose()) * 0.5;
        let max_information_eig = SymmetricEigen::new(information).eigenvalues.max();
        cells.push((
            key,
            NdtCell {
                mean,
                covariance,
                information,
                point_count: pts.len(),
                max_information_eig,
            },
        ));
    }
    Ok(NdtGrid::from_cells(cfg.cell_size, cells))
}

/// Per-point score terms `exp(-½ dᵀΣ⁻¹d)`, zero for points landing in no cell.
pub fn point_terms(grid: &NdtGrid, points: &[Vector2<f64>], r: &Vector2<f64>) -> Vec<f64> {
    points
        .iter()
        .map(|p| {
            let shifted = p - r;
            grid.lookup(&shifted).map_or(0.0, |cell| {
                let d = shifted - cell.mean;
                (-0.5 * d.dot(&(cell.information * d))).exp()
            })
        })
        .collect()
}

/// The match score `L(r')`.
pub fn ndt_score(grid: &NdtGrid, points: &CartesianScan, r: &Vector2<f64>) -> f64 {
    point_terms(grid, &points.points, r).iter().sum()
}

/// Score, gradient and Hessian of `L` with respect to `r'`. Cell membership is
/// treated as locally constant.
pub fn score_derivatives(
    grid: &NdtGrid,
    points: &[Vector2<f64>],
    r: &Vector2<f64>,
) -> (f64, Vector2<f64>, Matrix2<f64>) {
    let mut score = 0.0;
    let mut grad = Vector2::zeros();
    let mut hess = Matrix2::zeros();
    for p in points {
        let shifted = p - r;
        let Some(cell) = grid.lookup(&shifted) else {
            continue;
        };
        let d = shifted - cell.mean;
        let wd = cell.information * d;
        let s = (-0.5 * d.dot(&wd)).exp();
        score += s;
        // dd/dr' = -I
        grad += wd * s;
        hess += (wd * wd.transpose() - cell.information) * s;
    }
    (score, grad, hess)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Translation `r` such that `measured - r` aligns with the reference.
    pub offset: Vector2<f64>,
    pub loss: f64,
    pub n_points: usize,
    /// `n_points - loss`.
    pub degradation: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Measured points that land in no reference cell at `offset`.
    pub uncovered_points: usize,
}

/// Align `measured` to `reference` by maximizing the NDT score from `r' = 0`.
pub fn scan_match(
    reference: &CartesianScan,
    measured: &CartesianScan,
    cfg: &NdtConfig,
) -> Result<MatchResult> {
    let grid = build_grid(reference, cfg)?;
    Ok(match_against(&grid, measured, cfg))
}

/// [`scan_match`] against a prebuilt reference grid.
pub fn match_against(grid: &NdtGrid, measured: &CartesianScan, cfg: &NdtConfig) -> MatchResult {
    match_from(grid, measured, cfg, Vector2::zeros())
}

/// [`match_against`] with the Newton iteration started at `start`.
pub fn match_from(
    grid: &NdtGrid,
    measured: &CartesianScan,
    cfg: &NdtConfig,
    start: Vector2<f64>,
) -> MatchResult {
    let points = &measured.points;
    let n = points.len();
    let mut r = start;
    if grid.is_empty() || points.is_empty() {
        return MatchResult {
            offset: r,
            loss: 0.0,
            n_points: n,
            degradation: n as f64,
            iterations: 0,
            converged: false,
            uncovered_points: n,
        };
    }

    let (mut loss, mut grad, mut hess) = score_derivatives(grid, points, &r);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        // minimize -L: objective Hessian is -hess, made positive definite
        let eig = SymmetricEigen::new(-hess);
        let scale = eig.eigenvalues.abs().max();
        let delta = (1e-6 * scale).max(1e-9);
        let vals = eig.eigenvalues.map(|l| 1.0 / l.abs().max(delta));
        let inv = eig.eigenvectors * Matrix2::from_diagonal(&vals) * eig.eigenvectors.transpose();
        let mut step = inv * grad;
        let len = step.norm();
        if len > cfg.max_step {
            step *= cfg.max_step / len;
        }
        if step.norm() < cfg.tol_step {
            converged = true;
            break;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let cand = r + step * t;
            let (l, g, h) = score_derivatives(grid, points, &cand);
            if l > loss {
                accepted = Some((cand, l, g, h));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, l, g, h)) = accepted else {
            // no improvement along an ascent direction: numerically stationary
            converged = true;
            break;
        };
        let moved = (cand - r).norm();
        r = cand;
        loss = l;
        grad = g;
        hess = h;
        iterations += 1;
        if moved < cfg.tol_step {
            converged = true;
            break;
        }
    }

    let uncovered_points = grid
        .matched_cells(points, &r)
        .iter()
        .filter(|c| c.is_none())
        .count();
    MatchResult {
        offset: r,
        loss,
        n_points: n,
        degradation: n as f64 - loss,
        iterations,
        converged,
        uncovered_points,
    }
}

/// Noise-only degradation bound
/// `n - Σᵢ exp(-w̄ᵢ² λmax(Σᵢ⁻¹) / 2)`, one disturbance bound `w̄ᵢ` and
/// matched cell per point. Points without a cell contribute no score.
pub fn degradation_bound(
    noise_bounds: &[f64],
    grid: &NdtGrid,
    matched_cells: &[Option<CellKey>],
) -> Result<f64> {
    if noise_bounds.len() != matched_cells.len() {
        return Err(Error::InvalidInput(format!(
            "{} noise bounds for {} points",
            noise_bounds.len(),
            matched_cells.len()
        )));
    }
    let mut kept = 0.0;
    for (w, key) in noise_bounds.iter().zip(matched_cells) {
        if let Some(cell) = key.and_then(|k| grid.cell(k)) {
            kept += (-0.5 * w * w * cell.max_information_eig).exp();
        }
    }
    Ok(noise_bounds.len() as f64 - kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;

    fn scan(points: &[(f64, f64)]) -> CartesianScan {
        CartesianScan {
            points: points.iter().map(|&(x, y)| Vector2::new(x, y)).collect(),
            origin: Pose::origin(),
        }
    }

    fn unit_cell_grid() -> NdtGrid {
        let mut cells = Vec::new();
        cells.push((
            (0, 0),
            NdtCell {
                mean: Vector2::zeros(),
                covariance: Matrix2::identity(),
                information: Matrix2::identity(),
                point_count: 3,
                max_information_eig: 1.0,
            },
        ));
        NdtGrid::from_cells(10.0, cells)
    }

    #[test]
    fn collinear_points_hit_the_floor() {
        let grid = build_grid(
            &scan(&[(0.1, 0.1), (0.5, 0.5), (0.9, 0.9)]),
            &NdtConfig::default(),
        )
        .unwrap();
        let cell = grid.cell((0, 0)).unwrap();
        let eig = SymmetricEigen::new(cell.covariance).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        assert!((lo - 1e-3 * hi).abs() <= 1e-12 * hi, "lo {lo} hi {hi}");
    }

    #[test]
    fn sample_mean() {
        let cfg = NdtConfig {
            min_points: 2,
            ..NdtConfig::default()
        };
        let grid = build_grid(&scan(&[(0.0, 0.0), (1.0, 1.0)]), &cfg).unwrap();
        let cell = grid.cell((0, 0)).unwrap();
        assert_eq!(cell.mean, Vector2::new(0.5, 0.5));
    }

    #[test]
    fn sparse_cells_dropped() {
        let cfg = NdtConfig {
            min_points: 2,
            ..NdtConfig::default()
        };
        let grid = build_grid(&scan(&[(0.5, 0.5)]), &cfg).unwrap();
        assert!(grid.is_empty());
    }

    #[test]
    fn score_examples() {
        let grid = unit_cell_grid();
        let r = Vector2::new(0.25, -0.5);
        assert_eq!(ndt_score(&grid, &scan(&[(0.25, -0.5)]), &r), 1.0);
        assert_eq!(
            ndt_score(&grid, &scan(&[(50.0, 50.0)]), &Vector2::zeros()),
            0.0
        );
        let s = ndt_score(&grid, &scan(&[(1.0, 0.0)]), &Vector2::zeros());
        assert!((s - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn identical_scans_match_at_zero() {
        let pts: Vec<(f64, f64)> = (0..40)
            .flat_map(|i| {
                let t = i as f64 * 0.25;
                [(t, 0.3 * t), (0.2 * t + 1.0, 8.0 - t)]
            })
            .collect();
        let s = scan(&pts);
        let cfg = NdtConfig::with_cell_size(0.5);
        let res = scan_match(&s, &s, &cfg).unwrap();
        assert!(res.offset.norm() < 1e-6, "{:?}", res.offset);
        assert!(res.loss <= res.n_points as f64);
        assert!(res.degradation >= 0.0);
    }

    #[test]
    fn empty_reference() {
        let res = scan_match(&scan(&[]), &scan(&[(1.0, 1.0)]), &NdtConfig::default()).unwrap();
        assert!(!res.converged);
        assert_eq!(res.loss, 0.0);
    }

    #[test]
    fn bound_examples() {
        let grid = unit_cell_grid();
        let cells = vec![Some((0, 0)); 4];
        assert_eq!(degradation_bound(&[0.0; 4], &grid, &cells).unwrap(), 0.0);
        let w = (2.0 * 2f64.ln()).sqrt();
        let b = degradation_bound(&[w; 4], &grid, &cells).unwrap();
        assert!((b - 2.0).abs() < 1e-12);
        assert!(degradation_bound(&[0.0; 3], &grid, &cells).is_err());
        // a point without a cell is charged fully
        let b = degradation_bound(&[0.0, 0.0], &grid, &[Some((0, 0)), None]).unwrap();
        assert_eq!(b, 1.0);
    }

    #[test]
    fn bound_uses_largest_information_eigenvalue() {
        // eigenvalues {1, 4} of Σ  =>  λmax(Σ⁻¹) = 1
        let rot = nalgebra::Rotation2::new(0.7).into_inner();
        let cov = rot * Matrix2::new(1.0, 0.0, 0.0, 4.0) * rot.transpose();
        let info = cov.try_inverse().unwrap();
        let mut cells = Vec::new();
        cells.push((
            (0, 0),
            NdtCell {
                mean: Vector2::zeros(),
                covariance: cov,
                information: info,
                point_count: 3,
                max_information_eig: SymmetricEigen::new(info).eigenvalues.max(),
            },
        ));
        let grid = NdtGrid::from_cells(10.0, cells);
        let b = degradation_bound(&[1.0], &grid, &[Some((0, 0))]).unwrap();
        assert!((b - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
    }
}
