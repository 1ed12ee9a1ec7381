//! Sector-removal fault-tolerant LiDAR estimation and the trust criteria
//! that decide which state estimators agree with the LiDAR evidence.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::estimation::EstimatorEntry;
use crate::geometry::{normalize_angle, to_cartesian, PointCloudMap, PolarScan, Pose};
use crate::lidar::{reconstruct_scan, PolarMap, ScanParams};
use crate::ndt::{
    build_grid, degradation_bound, match_against, match_from, point_terms, MatchResult, NdtConfig,
    NdtGrid,
};

/// Half-open angular interval `[start, start + width)`, possibly wrapping
/// through 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sector {
    pub index: usize,
    start: f64,
    width: f64,
}

impl Sector {
    pub fn new(index: usize, start: f64, width: f64) -> Result<Self> {
        if !(width > 0.0 && width <= TAU) {
            return Err(Error::InvalidInput(format!(
                "sector width {width} outside (0, 2pi]"
            )));
        }
        Ok(Self {
            index,
            start: normalize_angle(start),
            width,
        })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn contains(&self, angle: f64) -> bool {
        normalize_angle(angle - self.start) < self.width
    }

    /// The sector as one or two non-wrapping intervals within `[0, 2π)`.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        let end = self.start + self.width;
        if end <= TAU {
            vec![(self.start, end)]
        } else {
            vec![(self.start, TAU), (0.0, end - TAU)]
        }
    }
}

/// Candidate sectors: `n_j` equal sectors from angle 0 followed by the same
/// partition rotated by half a sector. Any arc no wider than half a sector
/// lies inside at least one candidate.
pub fn candidate_sectors(n_j: usize) -> Result<Vec<Sector>> {
    if n_j < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 sectors, got {n_j}"
        )));
    }
    let width = TAU / n_j as f64;
    (0..2 * n_j)
        .map(|i| {
            let offset = if i < n_j { 0.0 } else { 0.5 * width };
            Sector::new(i, offset + (i % n_j) as f64 * width, width)
        })
        .collect()
}

/// The acceptance threshold `ζ̄_s` on scan-match degradation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DegradationThreshold {
    Fixed(f64),
    /// Noise-only bound evaluated per match on the points that land in a
    /// reference cell, scaled by `1 + margin`.
    NoiseBound {
        noise_bound: f64,
        margin: f64,
    },
}

impl DegradationThreshold {
    pub fn evaluate(&self, grid: &NdtGrid, points: &[Vector2<f64>], r: &Vector2<f64>) -> f64 {
        match *self {
            Self::Fixed(v) => v,
            Self::NoiseBound {
                noise_bound,
                margin,
            } => {
                let cells: Vec<_> = grid
                    .matched_cells(points, r)
                    .into_iter()
                    .filter(Option::is_some)
                    .collect();
                let bound = degradation_bound(&vec![noise_bound; cells.len()], grid, &cells)
                    .expect("one bound per matched cell");
                bound * (1.0 + margin)
            }
        }
    }
}

/// One evaluated match with its threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedMatch {
    pub result: MatchResult,
    pub threshold: f64,
}

impl EvaluatedMatch {
    pub fn consistent(&self) -> bool {
        self.result.degradation <= self.threshold
    }
}

/// Match the scan measured at the true pose against the map reconstruction
/// at `estimate`. The returned offset approximates `estimate − x`.
pub fn match_estimate(
    estimate: Pose,
    map: &PointCloudMap,
    scan: &PolarScan,
    params: &ScanParams,
    ndt: &NdtConfig,
    threshold: &DegradationThreshold,
) -> Result<EvaluatedMatch> {
    let reference = to_cartesian(estimate, &reconstruct_scan(estimate, map, params));
    let grid = build_grid(&reference, ndt)?;
    let measured = to_cartesian(estimate, scan);
    let result = match_against(&grid, &measured, ndt);
    let threshold = threshold.evaluate(&grid, &measured.points, &result.offset);
    Ok(EvaluatedMatch { result, threshold })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtLidarResult {
    pub removed_sector: Sector,
    pub offset: Vector2<f64>,
    pub degradation: f64,
    pub threshold: f64,
    /// Valid beams left after the removal.
    pub points_after: usize,
    /// Every sector tried, in the order tried, with its degradation.
    pub tried: Vec<(Sector, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtLidarConfig {
    pub sectors: usize,
    pub params: ScanParams,
    pub ndt: NdtConfig,
    pub threshold: DegradationThreshold,
}

/// Per-sector suspicion at offset `r`: the number of measured beams that
/// land outside every reference cell, then the sum of `1 − exp(-½dᵀΣ⁻¹d)`.
fn sector_mismatch(
    sectors: &[Sector],
    grid: &NdtGrid,
    estimate: Pose,
    scan: &PolarScan,
    r: &Vector2<f64>,
) -> Vec<(usize, f64)> {
    let measured = to_cartesian(estimate, scan);
    let terms = point_terms(grid, &measured.points, r);
    let cells = grid.matched_cells(&measured.points, r);
    let angles = scan
        .beams()
        .iter()
        .filter(|b| b.is_valid())
        .map(|b| b.angle);
    let mut out = vec![(0, 0.0); sectors.len()];
    for ((angle, t), cell) in angles.zip(terms).zip(cells) {
        for (s, acc) in sectors.iter().zip(out.iter_mut()) {
            if s.contains(angle) {
                acc.0 += usize::from(cell.is_none());
                acc.1 += 1.0 - t;
            }
        }
    }
    out
}

/// Search for one sector whose removal from both map and scan makes the
/// estimate consistent with the remaining scan. Sectors are tried most
/// suspicious first; the first one under threshold is returned.
pub fn ft_lidar_estimation(
    estimate: Pose,
    map: &PointCloudMap,
    scan: &PolarScan,
    cfg: &FtLidarConfig,
) -> Result<FtLidarResult> {
    let sectors = candidate_sectors(cfg.sectors)?;

    let polar = PolarMap::new(estimate, map, &cfg.params);
    let full_ref = to_cartesian(
        estimate,
        &polar.reconstruct_excluding(&cfg.params, |_| false),
    );
    let full_grid = build_grid(&full_ref, &cfg.ndt)?;
    let full = match_against(&full_grid, &to_cartesian(estimate, scan), &cfg.ndt);
    let mismatch = sector_mismatch(&sectors, &full_grid, estimate, scan, &full.offset);

    let mut order: Vec<usize> = (0..sectors.len()).collect();
    order.sort_by(|&a, &b| {
        let (ua, ma) = mismatch[a];
        let (ub, mb) = mismatch[b];
        ub.cmp(&ua).then(mb.total_cmp(&ma)).then(a.cmp(&b))
    });

    let mut tried = Vec::with_capacity(order.len());
    for idx in order {
        let sector = sectors[idx];
        let m = match_without_sector(&polar, scan, sector, cfg, full.offset)?;
        tried.push((sector, m.result.degradation));
        if m.consistent() {
            return Ok(FtLidarResult {
                removed_sector: sector,
                offset: m.result.offset,
                degradation: m.result.degradation,
                threshold: m.threshold,
                points_after: m.result.n_points,
                tried,
            });
        }
    }
    Err(Error::NoConsistentSector)
}

/// Match with `sector` removed from both the map reconstruction about
/// `polar`'s center and the scan. Newton runs from zero and from
/// `warm_start` (the full-scan offset); the higher score wins, so a poor
/// stationary point near zero on the thinned grid is not mistaken for
/// inconsistency.
pub fn match_without_sector(
    polar: &PolarMap,
    scan: &PolarScan,
    sector: Sector,
    cfg: &FtLidarConfig,
    warm_start: Vector2<f64>,
) -> Result<EvaluatedMatch> {
    let estimate = polar.center();
    let reference = polar.reconstruct_excluding(&cfg.params, |a| sector.contains(a));
    let grid = build_grid(&to_cartesian(estimate, &reference), &cfg.ndt)?;
    let kept = scan.filtered(|b| !sector.contains(b.angle));
    let measured = to_cartesian(estimate, &kept);
    let mut result = match_against(&grid, &measured, &cfg.ndt);
    if warm_start.norm() > cfg.ndt.tol_step {
        let warm = match_from(&grid, &measured, &cfg.ndt, warm_start);
        if warm.loss > result.loss {
            result = warm;
        }
    }
    let threshold = cfg
        .threshold
        .evaluate(&grid, &measured.points, &result.offset);
    Ok(EvaluatedMatch { result, threshold })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    CaseI,
    CaseII,
    Excluded,
}

impl Criterion {
    pub fn label(self) -> &'static str {
        match self {
            Self::CaseI => "case_i",
            Self::CaseII => "case_ii",
            Self::Excluded => "excluded",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorVerdict {
    pub id: usize,
    pub full: EvaluatedMatch,
    pub sector_removal: Option<FtLidarResult>,
    pub criterion: Criterion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustReport {
    pub trusted: BTreeSet<usize>,
    pub excluded: BTreeSet<usize>,
    pub verdicts: Vec<EstimatorVerdict>,
    /// Whether every full-scan match was consistent.
    pub lidar_trusted: bool,
    pub theta_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustConfig {
    pub lidar: FtLidarConfig,
    /// Offset tolerance; `None` uses the smallest estimator error bound.
    pub theta_h: Option<f64>,
}

/// Apply the trust criteria to every estimator and report the outcome,
/// including the case where nobody is trusted.
pub fn evaluate_trust(
    bank: &[EstimatorEntry],
    map: &PointCloudMap,
    scan: &PolarScan,
    cfg: &TrustConfig,
) -> Result<TrustReport> {
    if bank.is_empty() {
        return Err(Error::InvalidInput("estimator bank is empty".into()));
    }
    let theta_h = cfg.theta_h.unwrap_or_else(|| {
        bank.iter()
            .map(|e| e.error_bound)
            .fold(f64::INFINITY, f64::min)
    });
    let lidar = &cfg.lidar;

    let mut report = TrustReport {
        trusted: BTreeSet::new(),
        excluded: BTreeSet::new(),
        verdicts: Vec::with_capacity(bank.len()),
        lidar_trusted: true,
        theta_h,
    };
    for entry in bank {
        let pose = entry.position();
        let full = match_estimate(pose, map, scan, &lidar.params, &lidar.ndt, &lidar.threshold)?;
        report.lidar_trusted &= full.consistent();
        let (criterion, sector_removal) =
            if full.result.offset.norm() <= theta_h && full.consistent() {
                (Criterion::CaseI, None)
            } else {
                match ft_lidar_estimation(pose, map, scan, lidar) {
                    Ok(ft) if ft.offset.norm() <= theta_h => (Criterion::CaseII, Some(ft)),
                    Ok(ft) => (Criterion::Excluded, Some(ft)),
                    Err(Error::NoConsistentSector) => (Criterion::Excluded, None),
                    Err(e) => return Err(e),
                }
            };
        if criterion == Criterion::Excluded {
            report.excluded.insert(entry.id);
        } else {
            report.trusted.insert(entry.id);
        }
        report.verdicts.push(EstimatorVerdict {
            id: entry.id,
            full,
            sector_removal,
            criterion,
        });
    }
    Ok(report)
}

/// [`evaluate_trust`], failing with [`Error::EmptyTrust`] when every
/// estimator is excluded.
pub fn select_trusted(
    bank: &[EstimatorEntry],
    map: &PointCloudMap,
    scan: &PolarScan,
    cfg: &TrustConfig,
) -> Result<TrustReport> {
    let report = evaluate_trust(bank, map, scan, cfg)?;
    if report.trusted.is_empty() {
        return Err(Error::EmptyTrust);
    }
    Ok(report)
}
