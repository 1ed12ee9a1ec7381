//! Scan reconstruction from a point-cloud map and the simulated LiDAR sensor.
//!
//! The scan circle around the center is split into equal angular sectors of
//! width `c_r`. Each sector reports the nearest map point that falls inside it
//! (within `r_max`) at the sector's center angle, or no return.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{polar_about, Beam, PointCloudMap, PolarScan, Pose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanParams {
    resolution: f64,
    max_range: f64,
    sector_count: usize,
}

impl ScanParams {
    /// `resolution` must divide the full circle into an integer number of
    /// sectors (to within 1e-9).
    pub fn new(resolution: f64, max_range: f64) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "resolution {resolution} must be positive"
            )));
        }
        if !(max_range > 0.0 && max_range.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "max range {max_range} must be positive"
            )));
        }
        let ratio = TAU / resolution;
        let count = ratio.round();
        if (ratio - count).abs() > 1e-9 || count < 1.0 {
            return Err(Error::InvalidInput(format!(
                "2pi / resolution = {ratio} is not an integer sector count"
            )));
        }
        Ok(Self {
            resolution,
            max_range,
            sector_count: count as usize,
        })
    }

    /// Convenience constructor from a whole number of sectors.
    pub fn with_sectors(sector_count: usize, max_range: f64) -> Result<Self> {
        if sector_count == 0 {
            return Err(Error::InvalidInput("sector count must be positive".into()));
        }
        Self::new(TAU / sector_count as f64, max_range)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn max_range(&self) -> f64 {
        self.max_range
    }

    pub fn sector_count(&self) -> usize {
        self.sector_count
    }

    /// Sector containing a normalized angle in `[0, 2π)`.
    pub fn sector_of(&self, angle: f64) -> usize {
        // angles are non-negative, so truncation is the floor
        ((angle / self.resolution) as usize).min(self.sector_count - 1)
    }

    /// Beam angle reported for sector `k` (the sector center).
    pub fn beam_angle(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.resolution
    }
}

/// Radial range noise: zero-mean Gaussian truncated to `[-bound, bound]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarNoise {
    sigma: f64,
    bound: f64,
}

impl LidarNoise {
    pub fn new(sigma: f64, bound: f64) -> Result<Self> {
        if !(sigma >= 0.0 && bound >= 0.0 && sigma.is_finite() && bound.is_finite()) {
            return Err(Error::InvalidInput(
                "noise parameters must be finite and >= 0".into(),
            ));
        }
        if bound != 0.0 && bound < sigma {
            return Err(Error::InvalidInput(format!(
                "noise bound {bound} smaller than sigma {sigma}"
            )));
        }
        Ok(Self { sigma, bound })
    }

    pub fn none() -> Self {
        Self {
            sigma: 0.0,
            bound: 0.0,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma == 0.0 || self.bound == 0.0
    }

    /// One truncated-Gaussian draw (rejection sampling).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_noiseless() {
            return 0.0;
        }
        let normal = Normal::new(0.0, self.sigma).expect("sigma validated at construction");
        loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= self.bound {
                return v;
            }
        }
    }
}

/// Reconstruct the scan that would be observed at `center` given `map`.
pub fn reconstruct_scan(center: Pose, map: &PointCloudMap, params: &ScanParams) -> PolarScan {
    PolarMap::new(center, map, params).reconstruct_excluding(params, |_| false)
}

/// Reconstruction with every map point whose bearing about `center`
/// satisfies `excluded` removed from the map first.
pub fn reconstruct_scan_excluding(
    center: Pose,
    map: &PointCloudMap,
    params: &ScanParams,
    excluded: impl Fn(f64) -> bool,
) -> PolarScan {
    PolarMap::new(center, map, params).reconstruct_excluding(params, excluded)
}

/// Map points within range of a center, in polar coordinates about it.
/// Lets several reconstructions from the same center share the work.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarMap {
    center: Pose,
    entries: Vec<(f64, f64)>,
}

impl PolarMap {
    pub fn new(center: Pose, map: &PointCloudMap, params: &ScanParams) -> Self {
        let reach = params.max_range;
        let entries = map
            .points()
            .iter()
            .filter(|p| (p.x - center.x1).abs() <= reach && (p.y - center.x2).abs() <= reach)
            .map(|p| polar_about(center, *p))
            .filter(|&(r, _)| r > 0.0 && r <= params.max_range)
            .collect();
        Self { center, entries }
    }

    pub fn center(&self) -> Pose {
        self.center
    }

    pub fn reconstruct_excluding(
        &self,
        params: &ScanParams,
        excluded: impl Fn(f64) -> bool,
    ) -> PolarScan {
        let mut nearest: Vec<Option<f64>> = vec![None; params.sector_count];
        for &(r, a) in &self.entries {
            if r > params.max_range || excluded(a) {
                continue;
            }
            let slot = &mut nearest[params.sector_of(a)];
            if slot.is_none_or(|best| r < best) {
                *slot = Some(r);
            }
        }
        let beams = nearest
            .into_iter()
            .enumerate()
            .map(|(k, range)| Beam {
                range,
                angle: params.beam_angle(k),
            })
            .collect();
        PolarScan::new(beams, params.max_range).expect("reconstruction yields a well-formed scan")
    }
}

/// Simulated LiDAR measurement at the true pose: the reconstructed scan with
/// bounded radial noise on every return, clamped to `(0, r_max]`.
pub fn sense_lidar<R: Rng + ?Sized>(
    true_pose: Pose,
    map: &PointCloudMap,
    params: &ScanParams,
    noise: &LidarNoise,
    rng: &mut R,
) -> PolarScan {
    let clean = reconstruct_scan(true_pose, map, params);
    if noise.is_noiseless() {
        return clean;
    }
    let beams = clean
        .beams()
        .iter()
        .map(|b| Beam {
            range: b
                .range
                .map(|r| (r + noise.sample(rng)).clamp(f64::EPSILON, params.max_range)),
            angle: b.angle,
        })
        .collect();
    PolarScan::new(beams, params.max_range).expect("noisy ranges are clamped into range")
}
