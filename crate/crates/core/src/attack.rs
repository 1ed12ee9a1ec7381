//! Threat model: additive false data injection on proprioceptive sensors and
//! near-obstacle spoofing of LiDAR returns in a narrow angular window.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Beam, PolarScan};

/// Widest spoofing window achievable by the hardware attack (radians).
pub const MAX_SPOOF_WIDTH: f64 = 8.0 * std::f64::consts::PI / 180.0;

/// Inclusive range of active steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ActiveWindow {
    pub start: usize,
    pub end: usize,
}

impl ActiveWindow {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidInput(format!(
                "attack window [{start}, {end}] is empty"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, k: usize) -> bool {
        (self.start..=self.end).contains(&k)
    }
}

/// Additive bias on a subset of sensors. Sensors without an entry are
/// never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct FdiSpec {
    biases: BTreeMap<usize, DVector<f64>>,
    pub window: ActiveWindow,
}

impl FdiSpec {
    pub fn new(biases: BTreeMap<usize, DVector<f64>>, window: ActiveWindow) -> Result<Self> {
        if biases.values().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("FDI bias must be finite".into()));
        }
        Ok(Self { biases, window })
    }

    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.biases.keys().copied()
    }

    pub fn bias(&self, sensor: usize) -> Option<&DVector<f64>> {
        self.biases.get(&sensor)
    }
}

pub fn inject_fdi(
    y: &DVector<f64>,
    spec: &FdiSpec,
    sensor: usize,
    k: usize,
) -> Result<DVector<f64>> {
    match spec.bias(sensor) {
        Some(a) if spec.window.contains(k) => {
            if a.len() != y.len() {
                return Err(Error::InvalidInput(format!(
                    "bias for sensor {sensor} has dimension {} but measurement has {}",
                    a.len(),
                    y.len()
                )));
            }
            Ok(y + a)
        }
        _ => Ok(y.clone()),
    }
}

/// Injected near obstacle: beams in `[angle_lo, angle_lo + width]` may be
/// shortened to a range drawn from `[range_lo, range_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarSpoofSpec {
    angle_lo: f64,
    width: f64,
    pub range_lo: f64,
    pub range_hi: f64,
    pub window: ActiveWindow,
    widened: bool,
}

impl LidarSpoofSpec {
    /// Angles in radians, any representation (e.g. negative). Windows wider
    /// than [`MAX_SPOOF_WIDTH`] are rejected unless `widen_beyond_hw_limit`.
    pub fn new(
        angle_lo: f64,
        angle_hi: f64,
        range_lo: f64,
        range_hi: f64,
        window: ActiveWindow,
        widen_beyond_hw_limit: bool,
    ) -> Result<Self> {
        let width = angle_hi - angle_lo;
        if !(width > 0.0 && width < std::f64::consts::TAU) {
            return Err(Error::InvalidInput(format!(
                "spoof angle window width {width} invalid"
            )));
        }
        if width > MAX_SPOOF_WIDTH + 1e-12 && !widen_beyond_hw_limit {
            return Err(Error::InvalidInput(format!(
                "spoof window {:.2} deg exceeds the {:.0} deg hardware bound",
                width.to_degrees(),
                MAX_SPOOF_WIDTH.to_degrees()
            )));
        }
        if !(range_lo > 0.0 && range_hi >= range_lo && range_hi.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "spoof range [{range_lo}, {range_hi}] invalid"
            )));
        }
        Ok(Self {
            angle_lo: normalize_angle(angle_lo),
            width,
            range_lo,
            range_hi,
            window,
            widened: width > MAX_SPOOF_WIDTH + 1e-12,
        })
    }

    pub fn angle_lo(&self) -> f64 {
        self.angle_lo
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// True when the spec exceeds the hardware bound via the override flag.
    pub fn is_widened(&self) -> bool {
        self.widened
    }

    pub fn covers(&self, angle: f64) -> bool {
        normalize_angle(angle - self.angle_lo) <= self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpoofedScan {
    pub scan: PolarScan,
    /// Indices of beams whose range was replaced.
    pub injected: Vec<usize>,
}

/// Merge injected returns into `scan`: every in-window beam draws a range and
/// keeps whichever of real and injected is nearer. One draw per in-window
/// beam whenever active, so the rng stream does not depend on the scene.
pub fn spoof_scan<R: Rng + ?Sized>(
    scan: &PolarScan,
    spec: &LidarSpoofSpec,
    k: usize,
    rng: &mut R,
) -> SpoofedScan {
    if !spec.window.contains(k) {
        return SpoofedScan {
            scan: scan.clone(),
            injected: Vec::new(),
        };
    }
    let mut injected = Vec::new();
    let beams: Vec<Beam> = scan
        .beams()
        .iter()
        .enumerate()
        .map(|(i, b)| {
            if !spec.covers(b.angle) {
                return *b;
            }
            let r = rng.random_range(spec.range_lo..=spec.range_hi);
            if r <= scan.max_range() && b.range.is_none_or(|cur| r < cur) {
                injected.push(i);
                Beam::hit(r, b.angle)
            } else {
                *b
            }
        })
        .collect();
    SpoofedScan {
        scan: PolarScan::new(beams, scan.max_range()).expect("merge keeps ranges within bounds"),
        injected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fdi() -> FdiSpec {
        let mut b = BTreeMap::new();
        b.insert(1, DVector::from_vec(vec![-20.0, 0.0]));
        FdiSpec::new(b, ActiveWindow::new(10, 20).unwrap()).unwrap()
    }

    #[test]
    fn fdi_examples() {
        let y = DVector::zeros(2);
        assert_eq!(
            inject_fdi(&y, &fdi(), 1, 15).unwrap().as_slice(),
            &[-20.0, 0.0]
        );
        assert_eq!(inject_fdi(&y, &fdi(), 2, 15).unwrap(), y);
        assert_eq!(inject_fdi(&y, &fdi(), 1, 21).unwrap(), y);
        assert_eq!(inject_fdi(&y, &fdi(), 1, 9).unwrap(), y);
    }

    #[test]
    fn wide_window_needs_override() {
        let w = ActiveWindow::new(0, 10).unwrap();
        let (lo, hi) = ((-70.0f64).to_radians(), (-60.0f64).to_radians());
        assert!(LidarSpoofSpec::new(lo, hi, 10.0, 15.0, w, false).is_err());
        let s = LidarSpoofSpec::new(lo, hi, 10.0, 15.0, w, true).unwrap();
        assert!(s.is_widened());
        assert!(s.covers(295f64.to_radians()));
        assert!(!s.covers(301f64.to_radians()));
        assert!(!LidarSpoofSpec::new(lo, lo + 0.1, 10.0, 15.0, w, false)
            .unwrap()
            .is_widened());
    }

    #[test]
    fn nearer_real_return_wins() {
        let scan = PolarScan::new(vec![Beam::hit(5.0, 0.01), Beam::hit(20.0, 1.0)], 30.0).unwrap();
        let spec = LidarSpoofSpec::new(
            0.0,
            0.05,
            12.0,
            12.0,
            ActiveWindow::new(0, 0).unwrap(),
            false,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = spoof_scan(&scan, &spec, 0, &mut rng);
        assert_eq!(out.scan, scan);
        assert!(out.injected.is_empty());
    }

    #[test]
    fn empty_window_leaves_scan() {
        let scan = PolarScan::new(vec![Beam::hit(5.0, 1.0)], 30.0).unwrap();
        let spec = LidarSpoofSpec::new(3.0, 3.1, 1.0, 2.0, ActiveWindow::new(0, 9).unwrap(), false)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(spoof_scan(&scan, &spec, 4, &mut rng).scan, scan);
    }
}
