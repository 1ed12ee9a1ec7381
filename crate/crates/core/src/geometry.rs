//! Shared 2D geometry: poses, point-cloud maps, polar LiDAR scans and their
//! world-frame Cartesian translation.
//!
//! Poses are positions only. Scan angles are world-frame, measured
//! counter-clockwise from the +X axis and normalized to `[0, 2π)`.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};

/// Position of the vehicle in the world frame (meters). No heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x1: f64,
    pub x2: f64,
}

impl Pose {
    pub fn new(x1: f64, x2: f64) -> Self {
        Self { x1, x2 }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v.x, v.y)
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.x1, self.x2)
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite()
    }

    pub fn translated(self, d: Vector2<f64>) -> Self {
        Self::new(self.x1 + d.x, self.x2 + d.y)
    }
}

/// Wrap any finite angle into `[0, 2π)`.
pub fn normalize_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Polar coordinates `(radius, angle in [0, 2π))` of `p` about `center`.
pub fn polar_about(center: Pose, p: Vector2<f64>) -> (f64, f64) {
    let dx = p.x - center.x1;
    let dy = p.y - center.x2;
    (dx.hypot(dy), normalize_angle(dy.atan2(dx)))
}

/// The a-priori obstacle map: a set of 2D points in world coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloudMap {
    points: Vec<Vector2<f64>>,
}

impl PointCloudMap {
    pub fn new(points: Vec<Vector2<f64>>) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite()))
        {
            return Err(Error::InvalidInput(format!("map point {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector2<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Parse the map text format: one `x,y` pair per line, `#` comments and
    /// blank lines ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |reason: &str| Error::Parse {
                line: idx + 1,
                reason: format!("{reason}: {line:?}"),
            };
            let mut fields = line.split(',');
            let (Some(xs), Some(ys), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(parse_err("expected two comma-separated numbers"));
            };
            let x: f64 = xs
                .trim()
                .parse()
                .map_err(|_| parse_err("bad x coordinate"))?;
            let y: f64 = ys
                .trim()
                .parse()
                .map_err(|_| parse_err("bad y coordinate"))?;
            if !(x.is_finite() && y.is_finite()) {
                return Err(parse_err("coordinates must be finite"));
            }
            points.push(Vector2::new(x, y));
        }
        Ok(Self { points })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 16);
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.x, p.y));
        }
        out
    }
}

/// Read a map file (see [`PointCloudMap::parse`] for the format).
pub fn load_map(path: impl AsRef<Path>) -> Result<PointCloudMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    PointCloudMap::parse(&text)
}

/// A single LiDAR return. `range == None` marks a beam with no return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beam {
    pub range: Option<f64>,
    pub angle: f64,
}

impl Beam {
    pub fn hit(range: f64, angle: f64) -> Self {
        Self {
            range: Some(range),
            angle,
        }
    }

    pub fn no_return(angle: f64) -> Self {
        Self { range: None, angle }
    }

    pub fn is_valid(&self) -> bool {
        self.range.is_some()
    }
}

/// Raw polar scan: beams in strictly increasing angle order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarScan {
    beams: Vec<Beam>,
    max_range: f64,
}

impl PolarScan {
    pub fn new(beams: Vec<Beam>, max_range: f64) -> Result<Self> {
        if !(max_range > 0.0 && max_range.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "max range {max_range} must be positive"
            )));
        }
        for (i, b) in beams.iter().enumerate() {
            if !(b.angle >= 0.0 && b.angle < TAU) {
                return Err(Error::InvalidInput(format!(
                    "beam {i} angle {} outside [0, 2pi)",
                    b.angle
                )));
            }
            if let Some(r) = b.range {
                if !(r > 0.0 && r <= max_range) {
                    return Err(Error::InvalidInput(format!(
                        "beam {i} range {r} outside (0, {max_range}]"
                    )));
                }
            }
        }
        if let Some(i) = beams.windows(2).position(|w| w[1].angle <= w[0].angle) {
            return Err(Error::InvalidInput(format!(
                "beam angles not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(Self { beams, max_range })
    }

    pub fn beams(&self) -> &[Beam] {
        &self.beams
    }

    pub fn max_range(&self) -> f64 {
        self.max_range
    }

    /// Number of beams carrying a return (`n_s`).
    pub fn valid_count(&self) -> usize {
        self.beams.iter().filter(|b| b.is_valid()).count()
    }

    /// Copy of this scan with `keep(beam)` false beams removed entirely.
    pub fn filtered(&self, mut keep: impl FnMut(&Beam) -> bool) -> Self {
        Self {
            beams: self.beams.iter().copied().filter(|b| keep(b)).collect(),
            max_range: self.max_range,
        }
    }

    /// Parse the scan text format: one `range,angle` line per beam, where
    /// `range` is a number or `none` for a beam without a return.
    pub fn parse(text: &str, max_range: f64) -> Result<Self> {
        let mut beams = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |reason: &str| Error::Parse {
                line: idx + 1,
                reason: format!("{reason}: {line:?}"),
            };
            let mut fields = line.split(',');
            let (Some(rs), Some(a_s), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(parse_err("expected `range,angle`"));
            };
            let range = match rs.trim() {
                "none" => None,
                s => Some(s.parse::<f64>().map_err(|_| parse_err("bad range"))?),
            };
            let angle: f64 = a_s.trim().parse().map_err(|_| parse_err("bad angle"))?;
            beams.push(Beam { range, angle });
        }
        Self::new(beams, max_range)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.beams {
            match b.range {
                Some(r) => out.push_str(&format!("{r},{}\n", b.angle)),
                None => out.push_str(&format!("none,{}\n", b.angle)),
            }
        }
        out
    }
}

/// World-frame points of a scan, translated by the pose it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianScan {
    pub points: Vec<Vector2<f64>>,
    pub origin: Pose,
}

impl CartesianScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Translate a polar scan into world coordinates at `pose`. Beams without a
/// return are dropped.
pub fn to_cartesian(pose: Pose, scan: &PolarScan) -> CartesianScan {
    let points = scan
        .beams
        .iter()
        .filter_map(|b| {
            b.range.map(|r| {
                let (s, c) = b.angle.sin_cos();
                Vector2::new(pose.x1 + r * c, pose.x2 + r * s)
            })
        })
        .collect();
    CartesianScan {
        points,
        origin: pose,
    }
}
