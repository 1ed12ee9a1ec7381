//! CSV, metadata and SVG output of simulation runs.
//!
//! `trajectory.csv` columns:
//! `k,x1,x2,` then `xhat{id}_1,xhat{id}_2` per estimator, then
//! `u1,u2,path,trusted,excluded,` then `zeta_s_{id}` per estimator, then `h0`.
//! Sets are `;`-separated ids; empty cells mean "not applicable".
//!
//! `trust.csv` columns:
//! `k,estimator,criterion,r1,r2,zeta_s,zeta_bar_s,sector_start_deg,sector_width_deg,lidar_trusted`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;

use super::{Resolved, RunArtifacts};
use crate::barrier::Polynomial;
use crate::error::{Error, Result};
use crate::geometry::PointCloudMap;

fn join_ids(ids: &BTreeSet<usize>) -> String {
    ids.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

impl RunArtifacts {
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("k,x1,x2");
        for id in &self.estimator_ids {
            write!(out, ",xhat{id}_1,xhat{id}_2").unwrap();
        }
        out.push_str(",u1,u2,path,trusted,excluded");
        for id in &self.estimator_ids {
            write!(out, ",zeta_s_{id}").unwrap();
        }
        out.push_str(",h0\n");

        for r in &self.records {
            write!(out, "{},{},{}", r.k, r.state[0], r.state[1]).unwrap();
            for e in &r.estimates {
                write!(out, ",{},{}", e[0], e[1]).unwrap();
            }
            match &r.input {
                Some(u) => write!(out, ",{},{}", u[0], u[1]).unwrap(),
                None => out.push_str(",,"),
            }
            write!(
                out,
                ",{},{},{}",
                r.path.map_or("", |p| p.label()),
                r.trusted.as_ref().map(join_ids).unwrap_or_default(),
                join_ids(&r.excluded)
            )
            .unwrap();
            for i in 0..self.estimator_ids.len() {
                match r.degradations.get(i) {
                    Some(z) => write!(out, ",{z}").unwrap(),
                    None => out.push(','),
                }
            }
            writeln!(out, ",{}", r.h0).unwrap();
        }
        out
    }

    pub fn trust_csv(&self) -> String {
        let mut out =
            String::from("k,estimator,criterion,r1,r2,zeta_s,zeta_bar_s,sector_start_deg,sector_width_deg,lidar_trusted\n");
        for t in &self.trust_rows {
            let (start, width) = t
                .removed_sector
                .map(|(s, w)| (s.to_degrees().to_string(), w.to_degrees().to_string()))
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                t.k,
                t.estimator,
                t.criterion.label(),
                t.offset[0],
                t.offset[1],
                t.degradation,
                t.threshold,
                start,
                width,
                t.lidar_trusted
            )
            .unwrap();
        }
        out
    }

    pub fn metadata_toml(&self) -> String {
        let m = &self.metadata;
        let mut out = String::new();
        writeln!(out, "config_hash = \"{}\"", m.config_hash).unwrap();
        writeln!(out, "seed = {}", m.seed).unwrap();
        writeln!(out, "scenario = \"{}\"", m.scenario.label()).unwrap();
        writeln!(out, "mode = \"{}\"", m.mode.label()).unwrap();
        writeln!(out, "horizon = {}", m.horizon).unwrap();
        writeln!(out, "min_h0 = {}", self.safety.min_h0).unwrap();
        match self.safety.first_violation {
            Some(k) => writeln!(out, "first_violation = {k}").unwrap(),
            None => writeln!(out, "first_violation = \"none\"").unwrap(),
        }
        let deps: Vec<String> = m.departures.iter().map(|d| format!("{d:?}")).collect();
        writeln!(out, "departures = [{}]", deps.join(", ")).unwrap();
        if let Some(v) = &self.verification {
            writeln!(out, "certified_probability = {}", v.safety_probability).unwrap();
        }
        out
    }

    /// Write CSVs, scan snapshots and metadata into `dir`. Returns the paths
    /// written.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut files = vec![
            (dir.join("trajectory.csv"), self.trajectory_csv()),
            (dir.join("trust.csv"), self.trust_csv()),
            (dir.join("metadata.toml"), self.metadata_toml()),
        ];
        for (k, scan) in &self.snapshots {
            files.push((dir.join(format!("scan_{k:05}.csv")), scan.to_text()));
        }
        let mut written = Vec::new();
        for (path, text) in files {
            fs::write(&path, text).map_err(|e| io_err(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// A labelled polyline for [`render_svg`].
pub struct Trace<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: &'a [DVector<f64>],
}

/// Boundary of the star-shaped set `{p ≥ 0}` around `center`, by bisection
/// along `rays` directions out to `reach`.
fn star_boundary(p: &Polynomial, center: [f64; 2], reach: f64, rays: usize) -> Vec<[f64; 2]> {
    (0..rays)
        .filter_map(|i| {
            let t = std::f64::consts::TAU * i as f64 / rays as f64;
            let at = |s: f64| [center[0] + s * t.cos(), center[1] + s * t.sin()];
            if p.eval(&at(reach)) >= 0.0 {
                return None;
            }
            let (mut lo, mut hi) = (0.0, reach);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if p.eval(&at(mid)) >= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Some(at(lo))
        })
        .collect()
}

/// SVG overlay of the map, the safe-set boundary (drawn around `center`,
/// which must lie inside the set) and trajectories, over the box
/// `[lower, upper]`.
pub fn render_svg(
    map: &PointCloudMap,
    safe: &Polynomial,
    center: [f64; 2],
    lower: [f64; 2],
    upper: [f64; 2],
    traces: &[Trace<'_>],
) -> String {
    let scale = 800.0 / (upper[1] - lower[1]).max(upper[0] - lower[0]);
    let w = (upper[0] - lower[0]) * scale;
    let h = (upper[1] - lower[1]) * scale;
    let px = |x: f64, y: f64| ((x - lower[0]) * scale, (upper[1] - y) * scale);
    let inside = |x: f64, y: f64| x >= lower[0] && x <= upper[0] && y >= lower[1] && y <= upper[1];

    let mut out = String::new();
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.1} {h:.1}\">"
    )
    .unwrap();
    writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").unwrap();
    out.push_str("<g fill=\"#555\">\n");
    for p in map.points().iter().filter(|p| inside(p.x, p.y)) {
        let (x, y) = px(p.x, p.y);
        writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"0.8\"/>").unwrap();
    }
    out.push_str("</g>\n");

    let reach = ((upper[0] - lower[0]).powi(2) + (upper[1] - lower[1]).powi(2)).sqrt();
    let boundary = star_boundary(safe, center, reach, 720);
    if !boundary.is_empty() {
        let pts: Vec<String> = boundary
            .iter()
            .map(|b| {
                let (x, y) = px(b[0], b[1]);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        writeln!(
            out,
            "<polygon points=\"{}\" fill=\"#2a2\" fill-opacity=\"0.08\" stroke=\"#2a2\" stroke-width=\"1.5\"/>",
            pts.join(" ")
        )
        .unwrap();
    }

    for (i, t) in traces.iter().enumerate() {
        let pts: Vec<String> = t
            .points
            .iter()
            .map(|p| {
                let (x, y) = px(p[0], p[1]);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
            pts.join(" "),
            t.color
        )
        .unwrap();
        writeln!(
            out,
            "<text x=\"10\" y=\"{}\" font-family=\"sans-serif\" font-size=\"14\" fill=\"{}\">{}</text>",
            20 + 18 * i,
            t.color,
            t.label
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// [`render_svg`] framed around the safe set and the traces, with the goal
/// as the interior point of the safe set.
pub fn overlay_svg(res: &Resolved, traces: &[Trace<'_>]) -> String {
    let center = [res.goal[0], res.goal[1]];
    let mut lower = center;
    let mut upper = center;
    let boundary = star_boundary(&res.sets.safe, center, 1e3, 720);
    let trace_points = traces
        .iter()
        .flat_map(|t| t.points.iter())
        .map(|p| [p[0], p[1]]);
    for p in boundary.into_iter().chain(trace_points) {
        for i in 0..2 {
            lower[i] = lower[i].min(p[i]);
            upper[i] = upper[i].max(p[i]);
        }
    }
    let pad = 5.0;
    render_svg(
        &res.map,
        &res.sets.safe,
        center,
        [lower[0] - pad, lower[1] - pad],
        [upper[0] + pad, upper[1] + pad],
        traces,
    )
}
