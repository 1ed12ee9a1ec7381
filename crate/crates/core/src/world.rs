//! Synthetic urban environments: axis-aligned buildings rasterized to
//! boundary point clouds.

use nalgebra::Vector2;

use crate::geometry::PointCloudMap;

/// Axis-aligned building footprint `[x_min, x_max] × [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Building {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Building {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// Boundary points every `spacing` meters (corners included once).
    pub fn boundary_points(&self, spacing: f64) -> Vec<Vector2<f64>> {
        let corners = [
            Vector2::new(self.x_min, self.y_min),
            Vector2::new(self.x_max, self.y_min),
            Vector2::new(self.x_max, self.y_max),
            Vector2::new(self.x_min, self.y_max),
        ];
        let mut out = Vec::new();
        for i in 0..4 {
            let (a, b) = (corners[i], corners[(i + 1) % 4]);
            let len = (b - a).norm();
            let steps = (len / spacing).round().max(1.0) as usize;
            for s in 0..steps {
                out.push(a + (b - a) * (s as f64 / steps as f64));
            }
        }
        out
    }
}

pub fn rasterize(buildings: &[Building], spacing: f64) -> PointCloudMap {
    let pts = buildings
        .iter()
        .flat_map(|b| b.boundary_points(spacing))
        .collect();
    PointCloudMap::new(pts).expect("building corners are finite")
}

/// The default delivery district: a north-south street lined on both sides
/// by short buildings separated by alleys, with staggered facade setbacks.
pub fn urban_district() -> Vec<Building> {
    let mut out = Vec::new();
    let mut y = -110.0;
    let mut i = 0;
    while y < 80.0 {
        let len = [12.0, 9.0, 15.0, 11.0][i % 4];
        let setback = [0.0, 1.5, 0.5, 2.5][i % 4];
        let setback_east = [1.0, 0.0, 2.0, 0.5][i % 4];
        out.push(Building::new(-36.0, -14.0 - setback, y, y + len));
        out.push(Building::new(
            14.0 + setback_east,
            36.0,
            y + 2.0,
            y + 2.0 + len,
        ));
        y += len + 4.0;
        i += 1;
    }
    out
}
