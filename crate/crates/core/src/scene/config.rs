use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How far the plan's back-extrapolated start may lie from the origin (m).
pub const EGO_START_TOLERANCE: f64 = 0.5;

/// Scene generator settings. Serialized as a flat key-value object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub range_forward: f64,
    pub range_backward: f64,
    pub range_lateral: f64,
    pub resolution: f64,
    pub lane_width: f64,
    pub lane_count_min: usize,
    pub lane_count_max: usize,
    pub agent_count_min: usize,
    pub agent_count_max: usize,
    /// Largest |curvature| (1/m) of a road labelled `straight`.
    pub curvature_straight_max: f64,
    /// |curvature| range (1/m) of roads labelled `left`/`right`.
    pub curvature_turn_min: f64,
    pub curvature_turn_max: f64,
    pub position_noise: f64,
    pub agent_speed_min: f64,
    pub agent_speed_max: f64,
    pub ego_speed_min: f64,
    pub ego_speed_max: f64,
    pub agent_length_min: f64,
    pub agent_length_max: f64,
    pub agent_width_min: f64,
    pub agent_width_max: f64,
    pub ego_length: f64,
    pub ego_width: f64,
    pub timestep: f64,
    pub history_steps: usize,
    pub future_steps: usize,
    /// Spacing of generated map vertices (m).
    pub vertex_spacing: f64,
    pub dataset_size: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            range_forward: 60.0,
            range_backward: 15.0,
            range_lateral: 30.0,
            resolution: 0.5,
            lane_width: 3.5,
            lane_count_min: 2,
            lane_count_max: 4,
            agent_count_min: 1,
            agent_count_max: 5,
            curvature_straight_max: 0.002,
            curvature_turn_min: 0.006,
            curvature_turn_max: 0.015,
            position_noise: 0.05,
            agent_speed_min: 3.0,
            agent_speed_max: 15.0,
            ego_speed_min: 8.0,
            ego_speed_max: 10.0,
            agent_length_min: 3.5,
            agent_length_max: 5.0,
            agent_width_min: 1.6,
            agent_width_max: 2.0,
            ego_length: 4.0,
            ego_width: 1.8,
            timestep: 0.5,
            history_steps: 4,
            future_steps: 6,
            vertex_spacing: 2.0,
            dataset_size: 512,
        }
    }
}

impl SceneGenConfig {
    pub fn x_min(&self) -> f64 {
        -self.range_backward
    }

    pub fn x_max(&self) -> f64 {
        self.range_forward
    }

    pub fn in_range(&self, p: [f64; 2]) -> bool {
        p[0] >= -self.range_backward
            && p[0] <= self.range_forward
            && p[1].abs() <= self.range_lateral
    }

    /// Raster rows (forward axis) and columns (lateral axis).
    pub fn grid_size(&self) -> (usize, usize) {
        (
            ((self.range_forward + self.range_backward) / self.resolution).round() as usize,
            ((2.0 * self.range_lateral) / self.resolution).round() as usize,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let positive = [
            ("range_forward", self.range_forward),
            ("range_backward", self.range_backward),
            ("range_lateral", self.range_lateral),
            ("resolution", self.resolution),
            ("lane_width", self.lane_width),
            ("timestep", self.timestep),
            ("vertex_spacing", self.vertex_spacing),
            ("ego_length", self.ego_length),
            ("ego_width", self.ego_width),
            ("agent_speed_min", self.agent_speed_min),
            ("ego_speed_min", self.ego_speed_min),
            ("agent_length_min", self.agent_length_min),
            ("agent_width_min", self.agent_width_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.position_noise < 0.0 || self.curvature_straight_max < 0.0 {
            return bad("noise and curvature bounds must be non-negative");
        }
        let ranges = [
            (
                "lane_count",
                self.lane_count_min as f64,
                self.lane_count_max as f64,
            ),
            (
                "agent_count",
                self.agent_count_min as f64,
                self.agent_count_max as f64,
            ),
            (
                "curvature_turn",
                self.curvature_turn_min,
                self.curvature_turn_max,
            ),
            ("agent_speed", self.agent_speed_min, self.agent_speed_max),
            ("ego_speed", self.ego_speed_min, self.ego_speed_max),
            ("agent_length", self.agent_length_min, self.agent_length_max),
            ("agent_width", self.agent_width_min, self.agent_width_max),
        ];
        for (name, lo, hi) in ranges {
            if lo > hi {
                return bad(&format!("{name}_min exceeds {name}_max"));
            }
        }
        if self.lane_count_min == 0 {
            return bad("at least one lane is required");
        }
        if self.curvature_turn_min <= self.curvature_straight_max {
            return bad("turning curvature must exceed the straight-road bound");
        }
        if self.agent_speed_max > 25.0 || self.ego_speed_max > 25.0 {
            return bad("speeds above 25 m/s are not generated");
        }
        if self.history_steps < 2 || self.future_steps < 2 {
            return bad("need at least 2 history and 2 future steps");
        }
        // every lane line stays a simple arc inside the range
        let radius = 1.0 / self.curvature_turn_max;
        let widest = self.lane_count_max as f64 * self.lane_width + 1.0;
        if radius <= widest {
            return bad("curvature_turn_max lets lane lines fold over");
        }
        let longest_arc = self.range_forward + self.range_backward + 2.0 * self.range_lateral;
        if std::f64::consts::PI * (radius - widest) <= longest_arc {
            return bad("curvature_turn_max lets a lane line turn back inside the range");
        }
        let (rows, cols) = self.grid_size();
        let exact =
            |cells: usize, extent: f64| (cells as f64 * self.resolution - extent).abs() < 1e-9;
        if !exact(rows, self.range_forward + self.range_backward)
            || !exact(cols, 2.0 * self.range_lateral)
        {
            return bad("perception range must be a whole number of cells");
        }
        if self.ego_speed_max * self.timestep * self.future_steps as f64 >= self.range_forward {
            return bad("ego plan leaves the perception range");
        }
        // the first plan point is one step ahead; extrapolating it back one
        // step must land near the origin
        let step = self.ego_speed_max * self.timestep;
        if self.curvature_turn_max * step * step > EGO_START_TOLERANCE {
            return bad("ego step too long for curvature_turn_max");
        }
        Ok(())
    }
}
