use serde::{Deserialize, Serialize};

use crate::geometry::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    Boundary,
    Divider,
}

impl MapClass {
    pub const ALL: [MapClass; 2] = [MapClass::Boundary, MapClass::Divider];

    pub fn index(self) -> usize {
        match self {
            MapClass::Boundary => 0,
            MapClass::Divider => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Map element in the ego frame (x forward, y left), meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    #[serde(rename = "class")]
    pub class: MapClass,
    #[serde(rename = "pts")]
    pub points: Vec<Point<f64>>,
}

/// Agent footprint plus observed and future poses `(x, y, heading)` at
/// fixed timesteps. The last history pose is the current one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    /// (length, width) in meters.
    #[serde(rename = "lw")]
    pub footprint: [f64; 2],
    #[serde(rename = "hist")]
    pub history: Vec<[f64; 3]>,
    #[serde(rename = "fut")]
    pub future: Vec<[f64; 3]>,
}

impl AgentTrack {
    pub fn current(&self) -> [f64; 3] {
        *self.history.last().expect("agent without history")
    }

    pub fn current_position(&self) -> Point<f64> {
        let c = self.current();
        [c[0], c[1]]
    }

    /// Finite-difference velocity over the last observed step.
    pub fn velocity(&self, dt: f64) -> [f64; 2] {
        match self.history.as_slice() {
            [.., a, b] => [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt],
            _ => [0.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Left,
    Straight,
    Right,
}

impl Command {
    pub const ALL: [Command; 3] = [Command::Left, Command::Straight, Command::Right];

    pub fn index(self) -> usize {
        match self {
            Command::Left => 0,
            Command::Straight => 1,
            Command::Right => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorScene {
    pub seed: u64,
    pub command: Command,
    #[serde(rename = "map")]
    pub map_elements: Vec<Polyline>,
    pub agents: Vec<AgentTrack>,
    #[serde(rename = "ego_fut")]
    pub ego_future: Vec<Point<f64>>,
}
