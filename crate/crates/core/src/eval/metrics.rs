use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, OrientedRect, Point};
use crate::scene::AgentTrack;

/// Trajectory indices of the 1 s, 2 s and 3 s horizons at 0.5 s spacing.
pub const HORIZON_INDICES: [usize; 3] = [1, 3, 5];
pub const EGO_LENGTH: f64 = 4.0;
pub const EGO_WIDTH: f64 = 1.8;

/// One value per horizon plus their mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Horizons {
    #[serde(rename = "1s")]
    pub h1: f64,
    #[serde(rename = "2s")]
    pub h2: f64,
    #[serde(rename = "3s")]
    pub h3: f64,
    pub avg: f64,
}

impl Horizons {
    pub fn new([h1, h2, h3]: [f64; 3]) -> Self {
        Self {
            h1,
            h2,
            h3,
            avg: (h1 + h2 + h3) / 3.0,
        }
    }

    pub fn values(&self) -> [f64; 3] {
        [self.h1, self.h2, self.h3]
    }

    /// Per-horizon mean over `rows`, empty input gives zeros.
    pub fn mean_of(rows: &[[f64; 3]]) -> Self {
        if rows.is_empty() {
            return Self::default();
        }
        let n = rows.len() as f64;
        let mut sums = [0.0; 3];
        for r in rows {
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
        }
        Self::new(sums.map(|s| s / n))
    }
}

fn check_horizon(len: usize) -> Result<()> {
    if len <= HORIZON_INDICES[2] {
        return Err(Error::Input(format!(
            "trajectory of {len} points does not reach the 3 s horizon"
        )));
    }
    Ok(())
}

/// Euclidean distance at each horizon index.
pub fn displacement_error(pred: &[Point<f64>], gt: &[Point<f64>]) -> Result<Horizons> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            op: "displacement_error",
            lhs: vec![pred.len(), 2],
            rhs: vec![gt.len(), 2],
        });
    }
    check_horizon(pred.len())?;
    Ok(Horizons::new(HORIZON_INDICES.map(|i| dist(pred[i], gt[i]))))
}

/// Heading at every point: the chord from the previous to the next point,
/// one-sided at both ends. A zero-length chord gives heading 0.
pub fn chord_headings(traj: &[Point<f64>]) -> Vec<f64> {
    let n = traj.len();
    (0..n)
        .map(|t| {
            if n < 2 {
                return 0.0;
            }
            let (a, b) = (traj[t.saturating_sub(1)], traj[(t + 1).min(n - 1)]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            if dx == 0.0 && dy == 0.0 {
                0.0
            } else {
                dy.atan2(dx)
            }
        })
        .collect()
}

/// Ego footprints along a trajectory.
pub fn ego_rects(traj: &[Point<f64>]) -> Vec<OrientedRect<f64>> {
    traj.iter()
        .zip(chord_headings(traj))
        .map(|(&p, h)| OrientedRect::new(p, h, EGO_LENGTH, EGO_WIDTH))
        .collect()
}

/// First trajectory index at which the ego footprint overlaps any agent's
/// ground-truth footprint at the same time step.
pub fn first_collision(ego: &[Point<f64>], agents: &[AgentTrack]) -> Option<usize> {
    ego_rects(ego).iter().enumerate().find_map(|(t, e)| {
        agents
            .iter()
            .any(|a| {
                a.future.get(t).is_some_and(|f| {
                    e.intersects(&OrientedRect::new(
                        [f[0], f[1]],
                        f[2],
                        a.footprint[0],
                        a.footprint[1],
                    ))
                })
            })
            .then_some(t)
    })
}

/// Cumulative collision flags per horizon for one scene.
pub fn collision_flags(ego: &[Point<f64>], agents: &[AgentTrack]) -> Result<[bool; 3]> {
    check_horizon(ego.len())?;
    let first = first_collision(ego, agents);
    Ok(HORIZON_INDICES.map(|h| first.is_some_and(|t| t <= h)))
}

/// Collided fraction per horizon over `(ego trajectory, agents)` pairs.
pub fn collision_rate<'a>(
    cases: impl IntoIterator<Item = (&'a [Point<f64>], &'a [AgentTrack])>,
) -> Result<Horizons> {
    let rows = cases
        .into_iter()
        .map(|(ego, agents)| Ok(collision_flags(ego, agents)?.map(|c| if c { 1.0 } else { 0.0 })))
        .collect::<Result<Vec<_>>>()?;
    Ok(Horizons::mean_of(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(offset: [f64; 2]) -> Vec<Point<f64>> {
        (1..=6)
            .map(|i| [i as f64 * 4.0 + offset[0], offset[1]])
            .collect()
    }

    #[test]
    fn offset_gives_three_four_five() {
        let de = displacement_error(&straight([0.3, 0.4]), &straight([0.0, 0.0])).unwrap();
        for v in de.values().into_iter().chain([de.avg]) {
            assert!((v - 0.5).abs() < 1e-12);
        }
        assert!(displacement_error(&straight([0.0; 2]), &straight([0.0; 2])[..5]).is_err());
    }

    #[test]
    fn headings_follow_chords() {
        let h = chord_headings(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 2.0]]);
        assert_eq!(h[0], 0.0);
        assert!((h[1] - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert!((h[3] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn shared_pose_collides_from_the_start() {
        let ego = straight([0.0, 0.0]);
        let agent = AgentTrack {
            footprint: [4.0, 1.8],
            history: vec![[0.0, 0.0, 0.0]],
            future: ego.iter().map(|p| [p[0], p[1], 0.0]).collect(),
        };
        assert_eq!(first_collision(&ego, std::slice::from_ref(&agent)), Some(0));
        let cr = collision_rate([(ego.as_slice(), std::slice::from_ref(&agent))]).unwrap();
        assert_eq!(cr.values(), [1.0; 3]);
        let far = AgentTrack {
            future: agent
                .future
                .iter()
                .map(|f| [f[0], f[1] + 100.0, 0.0])
                .collect(),
            ..agent
        };
        assert_eq!(collision_flags(&ego, &[far]).unwrap(), [false; 3]);
    }
}
