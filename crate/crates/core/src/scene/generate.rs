use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::EGO_START_TOLERANCE;
use super::{AgentTrack, Command, MapClass, Polyline, SceneGenConfig, VectorScene};
use crate::error::{Error, Result};
use crate::geometry::{dist, Point};

/// Minimum center gap between vehicles sharing a lane, at every timestep.
const LANE_GAP: f64 = 8.0;
const MAX_AGENT_SPEED: f64 = 25.0;
const STRAIGHT_HEADING_LIMIT: f64 = 10.0 * std::f64::consts::PI / 180.0;
const MIN_VERTEX_GAP: f64 = 1e-6;
const AGENT_ATTEMPTS: usize = 64;

/// Circular arc through the origin with heading 0 at arc length 0.
#[derive(Clone, Copy, Debug)]
struct Arc {
    kappa: f64,
}

impl Arc {
    /// Point at reference arc length `s`, shifted `offset` meters to the left.
    fn point(self, s: f64, offset: f64) -> Point<f64> {
        let k = self.kappa;
        let theta = k * s;
        let (sin, cos) = theta.sin_cos();
        let (x, y) = if (k * s).abs() < 1e-6 {
            // series form avoids 0/0 as kappa -> 0
            let t2 = theta * theta;
            (s * (1.0 - t2 / 6.0), s * theta / 2.0 * (1.0 - t2 / 12.0))
        } else {
            (sin / k, (1.0 - cos) / k)
        };
        [x - offset * sin, y + offset * cos]
    }

    fn heading(self, s: f64) -> f64 {
        self.kappa * s
    }

    /// Reference arc length covered when moving `d` meters along the line at `offset`.
    fn reference_advance(self, d: f64, offset: f64) -> f64 {
        d / (1.0 - self.kappa * offset)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Samples the line at `offset` and keeps its longest in-range run, with
/// the run's ends pushed out to the range boundary by bisection.
fn clipped_line(arc: Arc, offset: f64, cfg: &SceneGenConfig) -> Option<Vec<Point<f64>>> {
    let reach = cfg.range_forward + cfg.range_backward + 2.0 * cfg.range_lateral;
    let n = (2.0 * reach / cfg.vertex_spacing).ceil() as usize;
    let s_at = |i: usize| -reach + 2.0 * reach * i as f64 / n as f64;
    let inside: Vec<bool> = (0..=n)
        .map(|i| cfg.in_range(arc.point(s_at(i), offset)))
        .collect();

    let (mut best, mut start) = (None::<(usize, usize)>, None);
    for i in 0..=n + 1 {
        match (inside.get(i).copied().unwrap_or(false), start) {
            (true, None) => start = Some(i),
            (false, Some(a)) => {
                if best.is_none_or(|(b0, b1)| i - a > b1 - b0) {
                    best = Some((a, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    let (a, b) = best?;

    let edge = |s_in: f64, s_out: f64| {
        let (mut lo, mut hi) = (s_in, s_out);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if cfg.in_range(arc.point(mid, offset)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        arc.point(lo, offset)
    };

    let mut pts = Vec::with_capacity(b - a + 2);
    if a > 0 {
        pts.push(edge(s_at(a), s_at(a - 1)));
    }
    for i in a..b {
        let p = arc.point(s_at(i), offset);
        if pts
            .last()
            .is_none_or(|&q| dist(p, q) > cfg.vertex_spacing * 1e-3)
        {
            pts.push(p);
        }
    }
    if b <= n {
        let p = edge(s_at(b - 1), s_at(b));
        if dist(p, *pts.last().unwrap()) > cfg.vertex_spacing * 1e-3 {
            pts.push(p);
        } else {
            *pts.last_mut().unwrap() = p;
        }
    }
    (pts.len() >= 2).then_some(pts)
}

struct LaneMotion {
    lane: usize,
    /// Reference arc length at each timestep from the first history step.
    s: Vec<f64>,
}

fn gap_ok(a: &LaneMotion, b: &LaneMotion) -> bool {
    a.lane != b.lane || a.s.iter().zip(&b.s).all(|(x, y)| (x - y).abs() >= LANE_GAP)
}

/// Generates one scene. Pure in `(seed, cfg)`; `cfg` must be valid.
pub fn generate_scene(seed: u64, cfg: &SceneGenConfig) -> VectorScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let command = Command::ALL[rng.gen_range(0..3)];
    let kappa = match command {
        Command::Straight => uniform(
            &mut rng,
            -cfg.curvature_straight_max,
            cfg.curvature_straight_max,
        ),
        Command::Left => uniform(&mut rng, cfg.curvature_turn_min, cfg.curvature_turn_max),
        Command::Right => -uniform(&mut rng, cfg.curvature_turn_min, cfg.curvature_turn_max),
    };
    let arc = Arc { kappa };
    let lanes = rng.gen_range(cfg.lane_count_min..=cfg.lane_count_max);
    let ego_lane = rng.gen_range(0..lanes);
    let w = cfg.lane_width;

    let mut map_elements = Vec::with_capacity(lanes + 1);
    for k in 0..=lanes {
        let offset = (k as f64 - ego_lane as f64 - 0.5) * w;
        let class = if k == 0 || k == lanes {
            MapClass::Boundary
        } else {
            MapClass::Divider
        };
        if let Some(points) = clipped_line(arc, offset, cfg) {
            map_elements.push(Polyline { class, points });
        }
    }

    let (h, f, dt) = (cfg.history_steps, cfg.future_steps, cfg.timestep);
    let steps = h + f;
    // timestep index i corresponds to time (i + 1 - h) * dt
    let time = |i: usize| (i as f64 + 1.0 - h as f64) * dt;

    let ego_speed = uniform(&mut rng, cfg.ego_speed_min, cfg.ego_speed_max);
    let ego_motion = LaneMotion {
        lane: ego_lane,
        s: (0..steps).map(|i| ego_speed * time(i)).collect(),
    };
    let ego_future = (h..steps)
        .map(|i| arc.point(ego_motion.s[i], 0.0))
        .collect();

    let noise = Normal::new(0.0, cfg.position_noise).expect("validated noise scale");
    let n_agents = rng.gen_range(cfg.agent_count_min..=cfg.agent_count_max);
    let mut placed: Vec<LaneMotion> = Vec::new();
    let mut agents = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        for _ in 0..AGENT_ATTEMPTS {
            let lane = rng.gen_range(0..lanes);
            let offset = (lane as f64 - ego_lane as f64) * w;
            let speed = uniform(&mut rng, cfg.agent_speed_min, cfg.agent_speed_max);
            let s0 = uniform(&mut rng, -cfg.range_backward, cfg.range_forward);
            let length = uniform(&mut rng, cfg.agent_length_min, cfg.agent_length_max);
            let width = uniform(&mut rng, cfg.agent_width_min, cfg.agent_width_max);
            let jitter: Vec<[f64; 2]> = (0..steps)
                .map(|_| [noise.sample(&mut rng), noise.sample(&mut rng)])
                .collect();

            let motion = LaneMotion {
                lane,
                s: (0..steps)
                    .map(|i| s0 + arc.reference_advance(speed * time(i), offset))
                    .collect(),
            };
            if !gap_ok(&motion, &ego_motion) || !placed.iter().all(|p| gap_ok(&motion, p)) {
                continue;
            }
            let poses: Vec<[f64; 3]> = motion
                .s
                .iter()
                .zip(&jitter)
                .map(|(&s, j)| {
                    let p = arc.point(s, offset);
                    [p[0] + j[0], p[1] + j[1], arc.heading(s)]
                })
                .collect();
            if !poses.iter().all(|p| cfg.in_range([p[0], p[1]])) {
                continue;
            }
            agents.push(AgentTrack {
                footprint: [length, width],
                history: poses[..h].to_vec(),
                future: poses[h..].to_vec(),
            });
            placed.push(motion);
            break;
        }
    }

    VectorScene {
        seed,
        command,
        map_elements,
        agents,
        ego_future,
    }
}

pub fn generate_scenes(
    seeds: impl IntoIterator<Item = u64>,
    cfg: &SceneGenConfig,
) -> Vec<VectorScene> {
    seeds.into_iter().map(|s| generate_scene(s, cfg)).collect()
}

fn heading_of(a: Point<f64>, b: Point<f64>) -> f64 {
    (b[1] - a[1]).atan2(b[0] - a[0])
}

/// Checks every structural invariant of a scene against `cfg`.
pub fn validate_scene(scene: &VectorScene, cfg: &SceneGenConfig) -> Result<()> {
    let fail = |m: String| Err(Error::Input(format!("scene {}: {m}", scene.seed)));
    let finite = |p: &[f64]| p.iter().all(|v| v.is_finite());

    for (i, line) in scene.map_elements.iter().enumerate() {
        if line.points.len() < 2 {
            return fail(format!("map element {i} has fewer than 2 points"));
        }
        if !line.points.iter().all(|p| finite(p) && cfg.in_range(*p)) {
            return fail(format!("map element {i} leaves the perception range"));
        }
        if line
            .points
            .windows(2)
            .any(|w| dist(w[0], w[1]) <= MIN_VERTEX_GAP)
        {
            return fail(format!("map element {i} repeats a vertex"));
        }
    }

    if scene.agents.len() > cfg.agent_count_max {
        return fail(format!(
            "{} agents exceed the maximum {}",
            scene.agents.len(),
            cfg.agent_count_max
        ));
    }
    for (i, a) in scene.agents.iter().enumerate() {
        if a.history.len() != cfg.history_steps || a.future.len() != cfg.future_steps {
            return fail(format!("agent {i} has the wrong track length"));
        }
        if !a.history.iter().chain(&a.future).all(|p| finite(p)) || !finite(&a.footprint) {
            return fail(format!("agent {i} has a non-finite value"));
        }
        let track: Vec<&[f64; 3]> = std::iter::once(a.history.last().unwrap())
            .chain(&a.future)
            .collect();
        for w in track.windows(2) {
            let speed = dist([w[0][0], w[0][1]], [w[1][0], w[1][1]]) / cfg.timestep;
            if speed > MAX_AGENT_SPEED {
                return fail(format!("agent {i} moves at {speed:.1} m/s"));
            }
        }
    }

    let ego = &scene.ego_future;
    if ego.len() != cfg.future_steps || !ego.iter().all(|p| finite(p)) {
        return fail("ego plan has the wrong length".into());
    }
    let start = [2.0 * ego[0][0] - ego[1][0], 2.0 * ego[0][1] - ego[1][1]];
    if dist(start, [0.0, 0.0]) > EGO_START_TOLERANCE {
        return fail("ego plan does not start at the origin".into());
    }
    let n = ego.len();
    let change = heading_of(ego[n - 2], ego[n - 1]);
    let consistent = match scene.command {
        Command::Straight => change.abs() < STRAIGHT_HEADING_LIMIT,
        Command::Left => change > 0.0,
        Command::Right => change < 0.0,
    };
    if !consistent {
        return fail(format!(
            "heading change {change:.3} rad contradicts command {:?}",
            scene.command
        ));
    }
    Ok(())
}
