use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian, MatchResult};
use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{resample_polyline, Point};
use crate::model::{ForwardVars, PerceptionVars, PlanningVars, PredictionVars};
use crate::query::ModelConfig;
use crate::scalar::Scalar;
use crate::scene::VectorScene;

/// Weight of `1 - p(gt class)` in the map matching cost, next to the mean
/// point L1 distance in meters.
pub const MATCH_CLASS_COST: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_map_pts: f64,
    pub w_map_cls: f64,
    pub w_map_dir: f64,
    pub w_pred_pts: f64,
    /// Also weights the agent existence term.
    pub w_pred_cls: f64,
    pub w_plan_pts: f64,
    pub w_plan_dir: f64,
    pub w_plan_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_map_pts: 1.0,
            w_map_cls: 0.5,
            w_map_dir: 1.0,
            w_pred_pts: 1.0,
            w_pred_cls: 0.5,
            w_plan_pts: 1.0,
            w_plan_dir: 1.0,
            w_plan_cls: 0.5,
        }
    }
}

impl LossWeights {
    fn all(&self) -> [f64; 8] {
        [
            self.w_map_pts,
            self.w_map_cls,
            self.w_map_dir,
            self.w_pred_pts,
            self.w_pred_cls,
            self.w_plan_pts,
            self.w_plan_dir,
            self.w_plan_cls,
        ]
    }

    pub fn zero() -> Self {
        Self::from_array([0.0; 8])
    }

    fn from_array(w: [f64; 8]) -> Self {
        Self {
            w_map_pts: w[0],
            w_map_cls: w[1],
            w_map_dir: w[2],
            w_pred_pts: w[3],
            w_pred_cls: w[4],
            w_plan_pts: w[5],
            w_plan_dir: w[6],
            w_plan_cls: w[7],
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self::from_array(self.all().map(|w| w * f))
    }

    pub fn plus(&self, other: &Self) -> Self {
        let (a, b) = (self.all(), other.all());
        Self::from_array(std::array::from_fn(|i| a[i] + b[i]))
    }

    /// Nonnegative and finite, at least one positive.
    pub fn validate(&self) -> Result<()> {
        if self.all().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if self.all().iter().all(|&w| w == 0.0) {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted loss terms of one scene (or their means over an epoch).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub map_pts: f64,
    pub map_cls: f64,
    pub map_dir: f64,
    pub pred_pts: f64,
    pub pred_cls: f64,
    pub pred_exist: f64,
    pub plan_pts: f64,
    pub plan_dir: f64,
    pub plan_cls: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 9] = [
        "map_pts",
        "map_cls",
        "map_dir",
        "pred_pts",
        "pred_cls",
        "pred_exist",
        "plan_pts",
        "plan_dir",
        "plan_cls",
    ];

    pub fn terms(&self) -> [f64; 9] {
        [
            self.map_pts,
            self.map_cls,
            self.map_dir,
            self.pred_pts,
            self.pred_cls,
            self.pred_exist,
            self.plan_pts,
            self.plan_dir,
            self.plan_cls,
        ]
    }

    pub fn from_terms(t: [f64; 9]) -> Self {
        Self {
            map_pts: t[0],
            map_cls: t[1],
            map_dir: t[2],
            pred_pts: t[3],
            pred_cls: t[4],
            pred_exist: t[5],
            plan_pts: t[6],
            plan_dir: t[7],
            plan_cls: t[8],
        }
    }

    pub fn map(&self) -> f64 {
        self.map_pts + self.map_cls + self.map_dir
    }

    pub fn prediction(&self) -> f64 {
        self.pred_pts + self.pred_cls + self.pred_exist
    }

    pub fn planning(&self) -> f64 {
        self.plan_pts + self.plan_dir + self.plan_cls
    }

    pub fn total(&self) -> f64 {
        self.map() + self.prediction() + self.planning()
    }
}

/// Ground truth of one scene laid out like the model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTargets {
    /// Class index and `M_P` arc-length resampled points per map element.
    pub map: Vec<(usize, Vec<Point<f64>>)>,
    /// Last observed position per agent.
    pub agent_positions: Vec<Point<f64>>,
    /// `N_P` future positions per agent.
    pub agent_futures: Vec<Vec<Point<f64>>>,
    /// Anchor of each of the `N_O` agent slots; the origin when empty.
    pub slot_anchors: Vec<Point<f64>>,
    /// `K_P` future ego positions.
    pub ego_future: Vec<Point<f64>>,
    pub command: usize,
}

impl SceneTargets {
    /// Requires scene futures of exactly `N_P` and `K_P` steps.
    pub fn new(scene: &VectorScene, cfg: &ModelConfig) -> Result<Self> {
        if scene.ego_future.len() != cfg.k_p {
            return Err(Error::Config(format!(
                "ego future has {} steps but K_P is {}",
                scene.ego_future.len(),
                cfg.k_p
            )));
        }
        if let Some(a) = scene.agents.iter().find(|a| a.future.len() != cfg.n_p) {
            return Err(Error::Config(format!(
                "agent future has {} steps but N_P is {}",
                a.future.len(),
                cfg.n_p
            )));
        }
        if scene.agents.len() > cfg.n_o {
            return Err(Error::Input(format!(
                "scene {} has {} agents for {} agent queries",
                scene.seed,
                scene.agents.len(),
                cfg.n_o
            )));
        }
        let agent_positions: Vec<_> = scene.agents.iter().map(|a| a.current_position()).collect();
        let mut slot_anchors = agent_positions.clone();
        slot_anchors.resize(cfg.n_o, [0.0, 0.0]);
        Ok(Self {
            map: scene
                .map_elements
                .iter()
                .map(|e| (e.class.index(), resample_polyline(&e.points, cfg.m_p)))
                .collect(),
            agent_futures: scene
                .agents
                .iter()
                .map(|a| a.future.iter().map(|f| [f[0], f[1]]).collect())
                .collect(),
            agent_positions,
            slot_anchors,
            ego_future: scene.ego_future.clone(),
            command: scene.command.index(),
        })
    }
}

/// Mean over points of the per-point L1 distance `|dx| + |dy|`.
pub fn mean_point_l1<T: Scalar>(a: &[Point<T>], b: &[Point<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p[0].as_f64() - q[0]).abs() + (p[1].as_f64() - q[1]).abs())
        .sum();
    total / a.len() as f64
}

fn edge_term<T: Scalar>(a: [T; 2], b: [T; 2]) -> Option<(T, T, T)> {
    let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
    if na == T::zero() || nb == T::zero() {
        return None;
    }
    let cos = if a == b {
        T::one()
    } else {
        ((a[0] * b[0] + a[1] * b[1]) / (na * nb))
            .max(-T::one())
            .min(T::one())
    };
    Some((cos, na, nb))
}

/// Mean over consecutive edges of `1 - cos(pred edge, gt edge)`; edges of
/// zero length on either side contribute 0.
pub fn direction_loss<T: Scalar>(pred: &[Point<T>], gt: &[Point<T>]) -> T {
    assert!(pred.len() >= 2 && pred.len() == gt.len());
    let edges = pred.len() - 1;
    let total: T = (0..edges)
        .filter_map(|i| {
            let a = [pred[i + 1][0] - pred[i][0], pred[i + 1][1] - pred[i][1]];
            let b = [gt[i + 1][0] - gt[i][0], gt[i + 1][1] - gt[i][1]];
            edge_term(a, b).map(|(cos, _, _)| T::one() - cos)
        })
        .sum();
    total / T::lit(edges as f64)
}

/// Mean of `direction_loss` over consecutive groups of `points` rows.
struct DirectionLossOp<T> {
    gt: Vec<Point<T>>,
    points: usize,
}

impl<T: Scalar> CustomOp<T> for DirectionLossOp<T> {
    fn name(&self) -> &'static str {
        "direction_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let pred = inputs[0].data();
        let groups = self.gt.len() / self.points;
        let scale = grad_output.item() / T::lit((groups * (self.points - 1)) as f64);
        let mut grad = vec![T::zero(); pred.len()];
        for g in 0..groups {
            for i in g * self.points..(g + 1) * self.points - 1 {
                let a = [
                    pred[2 * i + 2] - pred[2 * i],
                    pred[2 * i + 3] - pred[2 * i + 1],
                ];
                let gt = &self.gt;
                let b = [gt[i + 1][0] - gt[i][0], gt[i + 1][1] - gt[i][1]];
                let Some((cos, na, nb)) = edge_term(a, b) else {
                    continue;
                };
                // d(1 - cos)/da = -(b / (|a||b|) - cos a / |a|^2)
                for c in 0..2 {
                    let d = -(b[c] / (na * nb) - cos * a[c] / (na * na)) * scale;
                    grad[2 * i + 2 + c] += d;
                    grad[2 * i + c] -= d;
                }
            }
        }
        vec![Some(
            Tensor::new(inputs[0].shape().to_vec(), grad).expect("same shape"),
        )]
    }
}

/// Tape version of `direction_loss` averaged over groups of `points`
/// consecutive rows of `pred [k * points, 2]`.
pub fn direction_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Vec<Point<T>>,
    points: usize,
) -> Result<Var> {
    let tp = tape.value(pred);
    if tp.shape() != [gt.len(), 2] || points < 2 || !gt.len().is_multiple_of(points) {
        return Err(Error::shape("direction_loss", tp.shape(), &[gt.len(), 2]));
    }
    let flat: Vec<Point<T>> = tp.data().chunks(2).map(|c| [c[0], c[1]]).collect();
    let groups = gt.len() / points;
    let total: T = (0..groups)
        .map(|g| {
            direction_loss(
                &flat[g * points..(g + 1) * points],
                &gt[g * points..(g + 1) * points],
            )
        })
        .sum();
    let value = Tensor::scalar(total / T::lit(groups as f64));
    Ok(tape.custom(&[pred], value, Box::new(DirectionLossOp { gt, points })))
}

fn softmax_prob<T: Scalar>(logits: &[T], class: usize) -> f64 {
    let max = logits
        .iter()
        .map(|l| l.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l.as_f64() - max).exp()).sum();
    (logits[class].as_f64() - max).exp() / z
}

/// Matches predicted map instances (`points [M_I * M_P]`, `class_logits
/// [M_I * (classes + 1)]`) to ground truth elements.
pub fn match_map<T: Scalar>(
    points: &[Point<T>],
    class_logits: &[T],
    gt: &[(usize, Vec<Point<f64>>)],
    m_p: usize,
) -> Result<MatchResult> {
    let m_i = points.len() / m_p;
    let width = class_logits.len() / m_i;
    let mut reversed = vec![vec![false; gt.len()]; m_i];
    let mut cost = vec![vec![0.0; gt.len()]; m_i];
    for i in 0..m_i {
        let pred = &points[i * m_p..(i + 1) * m_p];
        let logits = &class_logits[i * width..(i + 1) * width];
        for (g, (class, line)) in gt.iter().enumerate() {
            let fwd = mean_point_l1(pred, line);
            let rev_line: Vec<_> = line.iter().rev().copied().collect();
            let rev = mean_point_l1(pred, &rev_line);
            reversed[i][g] = rev < fwd;
            cost[i][g] = fwd.min(rev) + MATCH_CLASS_COST * (1.0 - softmax_prob(logits, *class));
        }
    }
    let mut result = hungarian(&cost)?;
    result.reversed = result.pairs.iter().map(|&(i, g)| reversed[i][g]).collect();
    Ok(result)
}

fn rows_of(scene: usize, per_scene: usize, rows: impl IntoIterator<Item = usize>) -> Vec<usize> {
    rows.into_iter().map(|r| scene * per_scene + r).collect()
}

fn points_of<T: Scalar>(data: &[T]) -> Vec<Point<T>> {
    data.chunks(2).map(|c| [c[0], c[1]]).collect()
}

fn constant_points<T: Scalar>(tape: &mut Tape<T>, pts: &[Point<f64>]) -> Result<Var> {
    let flat = pts
        .iter()
        .flat_map(|p| [T::lit(p[0]), T::lit(p[1])])
        .collect();
    Ok(tape.constant(Tensor::new(vec![pts.len(), 2], flat)?))
}

/// `weight * term`, recording the weighted value.
fn weighted<T: Scalar>(tape: &mut Tape<T>, term: Option<Var>, weight: f64, log: &mut f64) -> Var {
    let v = match term {
        Some(t) => tape.scale(t, T::lit(weight)),
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    *log = tape.value(v).item().as_f64();
    v
}

/// Mean point L1 between `pred [k, 2]` and `target`, on the tape.
fn point_l1<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &[Point<f64>]) -> Result<Var> {
    let t = constant_points(tape, target)?;
    let l1 = tape.l1_loss(pred, t)?;
    // l1_loss averages over coordinates; the point distance sums them
    Ok(tape.scale(l1, T::lit(2.0)))
}

/// Map loss of scene `scene` in a batched forward. `fixed` replaces the
/// matching computed from the current predictions.
#[allow(clippy::too_many_arguments)]
pub fn map_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &PerceptionVars,
    scene: usize,
    targets: &SceneTargets,
    weights: &LossWeights,
    cfg: &ModelConfig,
    log: &mut LossBreakdown,
    fixed: Option<&MatchResult>,
) -> Result<(Var, MatchResult)> {
    let (m_i, m_p, width) = (cfg.m_i, cfg.m_p, cfg.n_classes + 1);
    let matching = match fixed {
        Some(m) => m.clone(),
        None => {
            let pts_all = tape.value(vars.points).data();
            let pts = points_of(&pts_all[scene * m_i * m_p * 2..(scene + 1) * m_i * m_p * 2]);
            let logits = &tape.value(vars.class_logits).data()
                [scene * m_i * width..(scene + 1) * m_i * width];
            match_map(&pts, logits, &targets.map, m_p)?
        }
    };

    let mut oriented = Vec::with_capacity(matching.pairs.len() * m_p);
    let mut rows = Vec::with_capacity(matching.pairs.len() * m_p);
    for (&(i, g), &rev) in matching.pairs.iter().zip(&matching.reversed) {
        let line = &targets.map[g].1;
        if rev {
            oriented.extend(line.iter().rev());
        } else {
            oriented.extend(line.iter());
        }
        rows.extend(rows_of(scene, m_i * m_p, i * m_p..(i + 1) * m_p));
    }
    let (pts_term, dir_term) = if rows.is_empty() {
        (None, None)
    } else {
        let pred = tape.gather_rows(vars.points, rows)?;
        let l1 = point_l1(tape, pred, &oriented)?;
        let gt = oriented
            .iter()
            .map(|p| [T::lit(p[0]), T::lit(p[1])])
            .collect();
        (Some(l1), Some(direction_loss_on_tape(tape, pred, gt, m_p)?))
    };
    let mut classes = vec![cfg.n_classes; m_i];
    for &(i, g) in &matching.pairs {
        classes[i] = targets.map[g].0;
    }
    let logits = tape.gather_rows(vars.class_logits, rows_of(scene, m_i, 0..m_i))?;
    let ce = tape.cross_entropy(logits, &classes)?;

    let a = weighted(tape, pts_term, weights.w_map_pts, &mut log.map_pts);
    let b = weighted(tape, Some(ce), weights.w_map_cls, &mut log.map_cls);
    let c = weighted(tape, dir_term, weights.w_map_dir, &mut log.map_dir);
    Ok((tape.add_all(&[a, b, c])?, matching))
}

/// Winner-take-all motion loss plus existence of scene `scene`. Returns the
/// slot matching and the winning mode per matched agent; `fixed_winners`
/// replaces the winners computed from the current predictions.
#[allow(clippy::too_many_arguments)]
pub fn prediction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &PredictionVars,
    scene: usize,
    targets: &SceneTargets,
    weights: &LossWeights,
    cfg: &ModelConfig,
    log: &mut LossBreakdown,
    fixed_winners: Option<&[usize]>,
) -> Result<(Var, MatchResult, Vec<usize>)> {
    let (n_o, n_i, n_p) = (cfg.n_o, cfg.n_i, cfg.n_p);
    let per_slot = n_i * n_p;
    let cost: Vec<Vec<f64>> = targets
        .agent_positions
        .iter()
        .map(|p| {
            targets
                .slot_anchors
                .iter()
                .map(|a| mean_point_l1(&[*a], &[*p]))
                .collect()
        })
        .collect();
    let matching = hungarian(&cost)?;

    let traj = tape.value(vars.trajectories).data();
    let traj = points_of(&traj[scene * n_o * per_slot * 2..(scene + 1) * n_o * per_slot * 2]);
    let mut rows = Vec::new();
    let mut logit_rows = Vec::new();
    let mut winners = Vec::new();
    let mut future = Vec::new();
    let mut exists = vec![T::zero(); n_o];
    for (k, &(agent, slot)) in matching.pairs.iter().enumerate() {
        let gt = &targets.agent_futures[agent];
        let best = match fixed_winners {
            Some(w) => w[k],
            None => {
                let errors: Vec<f64> = (0..n_i)
                    .map(|m| {
                        let start = slot * per_slot + m * n_p;
                        mean_point_l1(&traj[start..start + n_p], gt)
                    })
                    .collect();
                winning_mode(&errors)
            }
        };
        winners.push(best);
        let start = slot * per_slot + best * n_p;
        rows.extend(rows_of(scene, n_o * per_slot, start..start + n_p));
        logit_rows.extend(rows_of(scene, n_o * n_i, slot * n_i..(slot + 1) * n_i));
        future.extend(gt.iter().copied());
        exists[slot] = T::one();
    }
    let (pts_term, cls_term) = if rows.is_empty() {
        (None, None)
    } else {
        let pred = tape.gather_rows(vars.trajectories, rows)?;
        let l1 = point_l1(tape, pred, &future)?;
        let logits = tape.gather_rows(vars.mode_logits, logit_rows)?;
        let logits = tape.reshape(logits, [winners.len(), n_i])?;
        (Some(l1), Some(tape.cross_entropy(logits, &winners)?))
    };
    let ex_logits = tape.gather_rows(vars.existence_logits, rows_of(scene, n_o, 0..n_o))?;
    let bce = tape.bce_with_logits(ex_logits, &exists)?;

    let a = weighted(tape, pts_term, weights.w_pred_pts, &mut log.pred_pts);
    let b = weighted(tape, cls_term, weights.w_pred_cls, &mut log.pred_cls);
    let c = weighted(tape, Some(bce), weights.w_pred_cls, &mut log.pred_exist);
    Ok((tape.add_all(&[a, b, c])?, matching, winners))
}

/// Lowest error, first index on ties.
pub fn winning_mode(errors: &[f64]) -> usize {
    errors
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |(bi, be), (i, &e)| if e < be { (i, e) } else { (bi, be) },
        )
        .0
}

/// Ego mode selected by a command index.
pub fn commanded_mode(command: usize, k_i: usize) -> usize {
    command % k_i
}

/// Loss of the commanded ego mode of scene `scene`.
pub fn planning_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &PlanningVars,
    scene: usize,
    targets: &SceneTargets,
    weights: &LossWeights,
    cfg: &ModelConfig,
    log: &mut LossBreakdown,
) -> Result<Var> {
    let (k_i, k_p) = (cfg.k_i, cfg.k_p);
    let mode = commanded_mode(targets.command, k_i);
    let pred = tape.gather_rows(
        vars.trajectories,
        rows_of(scene, k_i * k_p, mode * k_p..(mode + 1) * k_p),
    )?;
    let l1 = point_l1(tape, pred, &targets.ego_future)?;
    let gt = targets
        .ego_future
        .iter()
        .map(|p| [T::lit(p[0]), T::lit(p[1])])
        .collect();
    let dir = direction_loss_on_tape(tape, pred, gt, k_p)?;
    let logits = tape.gather_rows(vars.mode_logits, rows_of(scene, k_i, 0..k_i))?;
    let logits = tape.reshape(logits, [1, k_i])?;
    let ce = tape.cross_entropy(logits, &[mode])?;

    let a = weighted(tape, Some(l1), weights.w_plan_pts, &mut log.plan_pts);
    let b = weighted(tape, Some(dir), weights.w_plan_dir, &mut log.plan_dir);
    let c = weighted(tape, Some(ce), weights.w_plan_cls, &mut log.plan_cls);
    tape.add_all(&[a, b, c])
}

/// The discrete decisions inside the loss: map matching with orientation
/// and the winning mode of each matched agent.
#[derive(Clone, Debug, PartialEq)]
pub struct LossChoices {
    pub map: MatchResult,
    pub winners: Vec<usize>,
}

/// Sum of the three module losses of scene `scene`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ForwardVars,
    scene: usize,
    targets: &SceneTargets,
    weights: &LossWeights,
    cfg: &ModelConfig,
) -> Result<(Var, LossBreakdown)> {
    let (loss, log, _) = total_loss_with(tape, vars, scene, targets, weights, cfg, None)?;
    Ok((loss, log))
}

/// [`total_loss`] with the discrete decisions optionally held at `fixed`;
/// also returns the decisions used. The loss is differentiable in the
/// network outputs once these are held fixed.
pub fn total_loss_with<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ForwardVars,
    scene: usize,
    targets: &SceneTargets,
    weights: &LossWeights,
    cfg: &ModelConfig,
    fixed: Option<&LossChoices>,
) -> Result<(Var, LossBreakdown, LossChoices)> {
    let mut log = LossBreakdown::default();
    let (map, matching) = map_loss(
        tape,
        &vars.perception,
        scene,
        targets,
        weights,
        cfg,
        &mut log,
        fixed.map(|c| &c.map),
    )?;
    let (pred, _, winners) = prediction_loss(
        tape,
        &vars.prediction,
        scene,
        targets,
        weights,
        cfg,
        &mut log,
        fixed.map(|c| c.winners.as_slice()),
    )?;
    let plan = planning_loss(tape, &vars.planning, scene, targets, weights, cfg, &mut log)?;
    let total = tape.add_all(&[map, pred, plan])?;
    Ok((
        total,
        log,
        LossChoices {
            map: matching,
            winners,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_loss_cases() {
        let gt = [[0.0f64, 0.0], [1.0, 0.0], [2.0, 1.0]];
        assert_eq!(direction_loss(&gt, &gt), 0.0);
        let back: Vec<_> = gt.iter().map(|p| [-p[0], -p[1]]).collect();
        assert!((direction_loss(&back, &gt) - 2.0).abs() < 1e-12);
        // a zero-length ground-truth edge contributes nothing
        let flat = [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]];
        assert_eq!(
            direction_loss(&[[0.0, 0.0], [0.0, 1.0], [1.0, 1.0]], &flat),
            0.0
        );
    }

    #[test]
    fn weights_validation() {
        LossWeights::default().validate().unwrap();
        assert!(LossWeights::zero().validate().is_err());
        let mut w = LossWeights::zero();
        w.w_plan_pts = -1.0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn winner_ties_take_the_first() {
        assert_eq!(winning_mode(&[3.0, 1.0, 1.0]), 1);
        assert_eq!(commanded_mode(2, 3), 2);
        assert_eq!(commanded_mode(2, 2), 0);
    }
}
