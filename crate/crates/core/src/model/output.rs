use serde::{Deserialize, Serialize};

use super::ForwardVars;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::query::ModelConfig;
use crate::scalar::Scalar;

/// Decoded predictions for one scene, in meters where applicable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput<T> {
    /// `[M_I][M_P]` points.
    pub map_points: Vec<Vec<[T; 2]>>,
    /// `[M_I][classes + 1]`, last column is no-object.
    pub map_class_logits: Vec<Vec<T>>,
    /// `[n_agents][N_I][N_P]` points.
    pub agent_trajectories: Vec<Vec<Vec<[T; 2]>>>,
    /// `[n_agents][N_I]`.
    pub agent_mode_logits: Vec<Vec<T>>,
    /// `[N_O]`.
    pub agent_existence_logits: Vec<T>,
    /// `[K_I][K_P]` points.
    pub ego_trajectories: Vec<Vec<[T; 2]>>,
    /// `[K_I]`.
    pub ego_mode_logits: Vec<T>,
}

fn points<T: Scalar>(flat: &[T], groups: usize, per: usize) -> Vec<Vec<[T; 2]>> {
    (0..groups)
        .map(|g| {
            (0..per)
                .map(|i| [flat[(g * per + i) * 2], flat[(g * per + i) * 2 + 1]])
                .collect()
        })
        .collect()
}

impl<T: Scalar> ModelOutput<T> {
    /// Reads scene `scene` of a batched forward.
    pub fn from_tape(
        tape: &Tape<T>,
        vars: &ForwardVars,
        cfg: &ModelConfig,
        scene: usize,
        n_agents: usize,
    ) -> Result<Self> {
        if scene >= vars.batch {
            return Err(Error::Input(format!(
                "scene {scene} outside batch of {}",
                vars.batch
            )));
        }
        // rows of one scene out of `vars.batch` equal blocks
        let val = |v| {
            let data = tape.value(v).data();
            let per = data.len() / vars.batch;
            &data[scene * per..(scene + 1) * per]
        };
        let traj = val(vars.prediction.trajectories);
        let modes = val(vars.prediction.mode_logits);
        let out = Self {
            map_points: points(val(vars.perception.points), cfg.m_i, cfg.m_p),
            map_class_logits: val(vars.perception.class_logits)
                .chunks(cfg.n_classes + 1)
                .map(<[T]>::to_vec)
                .collect(),
            agent_trajectories: (0..n_agents)
                .map(|a| points(&traj[a * cfg.n_i * cfg.n_p * 2..], cfg.n_i, cfg.n_p))
                .collect(),
            agent_mode_logits: (0..n_agents)
                .map(|a| modes[a * cfg.n_i..(a + 1) * cfg.n_i].to_vec())
                .collect(),
            agent_existence_logits: val(vars.prediction.existence_logits).to_vec(),
            ego_trajectories: points(val(vars.planning.trajectories), cfg.k_i, cfg.k_p),
            ego_mode_logits: val(vars.planning.mode_logits).to_vec(),
        };
        if !out.all_finite() {
            return Err(Error::NonFinite {
                what: "model output".into(),
            });
        }
        Ok(out)
    }

    pub fn to_f64(&self) -> ModelOutput<f64> {
        let pts = |v: &Vec<[T; 2]>| {
            v.iter()
                .map(|p| [p[0].as_f64(), p[1].as_f64()])
                .collect::<Vec<_>>()
        };
        let vals = |v: &Vec<T>| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        ModelOutput {
            map_points: self.map_points.iter().map(pts).collect(),
            map_class_logits: self.map_class_logits.iter().map(vals).collect(),
            agent_trajectories: self
                .agent_trajectories
                .iter()
                .map(|a| a.iter().map(pts).collect())
                .collect(),
            agent_mode_logits: self.agent_mode_logits.iter().map(vals).collect(),
            agent_existence_logits: vals(&self.agent_existence_logits),
            ego_trajectories: self.ego_trajectories.iter().map(pts).collect(),
            ego_mode_logits: vals(&self.ego_mode_logits),
        }
    }

    pub fn all_finite(&self) -> bool {
        let pts = |v: &Vec<[T; 2]>| v.iter().all(|p| p[0].is_finite() && p[1].is_finite());
        let vals = |v: &Vec<T>| v.iter().all(|x| x.is_finite());
        self.map_points.iter().all(pts)
            && self.map_class_logits.iter().all(vals)
            && self.agent_trajectories.iter().flatten().all(pts)
            && self.agent_mode_logits.iter().all(vals)
            && vals(&self.agent_existence_logits)
            && self.ego_trajectories.iter().all(pts)
            && vals(&self.ego_mode_logits)
    }

    /// Shapes in declaration order: map points, map logits, agent
    /// trajectories, agent mode logits, existence, ego trajectories, ego
    /// mode logits.
    pub fn shapes(&self) -> [Vec<usize>; 7] {
        let inner = |v: &Vec<Vec<[T; 2]>>| v.first().map_or(0, Vec::len);
        let n = self.agent_trajectories.len();
        [
            vec![self.map_points.len(), inner(&self.map_points), 2],
            vec![
                self.map_class_logits.len(),
                self.map_class_logits.first().map_or(0, Vec::len),
            ],
            vec![
                n,
                self.agent_trajectories.first().map_or(0, Vec::len),
                self.agent_trajectories.first().map_or(0, inner),
                2,
            ],
            vec![n, self.agent_mode_logits.first().map_or(0, Vec::len)],
            vec![self.agent_existence_logits.len()],
            vec![
                self.ego_trajectories.len(),
                inner(&self.ego_trajectories),
                2,
            ],
            vec![self.ego_mode_logits.len()],
        ]
    }
}
