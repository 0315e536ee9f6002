use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::map::{detections, MapAccumulator};
use super::metrics::{
    collision_flags, collision_rate, displacement_error, Horizons, EGO_LENGTH, EGO_WIDTH,
};
use crate::error::{Error, Result};
use crate::geometry::dist;
use crate::model::{InvDriver, ModelOutput};
use crate::query::ModelConfig;
use crate::scalar::Scalar;
use crate::scene::{file_sha256, read_dataset, MapClass, SceneGenConfig, VectorScene};
use crate::train::{commanded_mode, SceneTargets, TrainConfig, Trainer};

/// Logit magnitude the pass-through oracle uses for certain decisions.
const ORACLE_LOGIT: f64 = 20.0;

pub const FPS_NOTE: &str = "scenes/s on the local CPU; not comparable to GPU frame rates";

/// Anything that maps a scene to decoded predictions.
pub trait Predictor {
    fn config(&self) -> &ModelConfig;
    fn predict(&self, scene: &VectorScene, scene_cfg: &SceneGenConfig) -> Result<ModelOutput<f64>>;
}

impl<T: Scalar> Predictor for InvDriver<T> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn predict(&self, scene: &VectorScene, scene_cfg: &SceneGenConfig) -> Result<ModelOutput<f64>> {
        Ok(self.full_forward(scene, scene_cfg)?.to_f64())
    }
}

/// Emits the ground truth in model-output form: every ego and agent mode
/// is the true future, map slots hold the resampled true elements with
/// confident classes, and existence is certain for present agents.
#[derive(Clone, Debug)]
pub struct GtPassThrough {
    pub cfg: ModelConfig,
}

impl Predictor for GtPassThrough {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn predict(&self, scene: &VectorScene, _: &SceneGenConfig) -> Result<ModelOutput<f64>> {
        let cfg = &self.cfg;
        let t = SceneTargets::new(scene, cfg)?;
        let one_hot = |hot: usize| {
            (0..=cfg.n_classes)
                .map(|c| {
                    if c == hot {
                        ORACLE_LOGIT
                    } else {
                        -ORACLE_LOGIT
                    }
                })
                .collect()
        };
        let (mut map_points, mut map_class_logits) = (Vec::new(), Vec::new());
        for slot in 0..cfg.m_i {
            match t.map.get(slot) {
                Some((class, pts)) => {
                    map_points.push(pts.clone());
                    map_class_logits.push(one_hot(*class));
                }
                None => {
                    map_points.push(vec![[0.0, 0.0]; cfg.m_p]);
                    map_class_logits.push(one_hot(cfg.n_classes));
                }
            }
        }
        let n = t.agent_futures.len();
        Ok(ModelOutput {
            map_points,
            map_class_logits,
            agent_trajectories: t
                .agent_futures
                .iter()
                .map(|f| vec![f.clone(); cfg.n_i])
                .collect(),
            agent_mode_logits: vec![vec![0.0; cfg.n_i]; n],
            agent_existence_logits: (0..cfg.n_o)
                .map(|s| if s < n { ORACLE_LOGIT } else { -ORACLE_LOGIT })
                .collect(),
            ego_trajectories: vec![t.ego_future.clone(); cfg.k_i],
            ego_mode_logits: vec![0.0; cfg.k_i],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenes: usize,
    /// L2 displacement error of the commanded ego mode (m).
    pub de: Horizons,
    /// Fraction of scenes with an ego-agent overlap up to each horizon.
    pub cr: Horizons,
    pub map_chamfer: Option<f64>,
    pub map_ap: Option<f64>,
    /// Agent slots whose existence probability reached 0.5.
    pub agents_selected: usize,
    /// Fraction of agent slots whose existence decision is correct.
    pub existence_accuracy: f64,
    /// Best-mode mean L2 error over present agents that were selected.
    pub agent_min_ade: Option<f64>,
}

/// Model sizes must agree with the dataset's trajectory lengths, agent
/// counts and classes.
pub fn check_compatible(cfg: &ModelConfig, scene_cfg: &SceneGenConfig) -> Result<()> {
    let mut problems = Vec::new();
    if cfg.k_p != scene_cfg.future_steps {
        problems.push(format!(
            "K_P {} vs future_steps {}",
            cfg.k_p, scene_cfg.future_steps
        ));
    }
    if cfg.n_p != scene_cfg.future_steps {
        problems.push(format!(
            "N_P {} vs future_steps {}",
            cfg.n_p, scene_cfg.future_steps
        ));
    }
    if cfg.n_o < scene_cfg.agent_count_max {
        problems.push(format!(
            "N_O {} vs agent_count_max {}",
            cfg.n_o, scene_cfg.agent_count_max
        ));
    }
    if cfg.n_classes != MapClass::ALL.len() {
        problems.push(format!(
            "n_classes {} vs {} map classes",
            cfg.n_classes,
            MapClass::ALL.len()
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Mismatch(format!(
            "model config does not fit the dataset: {}",
            problems.join(", ")
        )))
    }
}

/// Scores `predictor` on `scenes` in order.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    scenes: &[VectorScene],
    scene_cfg: &SceneGenConfig,
) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::Input("evaluation needs at least one scene".into()));
    }
    let cfg = predictor.config();
    check_compatible(cfg, scene_cfg)?;
    let mut de_rows = Vec::with_capacity(scenes.len());
    let mut cr_rows = Vec::with_capacity(scenes.len());
    let mut map = MapAccumulator::new(cfg.n_classes);
    let (mut selected, mut correct, mut slots) = (0, 0, 0);
    let (mut ade_sum, mut ade_count) = (0.0, 0);
    for scene in scenes {
        let out = predictor.predict(scene, scene_cfg)?;
        let ego = &out.ego_trajectories[commanded_mode(scene.command.index(), cfg.k_i)];
        de_rows.push(displacement_error(ego, &scene.ego_future)?.values());
        cr_rows.push(collision_flags(ego, &scene.agents)?.map(|c| if c { 1.0 } else { 0.0 }));
        map.add_scene(
            &detections(&out.map_points, &out.map_class_logits),
            &scene.map_elements,
        );

        for (slot, &logit) in out.agent_existence_logits.iter().enumerate() {
            let (present, chosen) = (slot < scene.agents.len(), logit >= 0.0);
            slots += 1;
            selected += usize::from(chosen);
            correct += usize::from(present == chosen);
            if present && chosen {
                let truth = &scene.agents[slot].future;
                let best = out.agent_trajectories[slot]
                    .iter()
                    .map(|mode| {
                        mode.iter()
                            .zip(truth)
                            .map(|(p, f)| dist(*p, [f[0], f[1]]))
                            .sum::<f64>()
                            / truth.len() as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                ade_sum += best;
                ade_count += 1;
            }
        }
    }
    Ok(MetricsReport {
        scenes: scenes.len(),
        de: Horizons::mean_of(&de_rows),
        cr: Horizons::mean_of(&cr_rows),
        map_chamfer: map.chamfer(),
        map_ap: map.ap(),
        agents_selected: selected,
        existence_accuracy: correct as f64 / slots.max(1) as f64,
        agent_min_ade: (ade_count > 0).then(|| ade_sum / ade_count as f64),
    })
}

/// Collision rate of the ground-truth ego futures themselves.
pub fn intrinsic_collision_rate(scenes: &[VectorScene]) -> Result<Horizons> {
    collision_rate(
        scenes
            .iter()
            .map(|s| (s.ego_future.as_slice(), s.agents.as_slice())),
    )
}

/// Where an evaluation's inputs came from and how long it took.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub scene_config: SceneGenConfig,
    pub dataset_path: String,
    pub dataset_sha256: String,
    pub checkpoint_path: Option<String>,
    pub seed: Option<u64>,
    pub code_version: String,
    pub duration_secs: f64,
    pub scenes_per_second: f64,
    pub fps_note: String,
}

/// Loads a checkpoint and a dataset file and evaluates one on the other.
pub fn evaluate_files(
    checkpoint: &Path,
    dataset: &Path,
) -> Result<(MetricsReport, RunManifest, Trainer<f64>)> {
    let start = Instant::now();
    let trainer = Trainer::<f64>::load(checkpoint)?;
    let dataset_sha256 = file_sha256(dataset)?;
    let (scene_cfg, scenes) = read_dataset(dataset)?;
    let report = evaluate(&trainer.model, &scenes, &scene_cfg)?;
    let duration = start.elapsed().as_secs_f64();
    let manifest = RunManifest {
        model_config: trainer.model.cfg.clone(),
        train_config: Some(trainer.config.clone()),
        scene_config: scene_cfg,
        dataset_path: dataset.display().to_string(),
        dataset_sha256,
        checkpoint_path: Some(checkpoint.display().to_string()),
        seed: Some(trainer.config.seed),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: duration,
        scenes_per_second: scenes.len() as f64 / duration.max(f64::MIN_POSITIVE),
        fps_note: FPS_NOTE.to_string(),
    };
    Ok((report, manifest, trainer))
}

/// `value` to two decimals, `-` when absent.
pub(crate) fn cell(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// DE columns in meters then CR columns in percent, 2 decimals each.
pub fn horizon_cells(report: &MetricsReport) -> [String; 8] {
    let de = report.de.values().into_iter().chain([report.de.avg]);
    let cr = report
        .cr
        .values()
        .into_iter()
        .chain([report.cr.avg])
        .map(|c| c * 100.0);
    let cells: Vec<String> = de.chain(cr).map(|v| format!("{v:.2}")).collect();
    cells.try_into().expect("eight cells")
}

pub const HORIZON_HEADER: [&str; 8] = ["1s", "2s", "3s", "Avg.", "1s", "2s", "3s", "Avg."];

/// Human-readable report in the layout of a results table.
pub fn render_report(report: &MetricsReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("scenes: {}\n", report.scenes));
    s.push_str(&format!(
        "collision: ego {EGO_LENGTH} x {EGO_WIDTH} m box, heading from neighbouring points, \
         against ground-truth agent futures, cumulative up to each horizon\n\n"
    ));
    s.push_str(&format!(
        "{:<8}{:^32}{:^32}\n",
        "", "L2 (m)", "Collision (%)"
    ));
    s.push_str(&format!("{:<8}", ""));
    for h in HORIZON_HEADER {
        s.push_str(&format!("{h:>8}"));
    }
    s.push_str(&format!("\n{:<8}", "model"));
    for c in horizon_cells(report) {
        s.push_str(&format!("{c:>8}"));
    }
    s.push_str("\n\n");
    s.push_str(&format!(
        "map: chamfer {} m, AP {} (thresholds 0.5/1.0/1.5 m)\n",
        cell(report.map_chamfer),
        cell(report.map_ap)
    ));
    s.push_str(&format!(
        "agents: {} selected, existence accuracy {:.2}, minADE {} m\n",
        report.agents_selected,
        report.existence_accuracy,
        cell(report.agent_min_ade)
    ));
    s
}
