use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, horizon_cells, MetricsReport, HORIZON_HEADER};
use crate::error::Result;
use crate::query::{IntraToggles, ModelConfig};
use crate::scene::{SceneGenConfig, VectorScene};
use crate::train::{prepare_examples, EpochRecord, TrainConfig, Trainer};

/// One arm of the ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    #[serde(default)]
    pub toggles: IntraToggles,
    /// Overrides the shared training seed, for paired-seed comparisons.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl AblationSpec {
    pub fn new(
        name: &str,
        perception: bool,
        prediction: bool,
        planning: bool,
        masked: bool,
    ) -> Self {
        Self {
            name: name.to_string(),
            toggles: IntraToggles {
                perception_intra: perception,
                prediction_intra: prediction,
                planning_intra: planning,
                masked_self_attention: masked,
                ..IntraToggles::default()
            },
            seed: None,
        }
    }
}

/// The six arms in results-table order: no intra-instance modules, each
/// module removed in turn, plain self-attention instead of masked, and the
/// full model.
pub fn standard_matrix() -> Vec<AblationSpec> {
    vec![
        AblationSpec::new("baseline", false, false, false, false),
        AblationSpec::new("no_planning_intra", true, true, false, true),
        AblationSpec::new("no_perception_intra", false, true, true, true),
        AblationSpec::new("no_prediction_intra", true, false, true, true),
        AblationSpec::new("unmasked", true, true, true, false),
        AblationSpec::new("full", true, true, true, true),
    ]
}

/// Matrix file: shared model and training settings plus the arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationMatrix {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub specs: Vec<AblationSpec>,
    /// Dataset to evaluate on; the training dataset when absent.
    pub eval_data: Option<PathBuf>,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            specs: standard_matrix(),
            eval_data: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Toggle columns with check marks, then DE (m) and CR (%) columns.
    pub fn render(&self) -> String {
        let toggles = [
            "Perception intra",
            "Prediction intra",
            "Planning intra",
            "Mask self-attn",
        ];
        let mut s = String::new();
        s.push_str(&format!("{:<20}", "arm"));
        for t in toggles {
            s.push_str(&format!("{t:>18}"));
        }
        s.push_str(&format!("{:^32}{:^32}\n", "L2 (m)", "Collision (%)"));
        s.push_str(&" ".repeat(20 + 18 * toggles.len()));
        for h in HORIZON_HEADER {
            s.push_str(&format!("{h:>8}"));
        }
        s.push('\n');
        for row in &self.rows {
            let t = row.spec.toggles;
            s.push_str(&format!("{:<20}", row.spec.name));
            for on in [
                t.perception_intra,
                t.prediction_intra,
                t.planning_intra,
                t.masked_self_attention,
            ] {
                s.push_str(&format!("{:>18}", if on { "√" } else { "" }));
            }
            match (&row.report, &row.error) {
                (Some(r), _) => {
                    for c in horizon_cells(r) {
                        s.push_str(&format!("{c:>8}"));
                    }
                }
                (None, e) => s.push_str(&format!(
                    "  failed: {}",
                    e.as_deref().unwrap_or("unknown error")
                )),
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every arm through `run`; a failing arm is recorded in its own row
/// and does not stop the others.
pub fn run_ablation(
    specs: &[AblationSpec],
    mut run: impl FnMut(&AblationSpec) -> Result<MetricsReport>,
) -> AblationTable {
    let rows = specs
        .iter()
        .map(|spec| match run(spec) {
            Ok(report) => AblationRow {
                spec: spec.clone(),
                report: Some(report),
                error: None,
            },
            Err(e) => AblationRow {
                spec: spec.clone(),
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    AblationTable { rows }
}

/// Trains a fresh model on `scenes`, checkpointing to `checkpoint`.
pub fn train_on_scenes(
    model: ModelConfig,
    train: TrainConfig,
    scenes: &[VectorScene],
    scene_cfg: &SceneGenConfig,
    checkpoint: Option<&Path>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trainer<f64>> {
    super::check_compatible(&model, scene_cfg)?;
    let examples = prepare_examples(scenes, scene_cfg, &model)?;
    let mut trainer = Trainer::new(model, train)?;
    trainer.fit(&examples, checkpoint, on_epoch)?;
    Ok(trainer)
}

/// Trains the arm described by `spec` under the shared settings and scores
/// it on `eval_scenes`.
pub fn train_and_evaluate(
    matrix: &AblationMatrix,
    spec: &AblationSpec,
    train_scenes: &[VectorScene],
    eval_scenes: &[VectorScene],
    scene_cfg: &SceneGenConfig,
    checkpoint: Option<&Path>,
) -> Result<MetricsReport> {
    let model = ModelConfig {
        toggles: spec.toggles,
        ..matrix.model.clone()
    };
    let train = TrainConfig {
        seed: spec.seed.unwrap_or(matrix.train.seed),
        ..matrix.train.clone()
    };
    let trainer = train_on_scenes(model, train, train_scenes, scene_cfg, checkpoint, |_| {})?;
    evaluate(&trainer.model, eval_scenes, scene_cfg)
}
