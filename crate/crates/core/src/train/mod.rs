//! Set matching, losses, Adam and the training loop with checkpoints.

mod checkpoint;
mod hungarian;
mod loss;
mod optim;
mod trainer;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use hungarian::{hungarian, MatchResult};
pub use loss::{
    commanded_mode, direction_loss, direction_loss_on_tape, map_loss, match_map, mean_point_l1,
    planning_loss, prediction_loss, total_loss, total_loss_with, winning_mode, LossBreakdown,
    LossChoices, LossWeights, SceneTargets, MATCH_CLASS_COST,
};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use trainer::{
    prepare_examples, write_history_csv, EpochRecord, Example, TrainConfig, Trainer,
};
