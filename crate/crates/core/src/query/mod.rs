//! Hierarchical query banks and block-diagonal intra-instance attention masks.

mod compose;
mod config;
mod mask;

pub(crate) use compose::gaussian_table;
pub use compose::{
    compose_motion_queries, compose_queries, motion_indices, pairwise_indices, QueryBank,
    EMBEDDING_INIT_STD,
};
pub use config::{IntraToggles, ModelConfig, PredictionMaskMode};
pub use mask::{
    build_intra_instance_mask, mask_for_perception, mask_for_planning, mask_for_prediction,
    IntraInstanceMask,
};
