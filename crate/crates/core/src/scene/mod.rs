//! Synthetic vectorized driving scenes and their rasterized BEV grids.

mod config;
mod dataset;
mod generate;
mod raster;
mod types;

pub use config::{SceneGenConfig, EGO_START_TOLERANCE};
pub use dataset::{file_sha256, read_dataset, write_dataset, DATASET_SCHEMA, DATASET_VERSION};
pub use generate::{generate_scene, generate_scenes, validate_scene};
pub use raster::{
    rasterize_bev, BevGrid, BEV_CHANNELS, CH_AGENT, CH_BOUNDARY, CH_DIVIDER, CH_VX, CH_VY,
};
pub use types::{AgentTrack, Command, MapClass, Polyline, VectorScene};
