//! Driving metrics, evaluation runs, the ablation matrix and SVG plots.

mod ablation;
mod evaluate;
mod map;
mod metrics;
mod plot;

pub use ablation::{
    run_ablation, standard_matrix, train_and_evaluate, train_on_scenes, AblationMatrix,
    AblationRow, AblationSpec, AblationTable,
};
pub use evaluate::{
    check_compatible, evaluate, evaluate_files, horizon_cells, intrinsic_collision_rate,
    render_report, GtPassThrough, MetricsReport, Predictor, RunManifest, FPS_NOTE, HORIZON_HEADER,
};
pub use map::{
    average_precision, detections, map_metrics, MapAccumulator, MapDetection, AP_THRESHOLDS,
    CLASS_THRESHOLD,
};
pub use metrics::{
    chord_headings, collision_flags, collision_rate, displacement_error, ego_rects,
    first_collision, Horizons, EGO_LENGTH, EGO_WIDTH, HORIZON_INDICES,
};
pub use plot::{emit_plot, emit_plots, render_svg, Viewport};
