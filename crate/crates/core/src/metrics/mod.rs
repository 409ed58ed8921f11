//! Optical-flow consistency metrics: warp error, flow strength, MAWE,
//! scene cuts, dynamic degree and chunk-boundary transition windows.

mod consistency;
mod flow;
mod report;

pub use consistency::{
    detect_scene_cuts, dynamic_degree, flow_strength, frame_differences, mawe, mawe_from, transition_analysis,
    transition_window, warp_error, BoundaryMetrics, Mawe, SceneCuts, TransitionReport, WarpError, MAWE_C,
    OFS_FLOOR, SCENE_WINDOW,
};
pub use flow::{estimate_flow, estimate_video_flows, FlowField, FlowParams};
pub use report::{
    aggregate, evaluate_video, report_with_flows, AggregateReport, MetricParams, MetricReport, REPORT_KEYS,
};
