//! Accuracy, average relative improvement, linear probes and
//! prediction-similarity heatmaps.

pub mod heatmap;
pub mod metrics;
pub mod probe;

pub use heatmap::{prediction_heatmap, render_heatmap, save_heatmap_png, write_matrix_csv};
pub use metrics::{accuracy, ari, write_ari_csv, AccuracyTable, AriInput};
pub use probe::{linear_probe, ProbeOptions, ProbeReport};
