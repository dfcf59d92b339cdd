//! Generative and contact metrics over sampled two-hand interactions.

pub mod contact;
pub mod stats;

pub use contact::{
    contact_stats, overlap_cells, penetration_distance, penetration_volume, proximity_ratio, sample_surface_points,
    ContactStats, DepthAggregate, Solid, GRID, PROXIMITY,
};
pub use stats::{diversity, fhid, khid, knn_radii, precision_recall};
pub mod backbone;
pub mod report;

pub use backbone::{pair_clouds, regression_target, train_backbone, BackboneConfig, BackboneReport, FeatureBackbone, TARGET_DIM};
pub use report::{contact_summary, evaluate, write_category_csv, EvalConfig, GroupMetrics, MetricReport};
