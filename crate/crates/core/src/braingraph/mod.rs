//! Cortical tables, morphological brain graphs, feature scaling and a
//! synthetic cohort generator.

mod graph;
mod scaler;
mod synthetic;
mod table;

pub use graph::{
    build_dataset, build_graph_pair, graph_view_values, pairing_edges, Adjacency, BrainGraph,
    GraphPair, MetricPair,
};
pub use scaler::{fit_scaler, FeatureScaler, MetricRange};
pub use synthetic::{
    curvature_profile, generate_synthetic_dataset, generate_synthetic_variant, subject_id,
    thickness_from_curvature, SyntheticVariant,
};
pub use table::{
    CorticalTable, Hemisphere, RegionGroup, CORTICAL_THICKNESS, DK_ROI_NAMES, MEAN_CURVATURE,
    ROI_COUNT,
};
