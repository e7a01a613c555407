//! Post-hoc refinement of fused predictions.

mod kdtree;
mod pknn;
mod uqr;

pub use kdtree::{build_spatial_index, KdTree, Neighbor};
pub use pknn::{pknn_refine, pknn_select, PknnConfig, PknnStats};
pub use uqr::{
    assemble_features, fit_classifier, fit_classifier_rows, kpconv_forward, rigid_kernel, uqr_refine, uqr_select,
    KPConvLayer, KpConvConfig, KpConvOutput, UqrFeatures, UqrOutcome, UqrStats,
};

/// Order in which the two refiners run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefineOrder {
    #[default]
    UqrThenPknn,
    PknnThenUqr,
}
