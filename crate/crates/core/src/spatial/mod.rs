//! Spatial indexing, cross-frame matching and geometric descriptors.

mod correspond;
mod features;
mod kdtree;

pub use correspond::{
    match_against_index, match_correspondences, relative_transform, Correspondence,
    CorrespondenceSet,
};
pub(crate) use features::features_from_table;
pub use features::{local_geometric_features, DEFAULT_K_FEAT, FEATURE_DIM, FEATURE_NAMES};
pub use kdtree::{Neighbor, NeighborTable, SpatialIndex};
