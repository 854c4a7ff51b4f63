//! Evaluation harness: slice features and Frechet distance, two-sample
//! Kolmogorov–Smirnov testing with a subsampling protocol, regional volume
//! ingestion and nearest-neighbor memorization search.

mod features;
mod fid;
mod ks;
mod nn;
mod regional;

pub use features::{
    extract_features, projection_matrix, read_features, write_features, FeatureMatrix, DEFAULT_EXTRACTOR, FEATURE_DIM,
    POOL_GRID,
};
pub use fid::{fid_table, fit_stats, frechet_distance, FeatureStats, FidGroup, FidTable};
pub use ks::{
    kolmogorov_q, ks_pvalue, ks_statistic, ks_test, permutation_protocol, KsReport, KsTest, PermutationConfig,
    StructureResult, SMALL_SAMPLE,
};
pub use nn::{nn_search, nn_search_values, Neighbor};
pub use regional::{read_regional_csv, write_regional_csv, RegionalVolumes, Structure};
