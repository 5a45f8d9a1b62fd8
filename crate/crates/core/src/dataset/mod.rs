//! Data preparation: observation records to encounter-rate labels, location
//! filtering, spatially safe splits, raster augmentation, synthetic data and
//! the on-disk file formats.

mod encounter;
pub mod io;
mod raster;
mod spatial;
mod synth;

pub use encounter::{encounter_rates, filter_locations, LocationRecord, ObservationRecord};
pub use raster::{augment, zscore_bands, AugmentMode, AugmentPlan, FeatureRaster};
pub use spatial::{
    check_split_safety, dbscan_clusters, project_equirectangular, split, Clustering, GridIndex, Point,
    SplitAssignment, SplitEntry, SplitKind, DEFAULT_EPS_METRES, DEFAULT_FRACTIONS, EARTH_RADIUS_M,
};
pub use synth::{synth_generate, SynthConfig, SynthDataset};

/// Locations with fewer observations than this are dropped.
pub const DEFAULT_MIN_OBSERVATIONS: usize = 200;
