//! Vegetation-structure metrics over height-normalized clouds.

mod density;
mod dtm;
mod raster;
mod strata;

pub use density::{
    point_density_grid, summary_metrics, DensityGrid, Summary, DEFAULT_DENSITY_CELL_M,
};
pub use dtm::{build_dtm, normalize_heights, DtmError, DtmGrid, DtmParams};
pub use raster::{AsciiGrid, RasterError, DEFAULT_NODATA};
pub use strata::{
    classify, classify_and_nsr, detect_shco, nsr_from_counts, shannon_from_counts, shannon_index,
    smooth3, vegetation_histogram, HeightHistogram, Nsr, StrataCounts, StrataError,
    DEFAULT_CLASS_M, DEFAULT_SHCO_SEARCH_MAX_M, GROUND_BIN_M, SHCO_MAX_VALLEY_RATIO,
};
