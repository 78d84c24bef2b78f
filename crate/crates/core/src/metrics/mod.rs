//! Segmentation metrics and feature visualizations.

mod seg;
mod viz;

pub use seg::{boundary, dsc, evaluate_slice, nsd, nsd_binary, squared_edt, MetricReport};
pub use viz::{cossim_map, foreground_patches, heat_raster, pca_map, principal_axes, Raster};
