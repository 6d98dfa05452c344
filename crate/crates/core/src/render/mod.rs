//! Reconstruction stages: viewing-screen simulation, patch collection,
//! demosaicing, detail recovery and the final colour adjustments.

mod collect;
mod demosaic;
mod detail;
mod finalize;
mod screen_sim;

pub use collect::{collect_patch_grid, PatchGrid};
pub use demosaic::{demosaic, demosaic_with, Interpolation};
pub use detail::{recover_detail, upsample_to_scan, DetailParams};
pub use finalize::{finalize, luma_weights, srgb_encode, FinalizeStats, OutputSpace, RenderMode, RenderParams};
pub use screen_sim::{screen_dye_rgb, simulate_viewing_screen, ScreenSimulation};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("the screen does not overlap the scan")]
    EmptyOverlap,
    #[error("{:.1}% of patches are missing (limit 20%)", .0 * 100.0)]
    TooSparse(f64),
    #[error("patch grid {0}x{1} is too small to demosaic")]
    TooSmall(usize, usize),
    #[error("expected a {0}-channel raster")]
    Channels(usize),
    #[error("invalid render parameters: {0}")]
    BadParams(String),
}
