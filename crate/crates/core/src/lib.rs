pub mod raster;
pub mod registration;
pub mod render;
pub mod colorimetry;
pub mod geometry;
pub mod screen;
pub mod simulate;
pub mod project;
pub mod preview;
