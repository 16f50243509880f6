//! File formats: the binary basis-grid container, CSV table formats, and a
//! small SVG plotter for reports.

pub mod csv_io;
pub mod grid;
pub mod svg;
