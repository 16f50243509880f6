//! CSV table formats. Filled in alongside the analysis modules.
