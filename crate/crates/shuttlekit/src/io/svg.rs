//! Minimal SVG line plots.
