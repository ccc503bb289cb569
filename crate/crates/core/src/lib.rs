//! Semantic cartography from sparse activation data.
//!
//! Pipeline: select the top-activating slice of a corpus for one latent,
//! measure it with a hybrid cosine/latent-axis metric, lay it out in 2D,
//! score the layout with chance-calibrated mutual-kNN gain, derive map
//! structure (density, clusters, connections, tiles, render plan), render a
//! panorama and export a tiled atlas bundle.

pub mod atlas;
pub mod cartography;
pub mod corpus;
pub mod error;
pub mod layout;
pub mod metric;
pub mod neighbors;
pub mod renderer;
pub mod synthetic;

pub use error::{Result, VistaError};
