//! Federated learning with per-layer shared/personalized unit decomposition.
//!
//! Hidden units of selected layers are split into a client-shared group,
//! averaged by the server every round, and a client-specific group that never
//! leaves the client. The split is either supplied or estimated from the
//! clients' parameters with iterated principal-factor analysis.

pub mod analysis;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod facsplit;
pub mod federation;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
