//! Formulaic alpha mining: a factor language, evaluation kernels, signal
//! metrics, an admission-controlled factor library, experience memory,
//! candidate generation, the mining loop and factor combination.

pub mod dsl;
pub mod generator;
pub mod kernels;
pub mod library;
pub mod memory;
pub mod metrics;
pub mod miner;
pub mod panel;
pub mod portfolio;
pub mod rank;
pub mod signal;

pub use panel::{Field, Panel};
pub use signal::{SignalMatrix, MISSING};
