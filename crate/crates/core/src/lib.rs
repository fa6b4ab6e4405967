//! Piezoelectric vibration energy harvester on a single-mode structure driven by
//! Gaussian white noise.
//!
//! The stationary harvested power is evaluated three ways: from the stationary
//! covariance ([`lyapunov`]), by frequency-domain quadrature ([`spectral`]), and by
//! seeded simulation ([`sim`]). [`optimize`] tunes the two passive feedback gains
//! to maximize it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod lyapunov;
pub mod model;
pub mod optimize;
pub mod quadrature;
pub mod sim;
pub mod spectral;

pub use error::{Error, Result};
pub use model::{ControlGains, HarvesterParams, PhysicalParams, StateSpaceModel};
