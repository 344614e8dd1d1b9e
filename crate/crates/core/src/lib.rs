//! Fractional-order viscoelastic rendering models tuned from ordinal
//! perceptual feedback.
//!
//! The crate covers the full pipeline: simulating and identifying the
//! fractional standard linear solid ([`fom`], [`sysid`]), masking
//! non-passive renderings ([`passivity`]), learning a latent realism score
//! from three-level ordinal labels ([`gp`]), choosing what to render next
//! ([`bo`]), pooling many participants with a Bayesian committee machine
//! ([`bcm`]) and simulating participants for desk-scale studies
//! ([`oracle`], [`validation`]).

pub mod bcm;
pub mod bo;
pub mod design;
pub mod error;
pub mod fom;
pub mod gp;
pub mod optim;
pub mod oracle;
pub mod passivity;
pub mod series;
pub mod store;
pub mod sysid;
pub mod validation;

pub use error::{Error, Result};
pub use fom::{DiscreteImpedance, ModelParams};
pub use series::{SignalRole, TimeSeries};
