//! Monte Carlo simulator for counterfactual quantum key distribution.
//!
//! Alice sends weak coherent pulses into a Michelson interferometer whose
//! second arm runs to Bob. Bob blocks his arm when his polarization choice
//! matches Alice's, which destroys the interference and lets Alice's D1 fire.
//! Sifted key bits are kept only from D1 clicks, for which no photon crossed
//! the channel.
//!
//! Modules follow the signal chain: [`optics`] and [`devices`] model the
//! hardware, [`feedback`] the interferometer phase lock, [`protocol`] the
//! session, [`adversary`] an intercept-resend attack, and [`analysis`] the
//! error budget and reports. [`config`] and [`cli`] are the front end.

pub mod adversary;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod devices;
pub mod error;
pub mod feedback;
pub mod optics;
pub mod protocol;

pub use error::{Error, Result};
